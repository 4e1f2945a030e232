//! Compressed file layout. All integers are little-endian:
//!
//! ```text
//! "GCMC" | version u8 | config hash u64 | width u16 | height u16 |
//! lambda index u8 | ẑ segment length u32 | payload crc32 u32 |
//! ẑ segment | ŷ segment
//! ```
//!
//! The checksum covers every other byte of the file, so damaged streams are
//! rejected before any entropy decoding.

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GCMC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 8 + 2 + 2 + 1 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub config_hash: u64,
    pub width: u16,
    pub height: u16,
    pub lambda_index: u8,
    pub z_len: u32,
}

/// A parsed stream borrowing its two entropy-coded segments.
#[derive(Clone, Copy, Debug)]
pub struct Stream<'a> {
    pub header: Header,
    pub z_segment: &'a [u8],
    pub y_segment: &'a [u8],
}

/// Offset of the checksum field.
const CRC_AT: usize = HEADER_LEN - 4;

/// CRC-32 over every byte except the checksum field itself.
fn stream_crc(head: &[u8], body: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&head[..CRC_AT]);
    h.update(body);
    h.finalize()
}

pub fn write(header: &Header, z_segment: &[u8], y_segment: &[u8]) -> Result<Vec<u8>> {
    if z_segment.len() as u64 != header.z_len as u64 {
        return Err(Error::invalid("header z length disagrees with segment"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + z_segment.len() + y_segment.len());
    out.extend_from_slice(&MAGIC);
    out.push(header.version);
    out.extend_from_slice(&header.config_hash.to_le_bytes());
    out.extend_from_slice(&header.width.to_le_bytes());
    out.extend_from_slice(&header.height.to_le_bytes());
    out.push(header.lambda_index);
    out.extend_from_slice(&header.z_len.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(z_segment);
    out.extend_from_slice(y_segment);
    let crc = stream_crc(&out, &out[HEADER_LEN..]);
    out[CRC_AT..HEADER_LEN].copy_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn parse(bytes: &[u8]) -> Result<Stream<'_>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::corrupt("stream shorter than header"));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::corrupt("bad magic"));
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(Error::corrupt(alloc::format!("unsupported version {version}")));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let mut hash = [0u8; 8];
    hash.copy_from_slice(&bytes[5..13]);
    let header = Header {
        version,
        config_hash: u64::from_le_bytes(hash),
        width: u16_at(13),
        height: u16_at(15),
        lambda_index: bytes[17],
        z_len: u32::from_le_bytes([bytes[18], bytes[19], bytes[20], bytes[21]]),
    };
    let crc = u32::from_le_bytes([bytes[CRC_AT], bytes[CRC_AT + 1], bytes[CRC_AT + 2], bytes[CRC_AT + 3]]);
    let body = &bytes[HEADER_LEN..];
    let z_len = header.z_len as usize;
    if z_len > body.len() {
        return Err(Error::corrupt("z segment runs past end of stream"));
    }
    if stream_crc(bytes, body) != crc {
        return Err(Error::corrupt("checksum mismatch"));
    }
    if header.width == 0 || header.height == 0 {
        return Err(Error::corrupt("zero image dimension"));
    }
    Ok(Stream {
        header,
        z_segment: &body[..z_len],
        y_segment: &body[z_len..],
    })
}
