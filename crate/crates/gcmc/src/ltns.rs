//! Tensor container: magic `LTNS`, version `u32`, rank `u32`, extents
//! `u64[rank]`, then `f64` values, all little-endian.
//!
//! Several records may follow each other in one file.

use std::io::{Read, Write};

use gcmc_core::Tensor;

pub const MAGIC: &[u8; 4] = b"LTNS";
pub const VERSION: u32 = 1;
/// Largest rank accepted on read.
pub const MAX_RANK: u32 = 8;

pub fn write_tensor(w: &mut (impl Write + ?Sized), t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn invalid(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record, or `None` at a clean end of input.
pub fn read_tensor(r: &mut impl Read) -> std::io::Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            return if got == 0 { Ok(None) } else { Err(invalid("truncated magic")) };
        }
        got += n;
    }
    if &magic != MAGIC {
        return Err(invalid("bad magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(invalid(format!("unsupported version {version}")));
    }
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(invalid(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = u64::from_le_bytes(b);
        count = count.checked_mul(d).filter(|c| *c <= 1 << 32).ok_or_else(|| invalid("tensor too large"))?;
        shape.push(d as usize);
    }
    let mut bytes = vec![0u8; count as usize * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data).map(Some).map_err(|e| invalid(e.to_string()))
}

/// Reads records until the end of input.
pub fn read_all(r: &mut impl Read) -> std::io::Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}
