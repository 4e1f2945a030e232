//! Output files appear whole or not at all: everything is written to a
//! temporary sibling and renamed into place.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn parent_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes a file through `fill`; on any error the destination is untouched.
pub fn write_file(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = parent_of(path);
    let tmp = tempfile::Builder::new().prefix(".gcmc-").tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, |w| w.write_all(bytes).map_err(|e| Error::io(path, e)))
}

/// Fills a fresh directory through `fill` and swaps it in for `path`.
pub fn write_dir(path: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = parent_of(path);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::Builder::new().prefix(".gcmc-").tempdir_in(dir).map_err(|e| Error::io(dir, e))?;
    fill(tmp.path())?;
    let staged = tmp.keep();
    let old = if path.exists() {
        let aside: PathBuf = tempfile::Builder::new().prefix(".gcmc-old-").tempdir_in(dir).map_err(|e| Error::io(dir, e))?.keep();
        std::fs::remove_dir(&aside).map_err(|e| Error::io(&aside, e))?;
        std::fs::rename(path, &aside).map_err(|e| Error::io(path, e))?;
        Some(aside)
    } else {
        None
    };
    if let Err(e) = std::fs::rename(&staged, path) {
        if let Some(old) = &old {
            let _ = std::fs::rename(old, path);
        }
        let _ = std::fs::remove_dir_all(&staged);
        return Err(Error::io(path, e));
    }
    if let Some(old) = old {
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}
