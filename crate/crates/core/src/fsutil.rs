//! Atomic file writes shared by the dump and report writers.

use std::fs;
use std::io;
use std::path::Path;

/// Write `bytes` to `path` via a temp file in the same directory plus rename,
/// so interrupted runs never leave a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes)?;
    fs::rename(tmp, path)
}
