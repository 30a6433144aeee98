mod error;
pub mod config;
pub mod data;
pub mod distill;
pub mod eval;
pub mod gradcore;
pub mod models;
pub mod pipeline;
pub mod train;
pub mod trajectories;

pub use error::{Error, Result};

use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes through a sibling temporary file and a rename, so readers never see
/// a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
