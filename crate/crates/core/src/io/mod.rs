//! File formats: flat key=value configs, trajectories, PFM depth maps, PNG
//! images and masks, and tri-plane checkpoints.

pub mod checkpoint;
pub mod config;
pub mod pfm;
pub mod png;
pub mod trajectory;

use std::path::Path;

use crate::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
