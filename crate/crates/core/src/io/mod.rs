//! File formats: PFM maps, camera text files, binary PLY clouds and PNG images.

pub mod camera;
pub mod image;
pub mod pfm;
pub mod ply;

use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
