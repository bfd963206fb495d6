//! Cross-domain few-shot hyperspectral image classification.
//!
//! A dual-branch residual extractor is trained episodically on a labeled
//! source scene and a few labeled target pixels, with prototype-based
//! classification, a query-prototype contrastive term and MMD alignment.

pub mod cli;
pub mod config;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod hsi_data;
pub mod losses;
pub mod network;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
