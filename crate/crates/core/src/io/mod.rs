//! Dataset readers and the on-disk formats for models and diet bundles.
//!
//! Writers go through a temporary file in the target directory followed by
//! a rename, so readers never observe a half-written file.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub mod bundle;
pub mod container;
pub mod idx;

pub use bundle::{load_bundle, save_bundle};
pub use container::{load_model, save_model};
pub use idx::{load_mnist, read_cifar10, read_mnist_idx, Split};

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}
