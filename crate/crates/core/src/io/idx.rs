//! MNIST IDX and CIFAR-10 binary readers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(path: &Path, bytes: &[u8], magic: u32, words: usize) -> Result<Vec<u32>> {
    let need = 4 * words;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected: need as u64,
            found: bytes.len() as u64,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: magic,
            found,
        });
    }
    Ok((1..words).map(|i| be_u32(bytes, 4 * i)).collect())
}

fn payload<'a>(path: &Path, bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    if bytes.len() < offset + len {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected: (offset + len) as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(&bytes[offset..offset + len])
}

/// Raw image bytes of an IDX3 file: (count, rows, cols, pixels).
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let dims = header(path, &bytes, IMAGES_MAGIC, 4)?;
    let (n, rows, cols) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let pixels = payload(path, &bytes, 16, n * rows * cols)?;
    Ok((n, rows, cols, pixels.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let dims = header(path, &bytes, LABELS_MAGIC, 2)?;
    Ok(payload(path, &bytes, 8, dims[0] as usize)?.to_vec())
}

/// Reads an image/label file pair. Pixels are scaled to [0, 1]; with
/// `pad_to` the images are zero-padded symmetrically to that size.
pub fn read_mnist_idx(images: &Path, labels: &Path, pad_to: Option<usize>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::Format(format!(
            "{} holds no images",
            images.display()
        )));
    }
    let (h, w) = match pad_to {
        Some(p) if p < rows || p < cols => {
            return Err(Error::InvalidArgument(format!(
                "cannot pad {rows}x{cols} images to {p}"
            )))
        }
        Some(p) => (p, p),
        None => (rows, cols),
    };
    let (top, left) = ((h - rows) / 2, (w - cols) / 2);
    let mut data = vec![0f32; n * h * w];
    for (i, img) in pixels.chunks_exact(rows * cols).enumerate() {
        for y in 0..rows {
            let dst = &mut data[i * h * w + (y + top) * w + left..][..cols];
            for (d, &b) in dst.iter_mut().zip(&img[y * cols..(y + 1) * cols]) {
                *d = b as f32 / 255.0;
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Paths of the standard MNIST file pair in `dir`, accepting both the
/// `-idx3-ubyte` and `.idx3-ubyte` spellings.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let p = split.prefix();
    let pick = |a: String, b: String| {
        let pa = dir.join(&a);
        if pa.exists() {
            pa
        } else {
            let pb = dir.join(b);
            if pb.exists() {
                pb
            } else {
                pa
            }
        }
    };
    (
        pick(
            format!("{p}-images-idx3-ubyte"),
            format!("{p}-images.idx3-ubyte"),
        ),
        pick(
            format!("{p}-labels-idx1-ubyte"),
            format!("{p}-labels.idx1-ubyte"),
        ),
    )
}

/// One MNIST split from `dir`, padded to 32x32 for LeNet-5.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    read_mnist_idx(&images, &labels, Some(32))
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batch files: 3073-byte records, label first, then the
/// red, green and blue 32x32 planes. Pixels are scaled to [0, 1].
pub fn read_cifar10(paths: &[PathBuf]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len().div_ceil(CIFAR_RECORD).max(1) * CIFAR_RECORD;
            return Err(Error::Truncated {
                path: path.display().to_string(),
                expected: whole as u64,
                found: bytes.len() as u64,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::Format(format!(
                    "{}: label {} out of range",
                    path.display(),
                    rec[0]
                )));
            }
            labels.push(rec[0]);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR-10 files given".into()));
    }
    Dataset::new(Tensor::new(vec![labels.len(), 3, 32, 32], data)?, labels)
}
