//! Float model files.
//!
//! Layout: one line of JSON (the manifest) terminated by `\n`, followed by
//! the parameter blob: little-endian f32 values, row-major, concatenated in
//! manifest order. The manifest records each tensor's shape, element offset
//! and count, and the blob's length and CRC-32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_file};
use crate::error::{Error, Result};
use crate::model::{LayerDef, ModelSpec};
use crate::tensor::{Conv2d, Linear, MaxPool2d, Tensor};

pub const MODEL_FORMAT: &str = "dietcnn-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub shape: Vec<usize>,
    /// In f32 elements from the start of the blob.
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerEntry {
    Conv2D {
        stride: usize,
        padding: usize,
        weight: BlobRef,
        bias: Option<BlobRef>,
    },
    Linear {
        weight: BlobRef,
        bias: Option<BlobRef>,
    },
    ReLU,
    Sigmoid,
    MaxPool2D {
        window: usize,
        stride: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub layers: Vec<LayerEntry>,
    pub blob_bytes: usize,
    pub blob_crc32: u32,
}

fn push(blob: &mut Vec<f32>, t: &Tensor) -> BlobRef {
    let r = BlobRef {
        shape: t.shape().to_vec(),
        offset: blob.len(),
        count: t.len(),
    };
    blob.extend_from_slice(t.data());
    r
}

/// Canonical bytes of a model file.
pub fn encode_model(model: &ModelSpec) -> Vec<u8> {
    let mut blob = Vec::new();
    let layers = model
        .layers()
        .iter()
        .map(|l| match l {
            LayerDef::Conv2d(c) => LayerEntry::Conv2D {
                stride: c.stride,
                padding: c.padding,
                weight: push(&mut blob, &c.weight),
                bias: c.bias.as_ref().map(|b| push(&mut blob, b)),
            },
            LayerDef::Linear(lin) => LayerEntry::Linear {
                weight: push(&mut blob, &lin.weight),
                bias: lin.bias.as_ref().map(|b| push(&mut blob, b)),
            },
            LayerDef::Relu => LayerEntry::ReLU,
            LayerDef::Sigmoid => LayerEntry::Sigmoid,
            LayerDef::MaxPool2d(p) => LayerEntry::MaxPool2D {
                window: p.window,
                stride: p.stride,
            },
            LayerDef::Flatten => LayerEntry::Flatten,
        })
        .collect();
    let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        format_version: MODEL_VERSION,
        input_shape: model.input_shape(),
        class_count: model.class_count(),
        layers,
        blob_bytes: bytes.len(),
        blob_crc32: crc32fast::hash(&bytes),
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.extend_from_slice(&bytes);
    out
}

/// Parses and validates a model file's bytes.
pub fn decode_model(bytes: &[u8]) -> Result<ModelSpec> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("model file has no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Format(format!(
            "not a model file (format `{}`)",
            manifest.format
        )));
    }
    if manifest.format_version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: manifest.format_version,
        });
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Truncated {
            path: "model blob".into(),
            expected: manifest.blob_bytes as u64,
            found: blob.len() as u64,
        });
    }
    let crc = crc32fast::hash(blob);
    if crc != manifest.blob_crc32 {
        return Err(Error::Checksum {
            expected: manifest.blob_crc32,
            found: crc,
        });
    }
    if !blob.len().is_multiple_of(4) {
        return Err(Error::Format("blob length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut refs: Vec<&BlobRef> = Vec::new();
    for l in &manifest.layers {
        match l {
            LayerEntry::Conv2D { weight, bias, .. } | LayerEntry::Linear { weight, bias } => {
                refs.push(weight);
                refs.extend(bias.iter());
            }
            _ => {}
        }
    }
    check_refs(&refs, values.len())?;

    let tensor = |r: &BlobRef| {
        Tensor::new(
            r.shape.clone(),
            values[r.offset..r.offset + r.count].to_vec(),
        )
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for l in &manifest.layers {
        layers.push(match l {
            LayerEntry::Conv2D {
                stride,
                padding,
                weight,
                bias,
            } => LayerDef::Conv2d(Conv2d {
                weight: tensor(weight)?,
                bias: bias.as_ref().map(tensor).transpose()?,
                stride: *stride,
                padding: *padding,
            }),
            LayerEntry::Linear { weight, bias } => LayerDef::Linear(Linear {
                weight: tensor(weight)?,
                bias: bias.as_ref().map(tensor).transpose()?,
            }),
            LayerEntry::ReLU => LayerDef::Relu,
            LayerEntry::Sigmoid => LayerDef::Sigmoid,
            LayerEntry::MaxPool2D { window, stride } => LayerDef::MaxPool2d(MaxPool2d {
                window: *window,
                stride: *stride,
            }),
            LayerEntry::Flatten => LayerDef::Flatten,
        });
    }
    let model = ModelSpec::new(layers, manifest.input_shape, manifest.class_count)
        .map_err(|e| Error::Invariant(format!("model graph does not chain: {e}")))?;
    if model.layers().iter().any(|l| match l {
        LayerDef::Conv2d(c) => {
            !c.weight.is_finite() || c.bias.as_ref().is_some_and(|b| !b.is_finite())
        }
        LayerDef::Linear(l) => {
            !l.weight.is_finite() || l.bias.as_ref().is_some_and(|b| !b.is_finite())
        }
        _ => false,
    }) {
        return Err(Error::Invariant("model holds non-finite parameters".into()));
    }
    Ok(model)
}

fn check_refs(refs: &[&BlobRef], len: usize) -> Result<()> {
    let mut spans = Vec::with_capacity(refs.len());
    for r in refs {
        let n: usize = r.shape.iter().product();
        if n != r.count {
            return Err(Error::Invariant(format!(
                "tensor of shape {:?} declares {} elements",
                r.shape, r.count
            )));
        }
        let end = r
            .offset
            .checked_add(r.count)
            .filter(|&e| e <= len)
            .ok_or_else(|| {
                Error::Invariant(format!(
                    "tensor at offset {} (+{}) exceeds the {len}-element blob",
                    r.offset, r.count
                ))
            })?;
        spans.push((r.offset, end));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Invariant("overlapping tensors in model blob".into()));
    }
    Ok(())
}

pub fn save_model(model: &ModelSpec, path: &Path) -> Result<()> {
    atomic_write(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    decode_model(&read_file(path)?)
}
