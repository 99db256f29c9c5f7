//! Diet bundle files: codebooks, tables and symbolic weights in one binary.
//!
//! ```text
//! header (32 bytes)
//!   "DIET"  format_version:u32  n_clusters:u32  n_cfilters:u32  n_ffilters:u32
//!   symbol_width:u8  flags:u8  reserved:u16  payload_len:u32  payload_crc32:u32
//! payload
//!   input_shape 3 x u32, class_count u32
//!   centroids (f64): activation, conv filter, fc filter
//!   zero symbol
//!   mul_conv, mul_fc, add, act_relu, act_sigmoid
//!   bias table count u32, then per table: param_layer u32, channels u32, symbols
//!   pool_rank
//!   layer count u32, then per layer: tag u8 and its fields
//! ```
//! All integers are little-endian; symbols take `symbol_width` bytes each.

use std::path::Path;

use super::{atomic_write, read_file};
use crate::codebook::{Codebook, CodebookKind, Symbol};
use crate::engine::SymbolicTensor;
use crate::error::{Error, Result};
use crate::lut::{ActKind, BiasTable, LutSet, SymbolicLayer, SymbolicModel};
use crate::tensor::MaxPool2d;

pub const BUNDLE_MAGIC: [u8; 4] = *b"DIET";
pub const BUNDLE_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

const TAG_CONV: u8 = 0;
const TAG_LINEAR: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_SIGMOID: u8 = 3;
const TAG_POOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;

/// Bytes per stored symbol for these codebook sizes.
pub fn bundle_symbol_width(k: usize, cf: usize, ff: usize) -> u8 {
    if k.max(cf).max(ff) <= 256 {
        1
    } else {
        2
    }
}

struct Writer {
    buf: Vec<u8>,
    width: u8,
}

impl Writer {
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn sym(&mut self, id: usize) {
        if self.width == 1 {
            self.buf.push(id as u8);
        } else {
            self.buf.extend_from_slice(&(id as u16).to_le_bytes());
        }
    }

    fn syms(&mut self, s: &[Symbol]) {
        s.iter().for_each(|s| self.sym(s.id()));
    }

    fn tensor(&mut self, t: &SymbolicTensor) {
        self.u32(t.shape().len());
        t.shape().iter().for_each(|&d| self.u32(d));
        self.syms(t.symbols());
    }

    fn bias_ref(&mut self, b: Option<usize>) {
        self.u32(b.map_or(u32::MAX as usize, |b| b));
    }
}

/// Canonical bytes of a bundle.
pub fn encode_bundle(model: &SymbolicModel) -> Vec<u8> {
    let luts = model.luts();
    let (k, cf, ff) = (luts.n_clusters(), luts.n_cfilters(), luts.n_ffilters());
    let width = bundle_symbol_width(k, cf, ff);
    let mut w = Writer {
        buf: Vec::new(),
        width,
    };
    model.input_shape().iter().for_each(|&d| w.u32(d));
    w.u32(model.class_count());
    w.f64s(model.act_codebook().centroids());
    w.f64s(model.conv_codebook().centroids());
    w.f64s(model.fc_codebook().centroids());
    w.sym(luts.zero().id());
    w.syms(luts.mul_conv_table());
    w.syms(luts.mul_fc_table());
    w.syms(luts.add_table());
    w.syms(luts.act_table(ActKind::Relu));
    w.syms(luts.act_table(ActKind::Sigmoid));
    w.u32(luts.bias_tables().len());
    for b in luts.bias_tables() {
        w.u32(b.param_layer);
        w.u32(b.channels);
        w.syms(&b.table);
    }
    luts.pool_rank().iter().for_each(|&r| w.sym(r as usize));
    w.u32(model.layers().len());
    for layer in model.layers() {
        match layer {
            SymbolicLayer::Conv2d {
                weight,
                stride,
                padding,
                bias,
            } => {
                w.buf.push(TAG_CONV);
                w.u32(*stride);
                w.u32(*padding);
                w.bias_ref(*bias);
                w.tensor(weight);
            }
            SymbolicLayer::Linear { weight, bias } => {
                w.buf.push(TAG_LINEAR);
                w.bias_ref(*bias);
                w.tensor(weight);
            }
            SymbolicLayer::Activation(ActKind::Relu) => w.buf.push(TAG_RELU),
            SymbolicLayer::Activation(ActKind::Sigmoid) => w.buf.push(TAG_SIGMOID),
            SymbolicLayer::MaxPool2d(p) => {
                w.buf.push(TAG_POOL);
                w.u32(p.window);
                w.u32(p.stride);
            }
            SymbolicLayer::Flatten => w.buf.push(TAG_FLATTEN),
        }
    }

    let payload = w.buf;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&BUNDLE_MAGIC);
    for v in [BUNDLE_VERSION, k as u32, cf as u32, ff as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(width);
    out.push(model.is_diet_variant() as u8);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    width: u8,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!("bundle payload ends early at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    /// A count that must fit in the remaining payload at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u32()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Format(format!(
                "implausible count {n} at byte {}",
                self.pos
            )));
        }
        Ok(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn syms(&mut self, n: usize) -> Result<Vec<Symbol>> {
        let bytes = self.take(n * self.width as usize)?;
        Ok(if self.width == 1 {
            bytes.iter().map(|&b| Symbol(b as u16)).collect()
        } else {
            bytes
                .chunks_exact(2)
                .map(|c| Symbol(u16::from_le_bytes([c[0], c[1]])))
                .collect()
        })
    }

    fn bias_ref(&mut self) -> Result<Option<usize>> {
        let v = self.u32()?;
        Ok((v != u32::MAX as usize).then_some(v))
    }

    fn tensor(&mut self) -> Result<SymbolicTensor> {
        let rank = self.u32()?;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("symbolic tensor of rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n * self.width as usize <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Format(format!("implausible tensor shape {shape:?}")))?;
        SymbolicTensor::new(shape, self.syms(n)?)
    }
}

fn codebook(centroids: Vec<f64>, kind: CodebookKind) -> Result<Codebook> {
    if centroids
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::Invariant(format!(
            "{kind:?} centroids are not strictly ascending"
        )));
    }
    let n = centroids.len();
    let cb = Codebook::new(centroids, kind)?;
    if cb.len() != n {
        return Err(Error::Invariant(format!(
            "{kind:?} codebook changed on load"
        )));
    }
    Ok(cb)
}

/// Parses and validates a bundle's bytes.
pub fn decode_bundle(bytes: &[u8], path: &str) -> Result<SymbolicModel> {
    if bytes.len() < 4 || bytes[..4] != BUNDLE_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: path.to_string(),
            expected: u32::from_be_bytes(BUNDLE_MAGIC),
            found: u32::from_be_bytes(found),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_string(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != BUNDLE_VERSION {
        return Err(Error::VersionMismatch {
            expected: BUNDLE_VERSION,
            found: version,
        });
    }
    let (k, cf, ff) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let (width, flags) = (bytes[20], bytes[21]);
    let payload_len = u32::from_le_bytes(bytes[24..28].try_into().expect("4 bytes")) as usize;
    let stored_crc = u32::from_le_bytes(bytes[28..32].try_into().expect("4 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != payload_len {
        return Err(Error::Truncated {
            path: path.to_string(),
            expected: (HEADER_LEN + payload_len) as u64,
            found: bytes.len() as u64,
        });
    }
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(Error::Checksum {
            expected: stored_crc,
            found: crc,
        });
    }
    if width != bundle_symbol_width(k, cf, ff) {
        return Err(Error::Invariant(format!(
            "symbol width {width} does not match codebook sizes {k}/{cf}/{ff}"
        )));
    }
    if flags > 1 {
        return Err(Error::Format(format!("unknown bundle flags {flags:#04x}")));
    }

    let mut r = Reader {
        buf: payload,
        pos: 0,
        width,
    };
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let class_count = r.u32()?;
    let act = codebook(r.f64s(k)?, CodebookKind::Activation)?;
    let conv = codebook(r.f64s(cf)?, CodebookKind::ConvFilter)?;
    let fc = codebook(r.f64s(ff)?, CodebookKind::FcFilter)?;
    let zero = r.syms(1)?[0];
    let mul_conv = r.syms(k * cf)?;
    let mul_fc = r.syms(k * ff)?;
    let add = r.syms(k * k)?;
    let relu = r.syms(k)?;
    let sigmoid = r.syms(k)?;
    let n_bias = r.count(8)?;
    let mut bias = Vec::with_capacity(n_bias);
    for _ in 0..n_bias {
        let param_layer = r.u32()?;
        let channels = r.u32()?;
        let table = r.syms(
            channels
                .checked_mul(k)
                .ok_or_else(|| Error::Format("bias table size overflows".into()))?,
        )?;
        bias.push(BiasTable {
            param_layer,
            channels,
            table,
        });
    }
    let pool_rank = r.syms(k)?.into_iter().map(|s| s.0).collect();
    let n_layers = r.count(1)?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push(match r.u8()? {
            TAG_CONV => {
                let stride = r.u32()?;
                let padding = r.u32()?;
                let bias = r.bias_ref()?;
                let weight = r.tensor()?;
                if weight.shape().len() != 4 {
                    return Err(Error::Invariant(format!(
                        "conv layer {i} weight is not rank 4"
                    )));
                }
                SymbolicLayer::Conv2d {
                    weight,
                    stride,
                    padding,
                    bias,
                }
            }
            TAG_LINEAR => {
                let bias = r.bias_ref()?;
                let weight = r.tensor()?;
                if weight.shape().len() != 2 {
                    return Err(Error::Invariant(format!(
                        "linear layer {i} weight is not rank 2"
                    )));
                }
                SymbolicLayer::Linear { weight, bias }
            }
            TAG_RELU => SymbolicLayer::Activation(ActKind::Relu),
            TAG_SIGMOID => SymbolicLayer::Activation(ActKind::Sigmoid),
            TAG_POOL => SymbolicLayer::MaxPool2d(MaxPool2d {
                window: r.u32()?,
                stride: r.u32()?,
            }),
            TAG_FLATTEN => SymbolicLayer::Flatten,
            t => return Err(Error::Format(format!("unknown layer tag {t} at layer {i}"))),
        });
    }
    if r.pos != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last layer",
            payload.len() - r.pos
        )));
    }

    let luts = LutSet {
        n_clusters: k,
        n_cfilters: cf,
        n_ffilters: ff,
        mul_conv,
        mul_fc,
        add,
        relu,
        sigmoid,
        bias,
        pool_rank,
        zero,
    };
    SymbolicModel::from_parts(
        layers,
        input_shape,
        class_count,
        [act, conv, fc],
        luts,
        flags == 1,
    )
}

pub fn save_bundle(model: &SymbolicModel, path: &Path) -> Result<()> {
    atomic_write(path, &encode_bundle(model))
}

pub fn load_bundle(path: &Path) -> Result<SymbolicModel> {
    decode_bundle(&read_file(path)?, &path.display().to_string())
}
