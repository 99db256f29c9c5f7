//! The multiplication-free forward pass.
//!
//! Activations travel as symbols of the activation codebook. A convolution
//! or fully connected layer looks up one product per (input, weight) pair in
//! the multiply table and accumulates them through the add table, starting
//! from the zero symbol. Bias is one more lookup after accumulation,
//! activations are one lookup per element, and pooling compares symbol
//! ranks. Nothing in this module multiplies activation data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::Symbol;
use crate::error::{Error, Result};
use crate::lut::{ActKind, BiasTable, LutSet, SymbolicLayer, SymbolicModel};
use crate::model::LayerKind;
use crate::tensor::{argmax, MaxPool2d, Tensor};

/// Same layout as a [`Tensor`] but holding symbol ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolicTensor {
    shape: Vec<usize>,
    symbols: Vec<Symbol>,
}

impl SymbolicTensor {
    pub fn new(shape: Vec<usize>, symbols: Vec<Symbol>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != symbols.len() {
            return Err(Error::Shape {
                op: "SymbolicTensor::new",
                axis: "len",
                expected: n,
                actual: symbols.len(),
            });
        }
        Ok(Self { shape, symbols })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, symbols: Vec<Symbol>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), symbols.len());
        Self { shape, symbols }
    }

    pub fn full(shape: &[usize], s: Symbol) -> Self {
        Self {
            shape: shape.to_vec(),
            symbols: vec![s; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Shape without a leading batch axis of 1 on rank-4 tensors.
    fn per_image(&self) -> &[usize] {
        match self.shape.as_slice() {
            [1, rest @ ..] if rest.len() == 3 => rest,
            s => s,
        }
    }

    /// Errors if any id is >= `limit`.
    pub fn check_range(&self, limit: usize, what: &str) -> Result<()> {
        match self.symbols.iter().find(|s| s.id() >= limit) {
            Some(bad) => Err(Error::SymbolOutOfRange {
                table: what.to_string(),
                id: bad.0 as u32,
                limit: limit as u32,
            }),
            None => Ok(()),
        }
    }
}

/// Order in which a bag of product symbols is accumulated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FoldOrder {
    /// Channel-major, then row-major inside the window (the natural order).
    #[default]
    ChannelMajorRaster,
    /// Ascending by centroid value.
    ValueAscending,
    /// A seeded shuffle, different for every output element.
    RandomSeeded(u64),
}

impl std::str::FromStr for FoldOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" | "channel-major" => Ok(FoldOrder::ChannelMajorRaster),
            "ascending" | "value-ascending" => Ok(FoldOrder::ValueAscending),
            other => match other.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(FoldOrder::RandomSeeded)
                    .map_err(|_| Error::InvalidArgument(format!("bad fold order seed `{seed}`"))),
                None => Err(Error::InvalidArgument(format!(
                    "unknown fold order `{other}` (raster, ascending, random:<seed>)"
                ))),
            },
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl FoldOrder {
    /// Reorders a bag in place. `element` identifies the output element the
    /// bag belongs to, so random orders differ between elements but are
    /// reproducible.
    pub fn arrange(self, bag: &mut [Symbol], pool_rank: &[u16], element: u64) {
        match self {
            FoldOrder::ChannelMajorRaster => {}
            FoldOrder::ValueAscending => bag.sort_by_key(|s| pool_rank[s.id()]),
            FoldOrder::RandomSeeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(element)));
                bag.shuffle(&mut rng);
            }
        }
    }
}

/// Symbolic accumulation: the symbols of `bag` are arranged by `order` and
/// added one by one through the add table, starting from the zero symbol.
pub fn fold_add(bag: &[Symbol], luts: &LutSet, order: FoldOrder) -> Result<Symbol> {
    if bag.is_empty() {
        return Err(Error::InvalidArgument("fold_add on an empty bag".into()));
    }
    let mut items = bag.to_vec();
    order.arrange(&mut items, luts.pool_rank(), 0);
    Ok(fold_in_order(&items, luts))
}

#[inline]
fn fold_in_order(items: &[Symbol], luts: &LutSet) -> Symbol {
    items.iter().fold(luts.zero(), |acc, &s| luts.add(acc, s))
}

/// Lookup counts for one layer of a diet forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LayerTrace {
    pub index: usize,
    pub kind: Option<LayerKind>,
    pub output_shape: Vec<usize>,
    /// Multiply-table lookups.
    pub mul_lookups: u64,
    /// Add-table lookups spent on accumulation.
    pub add_lookups: u64,
    pub bias_lookups: u64,
    pub act_lookups: u64,
    /// Rank reads spent on pooling.
    pub pool_lookups: u64,
}

/// Per-layer lookup counts of one diet forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
}

impl Trace {
    pub fn mul_lookups(&self) -> u64 {
        self.layers.iter().map(|l| l.mul_lookups).sum()
    }

    pub fn add_lookups(&self) -> u64 {
        self.layers.iter().map(|l| l.add_lookups).sum()
    }

    pub fn bias_lookups(&self) -> u64 {
        self.layers.iter().map(|l| l.bias_lookups).sum()
    }

    pub fn act_lookups(&self) -> u64 {
        self.layers.iter().map(|l| l.act_lookups).sum()
    }

    pub fn pool_lookups(&self) -> u64 {
        self.layers.iter().map(|l| l.pool_lookups).sum()
    }

    /// Adds another trace's counts layer by layer.
    pub fn accumulate(&mut self, other: &Trace) {
        if self.layers.is_empty() {
            self.layers = other.layers.clone();
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.mul_lookups += b.mul_lookups;
            a.add_lookups += b.add_lookups;
            a.bias_lookups += b.bias_lookups;
            a.act_lookups += b.act_lookups;
            a.pool_lookups += b.pool_lookups;
        }
    }
}

fn chw(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(Error::Shape {
            op,
            axis: "rank",
            expected: 3,
            actual: other.len(),
        }),
    }
}

fn conv_parts(layer: &SymbolicLayer) -> Result<(&SymbolicTensor, usize, usize, Option<usize>)> {
    match layer {
        SymbolicLayer::Conv2d {
            weight,
            stride,
            padding,
            bias,
        } => Ok((weight, *stride, *padding, *bias)),
        other => Err(Error::InvalidLayer(format!(
            "expected a Conv2D layer, got {}",
            other.kind()
        ))),
    }
}

/// Discrete convolution over a (C, H, W) or (1, C, H, W) symbolic input.
pub fn diet_conv2d(
    input: &SymbolicTensor,
    layer: &SymbolicLayer,
    luts: &LutSet,
    order: FoldOrder,
) -> Result<SymbolicTensor> {
    let (weight, stride, padding, bias) = conv_parts(layer)?;
    let bias = bias.map(|b| &luts.bias_tables()[b]);
    conv_traced(
        input,
        weight,
        stride,
        padding,
        bias,
        luts,
        order,
        &mut LayerTrace::default(),
    )
}

#[allow(clippy::too_many_arguments)]
fn conv_traced(
    input: &SymbolicTensor,
    weight: &SymbolicTensor,
    stride: usize,
    padding: usize,
    bias: Option<&BiasTable>,
    luts: &LutSet,
    order: FoldOrder,
    trace: &mut LayerTrace,
) -> Result<SymbolicTensor> {
    let [c, h, w] = chw(input.per_image(), "diet_conv2d")?;
    let out_shape = SymbolicLayer::Conv2d {
        weight: weight.clone(),
        stride,
        padding,
        bias: None,
    }
    .output_shape(&[c, h, w])?;
    let [oc, oh, ow] = [out_shape[0], out_shape[1], out_shape[2]];
    let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
    if stride == 0 {
        return Err(Error::InvalidLayer("conv stride must be >= 1".into()));
    }

    // zero-padded copy of the input
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut padded = vec![luts.zero(); c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            let src = &input.symbols()[(ci * h + y) * w..(ci * h + y + 1) * w];
            let dst_start = (ci * ph + y + padding) * pw + padding;
            padded[dst_start..dst_start + w].copy_from_slice(src);
        }
    }

    let k = luts.n_clusters();
    let nf = luts.n_cfilters();
    let mul = luts.mul_conv_table();
    let add = luts.add_table();
    let wsyms = weight.symbols();
    let bag_len = c * kh * kw;
    let mut bag = Vec::with_capacity(bag_len);
    let mut out = Vec::with_capacity(oc * oh * ow);

    for o in 0..oc {
        let filt = &wsyms[o * bag_len..(o + 1) * bag_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = luts.zero();
                if order == FoldOrder::ChannelMajorRaster {
                    let mut fi = 0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let row = (ci * ph + oy * stride + ky) * pw + ox * stride;
                            for kx in 0..kw {
                                let s = padded[row + kx];
                                let p = mul[s.id() * nf + filt[fi].id()];
                                acc = add[acc.id() * k + p.id()];
                                fi += 1;
                            }
                        }
                    }
                } else {
                    bag.clear();
                    let mut fi = 0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let row = (ci * ph + oy * stride + ky) * pw + ox * stride;
                            for kx in 0..kw {
                                bag.push(mul[padded[row + kx].id() * nf + filt[fi].id()]);
                                fi += 1;
                            }
                        }
                    }
                    let element = ((o * oh + oy) * ow + ox) as u64;
                    order.arrange(&mut bag, luts.pool_rank(), element);
                    acc = fold_in_order(&bag, luts);
                }
                if let Some(b) = bias {
                    acc = luts.bias(b, o, acc);
                }
                out.push(acc);
            }
        }
    }

    let outputs = (oc * oh * ow) as u64;
    trace.mul_lookups += outputs * bag_len as u64;
    trace.add_lookups += outputs * bag_len as u64;
    if bias.is_some() {
        trace.bias_lookups += outputs;
    }
    Ok(SymbolicTensor::from_parts(out_shape, out))
}

/// Discrete fully connected layer; any input shape is read as a flat vector.
pub fn diet_linear(
    input: &SymbolicTensor,
    layer: &SymbolicLayer,
    luts: &LutSet,
    order: FoldOrder,
) -> Result<SymbolicTensor> {
    let SymbolicLayer::Linear { weight, bias } = layer else {
        return Err(Error::InvalidLayer(format!(
            "expected a Linear layer, got {}",
            layer.kind()
        )));
    };
    let bias = bias.map(|b| &luts.bias_tables()[b]);
    linear_traced(input, weight, bias, luts, order, &mut LayerTrace::default())
}

fn linear_traced(
    input: &SymbolicTensor,
    weight: &SymbolicTensor,
    bias: Option<&BiasTable>,
    luts: &LutSet,
    order: FoldOrder,
    trace: &mut LayerTrace,
) -> Result<SymbolicTensor> {
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != in_f {
        return Err(Error::Shape {
            op: "diet_linear",
            axis: "features",
            expected: in_f,
            actual: input.len(),
        });
    }
    let k = luts.n_clusters();
    let nf = luts.n_ffilters();
    let mul = luts.mul_fc_table();
    let add = luts.add_table();
    let x = input.symbols();
    let mut bag = Vec::with_capacity(in_f);
    let mut out = Vec::with_capacity(out_f);
    for o in 0..out_f {
        let row = &weight.symbols()[o * in_f..(o + 1) * in_f];
        let mut acc = luts.zero();
        if order == FoldOrder::ChannelMajorRaster {
            for (s, f) in x.iter().zip(row) {
                let p = mul[s.id() * nf + f.id()];
                acc = add[acc.id() * k + p.id()];
            }
        } else {
            bag.clear();
            bag.extend(x.iter().zip(row).map(|(s, f)| mul[s.id() * nf + f.id()]));
            order.arrange(&mut bag, luts.pool_rank(), o as u64);
            acc = fold_in_order(&bag, luts);
        }
        if let Some(b) = bias {
            acc = luts.bias(b, o, acc);
        }
        out.push(acc);
    }
    trace.mul_lookups += (out_f * in_f) as u64;
    trace.add_lookups += (out_f * in_f) as u64;
    if bias.is_some() {
        trace.bias_lookups += out_f as u64;
    }
    Ok(SymbolicTensor::from_parts(vec![out_f], out))
}

/// One table lookup per element.
pub fn diet_activation(input: &SymbolicTensor, kind: ActKind, luts: &LutSet) -> SymbolicTensor {
    let table = luts.act_table(kind);
    SymbolicTensor {
        shape: input.shape.clone(),
        symbols: input.symbols.iter().map(|s| table[s.id()]).collect(),
    }
}

/// Window maximum by centroid rank.
pub fn diet_maxpool(
    input: &SymbolicTensor,
    pool: &MaxPool2d,
    luts: &LutSet,
) -> Result<SymbolicTensor> {
    maxpool_traced(input, pool, luts, &mut LayerTrace::default())
}

fn maxpool_traced(
    input: &SymbolicTensor,
    pool: &MaxPool2d,
    luts: &LutSet,
    trace: &mut LayerTrace,
) -> Result<SymbolicTensor> {
    let [c, h, w] = chw(input.per_image(), "diet_maxpool")?;
    let [_, oh, ow] = pool.output_shape([c, h, w])?;
    let rank = luts.pool_rank();
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in input.symbols.chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = plane[oy * pool.stride * w + ox * pool.stride];
                for ky in 0..pool.window {
                    let row = (oy * pool.stride + ky) * w + ox * pool.stride;
                    for &s in &plane[row..row + pool.window] {
                        if rank[s.id()] > rank[best.id()] {
                            best = s;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    trace.pool_lookups += (c * oh * ow * pool.window * pool.window) as u64;
    Ok(SymbolicTensor::from_parts(vec![c, oh, ow], out))
}

fn run_layer(
    model: &SymbolicModel,
    layer: &SymbolicLayer,
    x: &SymbolicTensor,
    order: FoldOrder,
    trace: &mut LayerTrace,
) -> Result<SymbolicTensor> {
    let luts = model.luts();
    match layer {
        SymbolicLayer::Conv2d {
            weight,
            stride,
            padding,
            bias,
        } => {
            let bias = bias.map(|b| &luts.bias_tables()[b]);
            conv_traced(x, weight, *stride, *padding, bias, luts, order, trace)
        }
        SymbolicLayer::Linear { weight, bias } => {
            let bias = bias.map(|b| &luts.bias_tables()[b]);
            linear_traced(x, weight, bias, luts, order, trace)
        }
        SymbolicLayer::Activation(kind) => {
            trace.act_lookups += x.len() as u64;
            Ok(diet_activation(x, *kind, luts))
        }
        SymbolicLayer::MaxPool2d(p) => maxpool_traced(x, p, luts, trace),
        SymbolicLayer::Flatten => Ok(SymbolicTensor::from_parts(vec![x.len()], x.symbols.clone())),
    }
}

fn image_shape(model: &SymbolicModel, image: &Tensor) -> Result<()> {
    let expected = model.input_shape();
    let shape = match image.shape() {
        [1, rest @ ..] if rest.len() == 3 => rest,
        s => s,
    };
    if shape != expected {
        return Err(Error::Shape {
            op: "diet_forward",
            axis: "input",
            expected: expected.iter().product(),
            actual: image.len(),
        });
    }
    Ok(())
}

/// Output of a diet forward pass.
#[derive(Debug, Clone)]
pub struct DietOutput {
    /// Decoded final-layer values, shape (1, classes).
    pub logits: Tensor,
    pub trace: Trace,
    /// Symbolic output of every layer, when requested.
    pub activations: Vec<SymbolicTensor>,
}

impl DietOutput {
    pub fn prediction(&self) -> usize {
        argmax(self.logits.data())
    }
}

/// Encodes one image, runs every layer symbolically and decodes the final
/// symbols into logits.
pub fn diet_forward(
    model: &SymbolicModel,
    image: &Tensor,
    order: FoldOrder,
) -> Result<(Tensor, Trace)> {
    let out = diet_forward_full(model, image, order, false)?;
    Ok((out.logits, out.trace))
}

pub fn diet_forward_full(
    model: &SymbolicModel,
    image: &Tensor,
    order: FoldOrder,
    keep_activations: bool,
) -> Result<DietOutput> {
    image_shape(model, image)?;
    let mut x = model.act_codebook().encode_tensor(image);
    x.shape = model.input_shape().to_vec();
    let mut trace = Trace::default();
    let mut activations = Vec::new();
    for (index, layer) in model.layers().iter().enumerate() {
        let mut lt = LayerTrace {
            index,
            kind: Some(layer.kind()),
            ..Default::default()
        };
        x = run_layer(model, layer, &x, order, &mut lt)?;
        lt.output_shape = x.shape.clone();
        trace.layers.push(lt);
        if keep_activations {
            activations.push(x.clone());
        }
    }
    let logits = model.act_codebook().decode_tensor(&x)?;
    let classes = model.class_count();
    Ok(DietOutput {
        logits: logits.reshape(vec![1, classes])?,
        trace,
        activations,
    })
}
