//! Precomputed lookup tables and the symbolic (diet) form of a model.
//!
//! Every table entry is defined as "decode the operands, do the float op,
//! encode into the activation codebook", so a lookup always equals the
//! recomputation it replaces. Products and partial sums share the activation
//! alphabet.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, CodebookKind, Symbol};
use crate::engine::SymbolicTensor;
use crate::error::{Error, Result};
use crate::model::{DietLayout, LayerDef, LayerGeometry, LayerKind, ModelSpec};
use crate::tensor::{conv_extent, Conv2d, Linear, MaxPool2d, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActKind {
    Relu,
    Sigmoid,
}

impl ActKind {
    pub const ALL: [ActKind; 2] = [ActKind::Relu, ActKind::Sigmoid];

    pub fn apply(self, v: f64) -> f64 {
        match self {
            ActKind::Relu => v.max(0.0),
            ActKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu => "relu",
            ActKind::Sigmoid => "sigmoid",
        }
    }
}

/// Bias table of one parameterized layer: `table[ch * K + s]` is the symbol of
/// `decode(s) + bias[ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTable {
    /// Ordinal of the layer among the model's conv/linear layers.
    pub param_layer: usize,
    pub channels: usize,
    pub table: Vec<Symbol>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutSet {
    pub(crate) n_clusters: usize,
    pub(crate) n_cfilters: usize,
    pub(crate) n_ffilters: usize,
    pub(crate) mul_conv: Vec<Symbol>,
    pub(crate) mul_fc: Vec<Symbol>,
    pub(crate) add: Vec<Symbol>,
    pub(crate) relu: Vec<Symbol>,
    pub(crate) sigmoid: Vec<Symbol>,
    pub(crate) bias: Vec<BiasTable>,
    pub(crate) pool_rank: Vec<u16>,
    pub(crate) zero: Symbol,
}

impl LutSet {
    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_cfilters(&self) -> usize {
        self.n_cfilters
    }

    pub fn n_ffilters(&self) -> usize {
        self.n_ffilters
    }

    /// Activation symbol whose centroid is exactly zero.
    pub fn zero(&self) -> Symbol {
        self.zero
    }

    #[inline]
    pub fn mul_conv(&self, s: Symbol, f: Symbol) -> Symbol {
        self.mul_conv[s.id() * self.n_cfilters + f.id()]
    }

    #[inline]
    pub fn mul_fc(&self, s: Symbol, f: Symbol) -> Symbol {
        self.mul_fc[s.id() * self.n_ffilters + f.id()]
    }

    #[inline]
    pub fn add(&self, a: Symbol, b: Symbol) -> Symbol {
        self.add[a.id() * self.n_clusters + b.id()]
    }

    #[inline]
    pub fn act(&self, kind: ActKind, s: Symbol) -> Symbol {
        match kind {
            ActKind::Relu => self.relu[s.id()],
            ActKind::Sigmoid => self.sigmoid[s.id()],
        }
    }

    pub fn act_table(&self, kind: ActKind) -> &[Symbol] {
        match kind {
            ActKind::Relu => &self.relu,
            ActKind::Sigmoid => &self.sigmoid,
        }
    }

    pub fn mul_conv_table(&self) -> &[Symbol] {
        &self.mul_conv
    }

    pub fn mul_fc_table(&self) -> &[Symbol] {
        &self.mul_fc
    }

    pub fn add_table(&self) -> &[Symbol] {
        &self.add
    }

    pub fn bias_tables(&self) -> &[BiasTable] {
        &self.bias
    }

    pub fn bias_table(&self, param_layer: usize) -> Option<&BiasTable> {
        self.bias.iter().find(|b| b.param_layer == param_layer)
    }

    #[inline]
    pub fn bias(&self, table: &BiasTable, channel: usize, s: Symbol) -> Symbol {
        table.table[channel * self.n_clusters + s.id()]
    }

    /// Rank of each symbol's centroid in ascending value order.
    pub fn pool_rank(&self) -> &[u16] {
        &self.pool_rank
    }

    pub(crate) fn bias_index(&self, param_layer: usize) -> Option<usize> {
        self.bias.iter().position(|b| b.param_layer == param_layer)
    }

    /// Checks table dimensions and that every stored id is a valid
    /// activation symbol; the error names the offending table.
    pub fn validate(&self) -> Result<()> {
        let k = self.n_clusters;
        let check = |name: &str, table: &[Symbol], len: usize| -> Result<()> {
            if table.len() != len {
                return Err(Error::Invariant(format!(
                    "table `{name}` has {} entries, expected {len}",
                    table.len()
                )));
            }
            if let Some(bad) = table.iter().find(|s| s.id() >= k) {
                return Err(Error::SymbolOutOfRange {
                    table: name.to_string(),
                    id: bad.0 as u32,
                    limit: k as u32,
                });
            }
            Ok(())
        };
        check("mul_conv", &self.mul_conv, k * self.n_cfilters)?;
        check("mul_fc", &self.mul_fc, k * self.n_ffilters)?;
        check("add", &self.add, k * k)?;
        check("act_relu", &self.relu, k)?;
        check("act_sigmoid", &self.sigmoid, k)?;
        for b in &self.bias {
            check(
                &format!("bias[{}]", b.param_layer),
                &b.table,
                b.channels * k,
            )?;
        }
        if self.pool_rank.len() != k {
            return Err(Error::Invariant(format!(
                "table `pool_rank` has {} entries, expected {k}",
                self.pool_rank.len()
            )));
        }
        let mut seen = vec![false; k];
        for &r in &self.pool_rank {
            if r as usize >= k || std::mem::replace(&mut seen[r as usize], true) {
                return Err(Error::Invariant(
                    "table `pool_rank` is not a permutation".into(),
                ));
            }
        }
        if self.zero.id() >= k {
            return Err(Error::SymbolOutOfRange {
                table: "zero".into(),
                id: self.zero.0 as u32,
                limit: k as u32,
            });
        }
        Ok(())
    }
}

fn binary_table(
    rows: &Codebook,
    cols: &Codebook,
    out: &Codebook,
    op: fn(f64, f64) -> f64,
) -> Vec<Symbol> {
    let n = cols.len();
    let mut table = vec![Symbol(0); rows.len() * n];
    table.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        let a = rows.value(Symbol(r as u16));
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = out.encode(op(a, cols.value(Symbol(c as u16))));
        }
    });
    table
}

fn bias_table(act: &Codebook, bias: &Tensor, param_layer: usize) -> BiasTable {
    let k = act.len();
    let mut table = vec![Symbol(0); bias.len() * k];
    table.par_chunks_mut(k).enumerate().for_each(|(ch, row)| {
        let b = bias.data()[ch] as f64;
        for (s, slot) in row.iter_mut().enumerate() {
            *slot = act.encode(act.value(Symbol(s as u16)) + b);
        }
    });
    BiasTable {
        param_layer,
        channels: bias.len(),
        table,
    }
}

fn bias_tables(act: &Codebook, model: &ModelSpec) -> Vec<BiasTable> {
    let biases = model.layers().iter().filter_map(|layer| match layer {
        LayerDef::Conv2d(c) => Some(c.bias.as_ref()),
        LayerDef::Linear(l) => Some(l.bias.as_ref()),
        _ => None,
    });
    biases
        .enumerate()
        .filter_map(|(ordinal, b)| b.map(|b| bias_table(act, b, ordinal)))
        .collect()
}

/// Fills every table from the codebooks and the model's biases.
///
/// The activation codebook must contain an exact zero centroid (used for
/// padding and as the accumulator's starting value).
pub fn build_luts(
    act_cb: &Codebook,
    cfilt_cb: &Codebook,
    ffilt_cb: &Codebook,
    model: &ModelSpec,
) -> Result<LutSet> {
    let zero = act_cb
        .zero_symbol()
        .ok_or_else(|| Error::InvalidArgument("activation codebook has no zero centroid".into()))?;
    let k = act_cb.len();
    let act_table = |kind: ActKind| -> Vec<Symbol> {
        act_cb
            .centroids()
            .iter()
            .map(|&c| act_cb.encode(kind.apply(c)))
            .collect()
    };

    Ok(LutSet {
        n_clusters: k,
        n_cfilters: cfilt_cb.len(),
        n_ffilters: ffilt_cb.len(),
        mul_conv: binary_table(act_cb, cfilt_cb, act_cb, |a, b| a * b),
        mul_fc: binary_table(act_cb, ffilt_cb, act_cb, |a, b| a * b),
        add: binary_table(act_cb, act_cb, act_cb, |a, b| a + b),
        relu: act_table(ActKind::Relu),
        sigmoid: act_table(ActKind::Sigmoid),
        bias: bias_tables(act_cb, model),
        // centroids are sorted, so each symbol's rank is its id
        pool_rank: (0..k as u16).collect(),
        zero,
    })
}

/// Replaces the bias tables of `luts` with ones built from `model`, keeping
/// every table that only depends on the codebooks.
pub fn rebuild_with(
    luts: &LutSet,
    act_cb: &Codebook,
    cfilt_cb: &Codebook,
    ffilt_cb: &Codebook,
    model: &ModelSpec,
) -> Result<LutSet> {
    if luts.n_clusters != act_cb.len() {
        return Err(Error::InvalidArgument(
            "activation codebook differs from the one the tables were built with".into(),
        ));
    }
    Ok(LutSet {
        n_clusters: luts.n_clusters,
        n_cfilters: cfilt_cb.len(),
        n_ffilters: ffilt_cb.len(),
        mul_conv: binary_table(act_cb, cfilt_cb, act_cb, |a, b| a * b),
        mul_fc: binary_table(act_cb, ffilt_cb, act_cb, |a, b| a * b),
        add: luts.add.clone(),
        relu: luts.relu.clone(),
        sigmoid: luts.sigmoid.clone(),
        bias: bias_tables(act_cb, model),
        pool_rank: luts.pool_rank.clone(),
        zero: luts.zero,
    })
}

/// One layer of the symbolic network.
#[derive(Debug, Clone, PartialEq)]
pub enum SymbolicLayer {
    Conv2d {
        /// (OutC, InC, Kh, Kw) over the conv-filter codebook.
        weight: SymbolicTensor,
        stride: usize,
        padding: usize,
        /// Index into [`LutSet::bias_tables`].
        bias: Option<usize>,
    },
    Linear {
        /// (Out, In) over the fc-filter codebook.
        weight: SymbolicTensor,
        bias: Option<usize>,
    },
    Activation(ActKind),
    MaxPool2d(MaxPool2d),
    Flatten,
}

impl SymbolicLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            SymbolicLayer::Conv2d { .. } => LayerKind::Conv2d,
            SymbolicLayer::Linear { .. } => LayerKind::Linear,
            SymbolicLayer::Activation(ActKind::Relu) => LayerKind::Relu,
            SymbolicLayer::Activation(ActKind::Sigmoid) => LayerKind::Sigmoid,
            SymbolicLayer::MaxPool2d(_) => LayerKind::MaxPool2d,
            SymbolicLayer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            SymbolicLayer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let &[c, h, w] = input else {
                    return Err(Error::Shape {
                        op: "diet_conv2d",
                        axis: "rank",
                        expected: 3,
                        actual: input.len(),
                    });
                };
                let ws = weight.shape();
                if ws[1] != c {
                    return Err(Error::Shape {
                        op: "diet_conv2d",
                        axis: "channels",
                        expected: ws[1],
                        actual: c,
                    });
                }
                Ok(vec![
                    ws[0],
                    conv_extent(h, ws[2], *stride, *padding, "height")?,
                    conv_extent(w, ws[3], *stride, *padding, "width")?,
                ])
            }
            SymbolicLayer::Linear { weight, .. } => {
                let features: usize = input.iter().product();
                if features != weight.shape()[1] {
                    return Err(Error::Shape {
                        op: "diet_linear",
                        axis: "features",
                        expected: weight.shape()[1],
                        actual: features,
                    });
                }
                Ok(vec![weight.shape()[0]])
            }
            SymbolicLayer::MaxPool2d(p) => {
                let &[c, h, w] = input else {
                    return Err(Error::Shape {
                        op: "diet_maxpool",
                        axis: "rank",
                        expected: 3,
                        actual: input.len(),
                    });
                };
                Ok(p.output_shape([c, h, w])?.to_vec())
            }
            SymbolicLayer::Flatten => Ok(vec![input.iter().product()]),
            SymbolicLayer::Activation(_) => Ok(input.to_vec()),
        }
    }
}

/// A model whose weights are symbols, plus everything needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicModel {
    pub(crate) layers: Vec<SymbolicLayer>,
    pub(crate) input_shape: [usize; 3],
    pub(crate) class_count: usize,
    pub(crate) act_cb: Codebook,
    pub(crate) cfilt_cb: Codebook,
    pub(crate) ffilt_cb: Codebook,
    pub(crate) luts: LutSet,
    pub(crate) diet_variant: bool,
}

impl SymbolicModel {
    pub fn layers(&self) -> &[SymbolicLayer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn act_codebook(&self) -> &Codebook {
        &self.act_cb
    }

    pub fn conv_codebook(&self) -> &Codebook {
        &self.cfilt_cb
    }

    pub fn fc_codebook(&self) -> &Codebook {
        &self.ffilt_cb
    }

    pub fn luts(&self) -> &LutSet {
        &self.luts
    }

    /// True when a layout override changed the geometry of the float model.
    pub fn is_diet_variant(&self) -> bool {
        self.diet_variant
    }

    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let mut input = self.input_shape.to_vec();
        let mut rows = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let output = layer.output_shape(&input)?;
            let (kernel, stride, padding, has_bias) = match layer {
                SymbolicLayer::Conv2d {
                    weight,
                    stride,
                    padding,
                    bias,
                } => (
                    Some((weight.shape()[2], weight.shape()[3])),
                    *stride,
                    *padding,
                    bias.is_some(),
                ),
                SymbolicLayer::Linear { bias, .. } => (None, 1, 0, bias.is_some()),
                SymbolicLayer::MaxPool2d(p) => (Some((p.window, p.window)), p.stride, 0, false),
                _ => (None, 1, 0, false),
            };
            rows.push(LayerGeometry {
                index,
                kind: layer.kind(),
                input: input.clone(),
                output: output.clone(),
                kernel,
                stride,
                padding,
                has_bias,
            });
            input = output;
        }
        Ok(rows)
    }

    /// Float model whose weights are the decoded symbolic weights and whose
    /// biases are the original float biases. Geometry follows this model.
    pub fn decoded_model(&self, source: &ModelSpec) -> Result<ModelSpec> {
        let mut biases = source.layers().iter().filter_map(|l| match l {
            LayerDef::Conv2d(c) => Some(c.bias.clone()),
            LayerDef::Linear(l) => Some(l.bias.clone()),
            _ => None,
        });
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push(match layer {
                SymbolicLayer::Conv2d {
                    weight,
                    stride,
                    padding,
                    ..
                } => LayerDef::Conv2d(Conv2d {
                    weight: self.cfilt_cb.decode_tensor(weight)?,
                    bias: biases.next().flatten(),
                    stride: *stride,
                    padding: *padding,
                }),
                SymbolicLayer::Linear { weight, .. } => LayerDef::Linear(Linear {
                    weight: self.ffilt_cb.decode_tensor(weight)?,
                    bias: biases.next().flatten(),
                }),
                SymbolicLayer::Activation(ActKind::Relu) => LayerDef::Relu,
                SymbolicLayer::Activation(ActKind::Sigmoid) => LayerDef::Sigmoid,
                SymbolicLayer::MaxPool2d(p) => LayerDef::MaxPool2d(*p),
                SymbolicLayer::Flatten => LayerDef::Flatten,
            });
        }
        ModelSpec::new(layers, self.input_shape, self.class_count)
    }

    /// Assembles a model from parts, checking that the layers chain and that
    /// every referenced table exists.
    pub fn from_parts(
        layers: Vec<SymbolicLayer>,
        input_shape: [usize; 3],
        class_count: usize,
        codebooks: [Codebook; 3],
        luts: LutSet,
        diet_variant: bool,
    ) -> Result<Self> {
        let [act_cb, cfilt_cb, ffilt_cb] = codebooks;
        let model = Self {
            layers,
            input_shape,
            class_count,
            act_cb,
            cfilt_cb,
            ffilt_cb,
            luts,
            diet_variant,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let luts = &self.luts;
        if self.act_cb.kind() != CodebookKind::Activation
            || self.cfilt_cb.kind() != CodebookKind::ConvFilter
            || self.ffilt_cb.kind() != CodebookKind::FcFilter
        {
            return Err(Error::Invariant("codebook kinds out of order".into()));
        }
        if luts.n_clusters != self.act_cb.len()
            || luts.n_cfilters != self.cfilt_cb.len()
            || luts.n_ffilters != self.ffilt_cb.len()
        {
            return Err(Error::Invariant(format!(
                "table dimensions {}/{}/{} do not match codebooks {}/{}/{}",
                luts.n_clusters,
                luts.n_cfilters,
                luts.n_ffilters,
                self.act_cb.len(),
                self.cfilt_cb.len(),
                self.ffilt_cb.len()
            )));
        }
        luts.validate()?;
        if self.act_cb.zero_symbol() != Some(luts.zero) {
            return Err(Error::Invariant(
                "zero symbol does not decode to 0.0".into(),
            ));
        }
        let mut shape = self.input_shape.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape)?;
            let (weight, limit, bias, channels) = match layer {
                SymbolicLayer::Conv2d { weight, bias, .. } => {
                    (weight, self.cfilt_cb.len(), bias, weight.shape()[0])
                }
                SymbolicLayer::Linear { weight, bias } => {
                    (weight, self.ffilt_cb.len(), bias, weight.shape()[0])
                }
                _ => continue,
            };
            if let Some(bad) = weight.symbols().iter().find(|s| s.id() >= limit) {
                return Err(Error::SymbolOutOfRange {
                    table: format!("weights of layer {i}"),
                    id: bad.0 as u32,
                    limit: limit as u32,
                });
            }
            if let Some(b) = bias {
                let table = luts.bias.get(*b).ok_or_else(|| {
                    Error::Invariant(format!("layer {i} references missing bias table {b}"))
                })?;
                if table.channels != channels {
                    return Err(Error::Invariant(format!(
                        "bias table {b} has {} channels, layer {i} has {channels}",
                        table.channels
                    )));
                }
            }
        }
        let out: usize = shape.iter().product();
        if out != self.class_count {
            return Err(Error::Shape {
                op: "SymbolicModel",
                axis: "classes",
                expected: self.class_count,
                actual: out,
            });
        }
        Ok(())
    }
}

/// Converts a float model into its symbolic form: every conv weight becomes
/// a conv-filter symbol, every FC weight an fc-filter symbol, biases are
/// referenced through their bias tables. `layout` may change strides and
/// padding or drop parameter-free layers.
pub fn transform_model(
    model: &ModelSpec,
    act_cb: &Codebook,
    cfilt_cb: &Codebook,
    ffilt_cb: &Codebook,
    luts: &LutSet,
    layout: Option<&DietLayout>,
) -> Result<SymbolicModel> {
    let (source, diet_variant) = match layout {
        Some(l) if !l.is_empty() => (model.with_layout(l)?, true),
        _ => (model.clone(), false),
    };
    let mut layers = Vec::with_capacity(source.layers().len());
    let mut ordinal = 0;
    for layer in source.layers() {
        let sym = match layer {
            LayerDef::Conv2d(c) => {
                let bias = match &c.bias {
                    Some(_) => Some(luts.bias_index(ordinal).ok_or_else(|| {
                        Error::InvalidArgument(format!("no bias table for conv layer {ordinal}"))
                    })?),
                    None => None,
                };
                ordinal += 1;
                SymbolicLayer::Conv2d {
                    weight: cfilt_cb.encode_tensor(&c.weight),
                    stride: c.stride,
                    padding: c.padding,
                    bias,
                }
            }
            LayerDef::Linear(l) => {
                let bias = match &l.bias {
                    Some(_) => Some(luts.bias_index(ordinal).ok_or_else(|| {
                        Error::InvalidArgument(format!("no bias table for linear layer {ordinal}"))
                    })?),
                    None => None,
                };
                ordinal += 1;
                SymbolicLayer::Linear {
                    weight: ffilt_cb.encode_tensor(&l.weight),
                    bias,
                }
            }
            LayerDef::Relu => SymbolicLayer::Activation(ActKind::Relu),
            LayerDef::Sigmoid => SymbolicLayer::Activation(ActKind::Sigmoid),
            LayerDef::MaxPool2d(p) => SymbolicLayer::MaxPool2d(*p),
            LayerDef::Flatten => SymbolicLayer::Flatten,
        };
        layers.push(sym);
    }
    SymbolicModel::from_parts(
        layers,
        source.input_shape(),
        source.class_count(),
        [act_cb.clone(), cfilt_cb.clone(), ffilt_cb.clone()],
        luts.clone(),
        diet_variant,
    )
}
