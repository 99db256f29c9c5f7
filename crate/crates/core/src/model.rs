//! Layer graphs: the ordered float network that both the reference and the
//! symbolic pipelines are built from.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Conv2d, Linear, MaxPool2d, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerDef {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    Sigmoid,
    MaxPool2d(MaxPool2d),
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d,
    Linear,
    Relu,
    Sigmoid,
    MaxPool2d,
    Flatten,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv2d => "Conv2D",
            LayerKind::Linear => "Linear",
            LayerKind::Relu => "ReLU",
            LayerKind::Sigmoid => "Sigmoid",
            LayerKind::MaxPool2d => "MaxPool2D",
            LayerKind::Flatten => "Flatten",
        };
        f.write_str(s)
    }
}

impl LayerDef {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerDef::Conv2d(_) => LayerKind::Conv2d,
            LayerDef::Linear(_) => LayerKind::Linear,
            LayerDef::Relu => LayerKind::Relu,
            LayerDef::Sigmoid => LayerKind::Sigmoid,
            LayerDef::MaxPool2d(_) => LayerKind::MaxPool2d,
            LayerDef::Flatten => LayerKind::Flatten,
        }
    }

    /// Shape this layer produces for a per-image input shape, (C, H, W) or (F).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerDef::Conv2d(conv) => Ok(conv.output_shape(spatial(input, "conv2d")?)?.to_vec()),
            LayerDef::MaxPool2d(pool) => {
                Ok(pool.output_shape(spatial(input, "maxpool2d")?)?.to_vec())
            }
            LayerDef::Linear(lin) => {
                lin.validate()?;
                let features: usize = input.iter().product();
                if features != lin.in_features() {
                    return Err(Error::Shape {
                        op: "linear",
                        axis: "features",
                        expected: lin.in_features(),
                        actual: features,
                    });
                }
                Ok(vec![lin.out_features()])
            }
            LayerDef::Flatten => Ok(vec![input.iter().product()]),
            LayerDef::Relu | LayerDef::Sigmoid => Ok(input.to_vec()),
        }
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            LayerDef::Conv2d(conv) => tensor::conv2d(input, conv),
            LayerDef::Linear(lin) => tensor::linear(input, lin),
            LayerDef::Relu => Ok(tensor::relu(input)),
            LayerDef::Sigmoid => Ok(tensor::sigmoid(input)),
            LayerDef::MaxPool2d(pool) => tensor::maxpool2d(input, pool),
            LayerDef::Flatten => Ok(tensor::flatten(input)),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerDef::Conv2d(c) => c.weight.len() + c.bias.as_ref().map_or(0, Tensor::len),
            LayerDef::Linear(l) => l.weight.len() + l.bias.as_ref().map_or(0, Tensor::len),
            _ => 0,
        }
    }
}

fn spatial(input: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(Error::Shape {
            op,
            axis: "rank",
            expected: 3,
            actual: other.len(),
        }),
    }
}

/// Static description of one layer, enough to count its operations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerGeometry {
    pub index: usize,
    pub kind: LayerKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    /// (Kh, Kw) for conv, (window, window) for pooling.
    pub kernel: Option<(usize, usize)>,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

/// Ordered layer graph with float parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    layers: Vec<LayerDef>,
    input_shape: [usize; 3],
    class_count: usize,
}

impl ModelSpec {
    /// Builds a model, checking that every layer's output feeds the next one
    /// and that the last layer emits `class_count` values.
    pub fn new(layers: Vec<LayerDef>, input_shape: [usize; 3], class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidArgument(
                "class_count must be positive".into(),
            ));
        }
        let model = Self {
            layers,
            input_shape,
            class_count,
        };
        let shapes = model.layer_shapes()?;
        let last: usize = shapes
            .last()
            .map_or_else(|| input_shape.iter().product(), |s| s.iter().product());
        if last != class_count {
            return Err(Error::Shape {
                op: "ModelSpec::new",
                axis: "classes",
                expected: class_count,
                actual: last,
            });
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerDef] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerDef::param_count).sum()
    }

    /// Per-image output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let mut input = self.input_shape.to_vec();
        let mut rows = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let output = layer.output_shape(&input)?;
            let (kernel, stride, padding, has_bias) = match layer {
                LayerDef::Conv2d(c) => (Some(c.kernel()), c.stride, c.padding, c.bias.is_some()),
                LayerDef::MaxPool2d(p) => (Some((p.window, p.window)), p.stride, 0, false),
                LayerDef::Linear(l) => (None, 1, 0, l.bias.is_some()),
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

    /// Runs the float network. Accepts (C, H, W) or (N, C, H, W) input and
    /// returns (N, class_count) logits.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.batched(input)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(&x)?;
            if !x.is_finite() {
                return Err(Error::Invariant(format!(
                    "non-finite activation after layer {i} ({})",
                    layer.kind()
                )));
            }
        }
        let n = x.shape()[0];
        x.reshape(vec![n, self.class_count])
    }

    pub(crate) fn batched(&self, input: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.input_shape;
        let shape = input.shape();
        let batched = match shape.len() {
            3 => input
                .clone()
                .reshape(vec![1, shape[0], shape[1], shape[2]])?,
            4 => input.clone(),
            r => {
                return Err(Error::Shape {
                    op: "forward",
                    axis: "rank",
                    expected: 4,
                    actual: r,
                })
            }
        };
        let s = batched.shape();
        for (axis, expected, actual) in [
            ("channels", c, s[1]),
            ("height", h, s[2]),
            ("width", w, s[3]),
        ] {
            if expected != actual {
                return Err(Error::Shape {
                    op: "forward",
                    axis,
                    expected,
                    actual,
                });
            }
        }
        Ok(batched)
    }

    /// Copy of this model with per-layer stride/padding overrides applied and
    /// dropped layers removed.
    pub fn with_layout(&self, layout: &DietLayout) -> Result<ModelSpec> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let Some(ov) = layout.overrides.iter().find(|o| o.layer == i) else {
                layers.push(layer.clone());
                continue;
            };
            if ov.drop {
                if matches!(layer, LayerDef::Conv2d(_) | LayerDef::Linear(_)) {
                    return Err(Error::InvalidArgument(format!(
                        "layout cannot drop parameterized layer {i} ({})",
                        layer.kind()
                    )));
                }
                continue;
            }
            let mut layer = layer.clone();
            match &mut layer {
                LayerDef::Conv2d(c) => {
                    c.stride = ov.stride.unwrap_or(c.stride);
                    c.padding = ov.padding.unwrap_or(c.padding);
                }
                LayerDef::MaxPool2d(p) if ov.padding.is_none() => {
                    p.stride = ov.stride.unwrap_or(p.stride);
                }
                other if ov.stride.is_some() || ov.padding.is_some() => {
                    return Err(Error::InvalidArgument(format!(
                        "layout override on layer {i} ({}) has no stride/padding to change",
                        other.kind()
                    )));
                }
                _ => {}
            }
            layers.push(layer);
        }
        ModelSpec::new(layers, self.input_shape, self.class_count)
    }
}

/// Per-layer geometry overrides used to derive a diet variant of a model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DietLayout {
    pub overrides: Vec<LayerOverride>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOverride {
    /// Index into the original model's layer list.
    pub layer: usize,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub padding: Option<usize>,
    #[serde(default)]
    pub drop: bool,
}

impl DietLayout {
    pub fn is_empty(&self) -> bool {
        self.overrides.is_empty()
    }
}

/// How fresh parameters are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    FanInUniform {
        seed: u64,
    },
}

struct ParamInit {
    init: Init,
    rng: ChaCha8Rng,
}

impl ParamInit {
    fn new(init: Init) -> Self {
        let seed = match init {
            Init::Zeros => 0,
            Init::FanInUniform { seed } => seed,
        };
        Self {
            init,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn tensor(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(shape),
            Init::FanInUniform { .. } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound))
            }
        }
    }

    fn conv(
        &mut self,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> LayerDef {
        let fan_in = in_c * k * k;
        LayerDef::Conv2d(Conv2d {
            weight: self.tensor(&[out_c, in_c, k, k], fan_in),
            bias: Some(self.tensor(&[out_c], fan_in)),
            stride,
            padding,
        })
    }

    fn linear(&mut self, out_f: usize, in_f: usize) -> LayerDef {
        LayerDef::Linear(Linear {
            weight: self.tensor(&[out_f, in_f], in_f),
            bias: Some(self.tensor(&[out_f], in_f)),
        })
    }
}

/// Non-linearity used between LeNet-5 layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn layer(self) -> LayerDef {
        match self {
            Activation::Relu => LayerDef::Relu,
            Activation::Sigmoid => LayerDef::Sigmoid,
        }
    }
}

/// Classic LeNet-5 on 1x32x32 input: two 5x5 conv stages with 2x2 pooling
/// followed by 400-120-84-10 fully connected layers.
pub fn lenet5(init: Init, act: Activation) -> ModelSpec {
    let mut p = ParamInit::new(init);
    let pool = LayerDef::MaxPool2d(MaxPool2d {
        window: 2,
        stride: 2,
    });
    let layers = vec![
        p.conv(6, 1, 5, 1, 0),
        act.layer(),
        pool.clone(),
        p.conv(16, 6, 5, 1, 0),
        act.layer(),
        pool,
        LayerDef::Flatten,
        p.linear(120, 400),
        act.layer(),
        p.linear(84, 120),
        act.layer(),
        p.linear(10, 84),
    ];
    ModelSpec::new(layers, [1, 32, 32], 10).expect("LeNet-5 graph chains")
}

/// VGG-11 for 3x32x32 CIFAR-10 input, 3x3 convolutions with padding 1 and
/// a single 512->10 classifier.
pub fn vgg11(init: Init) -> ModelSpec {
    let mut p = ParamInit::new(init);
    let pool = || {
        LayerDef::MaxPool2d(MaxPool2d {
            window: 2,
            stride: 2,
        })
    };
    let mut layers = Vec::new();
    let plan: [(usize, usize, bool); 8] = [
        (3, 64, true),
        (64, 128, true),
        (128, 256, false),
        (256, 256, true),
        (256, 512, false),
        (512, 512, true),
        (512, 512, false),
        (512, 512, true),
    ];
    for (in_c, out_c, pooled) in plan {
        layers.push(p.conv(out_c, in_c, 3, 1, 1));
        layers.push(LayerDef::Relu);
        if pooled {
            layers.push(pool());
        }
    }
    layers.push(LayerDef::Flatten);
    layers.push(p.linear(10, 512));
    ModelSpec::new(layers, [3, 32, 32], 10).expect("VGG-11 graph chains")
}

/// Layout of the diet VGG-11: stride 2 and no padding in the first
/// convolution, no padding afterwards and no pooling, so the classifier
/// still sees a 1x1x512 map.
pub fn vgg11_diet_layout(model: &ModelSpec) -> DietLayout {
    let mut overrides = Vec::new();
    let mut first_conv = true;
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            LayerDef::Conv2d(_) => {
                overrides.push(LayerOverride {
                    layer: i,
                    stride: Some(if first_conv { 2 } else { 1 }),
                    padding: Some(0),
                    drop: false,
                });
                first_conv = false;
            }
            LayerDef::MaxPool2d(_) => overrides.push(LayerOverride {
                layer: i,
                stride: None,
                padding: None,
                drop: true,
            }),
            _ => {}
        }
    }
    DietLayout { overrides }
}
