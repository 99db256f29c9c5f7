//! Dense f32 tensors and the reference floating-point layer kernels.
//!
//! Everything here is the "before" picture: the float network that the
//! symbolic engine replaces, and the oracle its outputs are compared with.
//! Dot products accumulate in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 to 4. Last axis is fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::InvalidArgument(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                axis: "len",
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn scale(&self, factor: f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element (first one on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    /// Image `n` of a batched (N, ...) tensor as a (1, ...) tensor.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let batch = self.shape[0];
        if n >= batch {
            return Err(Error::InvalidArgument(format!(
                "batch index {n} out of range for batch of {batch}"
            )));
        }
        let per = self.data.len() / batch;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(Error::Shape {
                op,
                axis: "rank",
                expected: 4,
                actual: other.len(),
            }),
        }
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// 2-D convolution parameters. Weights are (OutC, InC, Kh, Kw).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape[2], self.weight.shape[3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.shape.len() != 4 {
            return Err(Error::InvalidLayer(format!(
                "conv weight must be rank 4 (OutC, InC, Kh, Kw), got {:?}",
                self.weight.shape
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidLayer("conv stride must be >= 1".into()));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels() {
                return Err(Error::Shape {
                    op: "conv2d",
                    axis: "bias",
                    expected: self.out_channels(),
                    actual: b.len(),
                });
            }
        }
        Ok(())
    }

    /// Output (C, H, W) for an input of (C, H, W).
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let [c, h, w] = input;
        if c != self.in_channels() {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "channels",
                expected: self.in_channels(),
                actual: c,
            });
        }
        let (kh, kw) = self.kernel();
        let oh = conv_extent(h, kh, self.stride, self.padding, "height")?;
        let ow = conv_extent(w, kw, self.stride, self.padding, "width")?;
        Ok([self.out_channels(), oh, ow])
    }
}

pub(crate) fn conv_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    axis: &'static str,
) -> Result<usize> {
    let padded = size + 2 * padding;
    if kernel > padded {
        return Err(Error::Shape {
            op: "conv2d",
            axis,
            expected: kernel,
            actual: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output positions `o` along one axis whose input index `o * stride +
/// offset - padding` falls inside `0..size`.
pub(crate) fn valid_outputs(
    out: usize,
    offset: usize,
    stride: usize,
    padding: usize,
    size: usize,
) -> std::ops::Range<usize> {
    let lo = if offset >= padding {
        0
    } else {
        (padding - offset).div_ceil(stride)
    };
    let hi = if size + padding > offset {
        ((size - 1 + padding - offset) / stride + 1).min(out)
    } else {
        0
    };
    lo.min(hi)..hi
}

/// Fully connected layer. Weights are (Out, In).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn in_features(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.shape.len() != 2 {
            return Err(Error::InvalidLayer(format!(
                "linear weight must be rank 2 (Out, In), got {:?}",
                self.weight.shape
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_features() {
                return Err(Error::Shape {
                    op: "linear",
                    axis: "bias",
                    expected: self.out_features(),
                    actual: b.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidLayer(format!(
                "maxpool window and stride must be >= 1, got window {} stride {}",
                self.window, self.stride
            )));
        }
        let [c, h, w] = input;
        if self.window > h || self.window > w {
            return Err(Error::InvalidLayer(format!(
                "maxpool window {} larger than input {h}x{w}",
                self.window
            )));
        }
        Ok([
            c,
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ])
    }
}

/// Standard 2-D convolution over an (N, C, H, W) input with zero padding.
pub fn conv2d(input: &Tensor, layer: &Conv2d) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [oc, oh, ow] = layer.output_shape([c, h, w])?;
    let (kh, kw) = layer.kernel();
    let (s, p) = (layer.stride, layer.padding);
    let weights = layer.weight.data();

    let mut out = vec![0f32; n * oc * oh * ow];
    let mut acc = vec![0f64; oh * ow];
    for b in 0..n {
        let image = &input.data[b * c * h * w..(b + 1) * c * h * w];
        for o in 0..oc {
            let bias = layer.bias.as_ref().map_or(0.0, |t| t.data[o] as f64);
            acc.iter_mut().for_each(|a| *a = bias);
            for ci in 0..c {
                let plane = &image[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    let ys = valid_outputs(oh, ky, s, p, h);
                    for kx in 0..kw {
                        let xs = valid_outputs(ow, kx, s, p, w);
                        if xs.is_empty() {
                            continue;
                        }
                        let wv = weights[((o * c + ci) * kh + ky) * kw + kx] as f64;
                        for oy in ys.clone() {
                            let iy = oy * s + ky - p;
                            let row = &plane[iy * w..(iy + 1) * w];
                            let acc_row = &mut acc[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let x0 = xs.start + kx - p;
                                for (a, &v) in
                                    acc_row[xs.clone()].iter_mut().zip(&row[x0..x0 + xs.len()])
                                {
                                    *a += wv * v as f64;
                                }
                            } else {
                                for ox in xs.clone() {
                                    acc_row[ox] += wv * row[ox * s + kx - p] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut out[((b * oc + o) * oh) * ow..((b * oc + o + 1) * oh) * ow];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

/// `out[o] = sum_i w[o, i] * x[i] + b[o]` for each batch row.
///
/// The input may have any rank; everything after the first axis is treated
/// as the feature vector.
pub fn linear(input: &Tensor, layer: &Linear) -> Result<Tensor> {
    layer.validate()?;
    let n = input.shape[0];
    let features = input.len() / n;
    let (out_f, in_f) = (layer.out_features(), layer.in_features());
    if features != in_f {
        return Err(Error::Shape {
            op: "linear",
            axis: "features",
            expected: in_f,
            actual: features,
        });
    }
    let weights = layer.weight.data();
    let mut out = Vec::with_capacity(n * out_f);
    for b in 0..n {
        let x = &input.data[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let row = &weights[o * in_f..(o + 1) * in_f];
            let mut acc = layer.bias.as_ref().map_or(0.0, |t| t.data[o] as f64);
            for (wv, xv) in row.iter().zip(x) {
                acc += *wv as f64 * *xv as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![n, out_f], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

pub(crate) fn sigmoid_scalar(v: f32) -> f32 {
    (1.0 / (1.0 + (-(v as f64)).exp())) as f32
}

pub fn maxpool2d(input: &Tensor, layer: &MaxPool2d) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("maxpool2d")?;
    let [_, oh, ow] = layer.output_shape([c, h, w])?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data.chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..layer.window {
                    let row = (oy * layer.stride + ky) * w;
                    for kx in 0..layer.window {
                        best = best.max(plane[row + ox * layer.stride + kx]);
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// (N, ...) -> (N, prod(...)).
pub fn flatten(input: &Tensor) -> Tensor {
    let n = input.shape[0];
    Tensor {
        shape: vec![n, input.len() / n],
        data: input.data.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Conv2d {
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let layer = conv(
            Tensor::from_fn(&[2, 3, 3, 3], |i| i as f32 * 0.1 - 1.0),
            Some(Tensor::zeros(&[2])),
            1,
            1,
        );
        let out = conv2d(&Tensor::zeros(&[1, 3, 5, 5]), &layer).unwrap();
        assert_eq!(out.shape(), &[1, 2, 5, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_filter_sums_window() {
        let layer = conv(Tensor::full(&[1, 1, 3, 3], 1.0), None, 1, 0);
        let out = conv2d(&Tensor::full(&[1, 1, 3, 3], 1.0), &layer).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_output_extent_formula() {
        let layer = conv(Tensor::zeros(&[4, 2, 3, 3]), None, 2, 1);
        assert_eq!(layer.output_shape([2, 8, 7]).unwrap(), [4, 4, 4]);
        let err = layer.output_shape([3, 8, 8]).unwrap_err();
        assert!(matches!(
            err,
            Error::Shape {
                axis: "channels",
                ..
            }
        ));
    }

    #[test]
    fn linear_hand_sum() {
        let layer = Linear {
            weight: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: None,
        };
        let out = linear(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), &layer).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn linear_identity() {
        let layer = Linear {
            weight: Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }),
            bias: Some(Tensor::zeros(&[4])),
        };
        let x = Tensor::new(vec![1, 4], vec![0.5, -2.0, 3.25, 7.0]).unwrap();
        assert_eq!(linear(&x, &layer).unwrap().data(), x.data());
    }

    #[test]
    fn linear_length_mismatch() {
        let layer = Linear {
            weight: Tensor::zeros(&[2, 3]),
            bias: None,
        };
        assert!(linear(&Tensor::zeros(&[1, 4]), &layer).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::zeros(&[1])).data(), &[0.5]);
    }

    #[test]
    fn maxpool_window() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2d(
            &t,
            &MaxPool2d {
                window: 2,
                stride: 2,
            },
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_bad_geometry() {
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(maxpool2d(
            &t,
            &MaxPool2d {
                window: 3,
                stride: 1
            }
        )
        .is_err());
        assert!(maxpool2d(
            &t,
            &MaxPool2d {
                window: 2,
                stride: 0
            }
        )
        .is_err());
    }

    #[test]
    fn tensor_rejects_bad_len() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }
}
