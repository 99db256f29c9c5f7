//! Minibatch SGD with hand-written backpropagation, and diet fine-tuning.
//!
//! Gradients are computed per image and summed in f64 over fixed chunks of
//! the minibatch; chunks are reduced in index order, so results do not
//! depend on the number of worker threads.

use std::time::{Duration, Instant};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{fit_filter_codebooks, CalibConfig, Codebooks};
use crate::data::Dataset;
use crate::engine::{diet_forward, FoldOrder};
use crate::error::{Error, Result};
use crate::lut::{build_luts, rebuild_with, transform_model, LutSet, SymbolicModel};
use crate::model::{DietLayout, LayerDef, ModelSpec};
use crate::tensor::{argmax, valid_outputs, MaxPool2d, Tensor};

const CHUNK: usize = 16;

/// Training loss. Negative log-likelihood over log-softmax outputs is the
/// same function as softmax cross-entropy; both names are accepted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    Nll,
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: Loss,
    pub seed: u64,
    /// Minibatches between codebook/table refits during fine-tuning.
    pub refit_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 32,
            epochs: 5,
            loss: Loss::CrossEntropy,
            seed: 0,
            refit_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.refit_every == 0 {
            return Err(Error::InvalidArgument(
                "batch size, epochs and refit interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Gradient of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Per-layer gradients; `None` for layers without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

impl Gradients {
    fn zeros(model: &ModelSpec) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let (w, b) = match l {
                    LayerDef::Conv2d(c) => (c.weight.len(), c.bias.as_ref().map(Tensor::len)),
                    LayerDef::Linear(l) => (l.weight.len(), l.bias.as_ref().map(Tensor::len)),
                    _ => return None,
                };
                Some(ParamGrad {
                    weight: vec![0.0; w],
                    bias: b.map(|n| vec![0.0; n]),
                })
            })
            .collect();
        Self { layers }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight
                    .iter_mut()
                    .zip(&b.weight)
                    .for_each(|(x, y)| *x += y);
                if let (Some(ab), Some(bb)) = (&mut a.bias, &b.bias) {
                    ab.iter_mut().zip(bb).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
}

/// Softmax cross-entropy of one logit row; returns the loss and writes
/// `scale * (softmax - onehot)` into `grad`.
fn softmax_xent(logits: &[f32], label: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let log_z = max + sum.ln();
    for (i, (g, &v)) in grad.iter_mut().zip(logits).enumerate() {
        let p = (v as f64 - log_z).exp();
        *g = scale * (p - if i == label { 1.0 } else { 0.0 });
    }
    log_z - logits[label] as f64
}

/// Mean loss of `model` over a batch.
pub fn batch_loss(model: &ModelSpec, images: &Tensor, labels: &[u8]) -> Result<f64> {
    let logits = model.forward(images)?;
    let k = model.class_count();
    let mut scratch = vec![0.0; k];
    let total: f64 = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| softmax_xent(row, l as usize, 1.0, &mut scratch))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Accumulates the gradient of `scale * loss(image)` into `grads`.
fn backprop_one(
    model: &ModelSpec,
    image: &[f32],
    label: usize,
    scale: f64,
    grads: &mut Gradients,
) -> Result<(f64, bool)> {
    let [c, h, w] = model.input_shape();
    let mut acts = Vec::with_capacity(model.layers().len() + 1);
    acts.push(Tensor::new(vec![1, c, h, w], image.to_vec())?);
    for layer in model.layers() {
        let next = layer.apply(acts.last().expect("non-empty"))?;
        acts.push(next);
    }
    let logits = acts.last().expect("non-empty").data();
    let correct = argmax(logits) == label;
    let mut dy = vec![0.0; logits.len()];
    let loss = softmax_xent(logits, label, scale, &mut dy);

    for (i, layer) in model.layers().iter().enumerate().rev() {
        let x = &acts[i];
        let y = &acts[i + 1];
        let need_dx = i > 0;
        dy = match layer {
            LayerDef::Conv2d(conv) => {
                let g = grads.layers[i].as_mut().expect("conv has grads");
                conv_backward(conv, x, &dy, g, need_dx)
            }
            LayerDef::Linear(lin) => {
                let g = grads.layers[i].as_mut().expect("linear has grads");
                let (out_f, in_f) = (lin.out_features(), lin.in_features());
                let wv = lin.weight.data();
                let xv = x.data();
                let mut dx = vec![0.0; if need_dx { in_f } else { 0 }];
                for o in 0..out_f {
                    let d = dy[o];
                    if d == 0.0 {
                        continue;
                    }
                    let gw = &mut g.weight[o * in_f..(o + 1) * in_f];
                    for (gwi, &xi) in gw.iter_mut().zip(xv) {
                        *gwi += d * xi as f64;
                    }
                    if let Some(gb) = &mut g.bias {
                        gb[o] += d;
                    }
                    if need_dx {
                        for (dxi, &wi) in dx.iter_mut().zip(&wv[o * in_f..(o + 1) * in_f]) {
                            *dxi += d * wi as f64;
                        }
                    }
                }
                dx
            }
            LayerDef::Relu => dy
                .iter()
                .zip(x.data())
                .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                .collect(),
            LayerDef::Sigmoid => dy
                .iter()
                .zip(y.data())
                .map(|(&d, &s)| {
                    let s = s as f64;
                    d * s * (1.0 - s)
                })
                .collect(),
            LayerDef::MaxPool2d(pool) => maxpool_backward(pool, x, &dy),
            LayerDef::Flatten => dy,
        };
    }
    Ok((loss, correct))
}

fn conv_backward(
    conv: &crate::tensor::Conv2d,
    x: &Tensor,
    dy: &[f64],
    g: &mut ParamGrad,
    need_dx: bool,
) -> Vec<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let [oc, oh, ow] = conv.output_shape([c, h, w]).expect("forward succeeded");
    let (kh, kw) = conv.kernel();
    let (s, p) = (conv.stride, conv.padding);
    let xv = x.data();
    let wv = conv.weight.data();
    let mut dx = vec![0.0; if need_dx { c * h * w } else { 0 }];
    for o in 0..oc {
        let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
        if let Some(gb) = &mut g.bias {
            gb[o] += dplane.iter().sum::<f64>();
        }
        for ci in 0..c {
            let xplane = &xv[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let ys = valid_outputs(oh, ky, s, p, h);
                for kx in 0..kw {
                    let xs = valid_outputs(ow, kx, s, p, w);
                    let widx = ((o * c + ci) * kh + ky) * kw + kx;
                    let wval = wv[widx] as f64;
                    let mut gw = 0.0;
                    for oy in ys.clone() {
                        let iy = oy * s + ky - p;
                        let drow = &dplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let x0 = xs.start + kx - p;
                            let n = xs.len();
                            for (&d, &xval) in drow[xs.clone()].iter().zip(&xrow[x0..x0 + n]) {
                                gw += d * xval as f64;
                            }
                            if need_dx {
                                let dxrow = &mut dx[(ci * h + iy) * w + x0..][..n];
                                for (dxv, &d) in dxrow.iter_mut().zip(&drow[xs.clone()]) {
                                    *dxv += d * wval;
                                }
                            }
                        } else {
                            for ox in xs.clone() {
                                let ix = ox * s + kx - p;
                                gw += drow[ox] * xrow[ix] as f64;
                                if need_dx {
                                    dx[(ci * h + iy) * w + ix] += drow[ox] * wval;
                                }
                            }
                        }
                    }
                    g.weight[widx] += gw;
                }
            }
        }
    }
    dx
}

fn maxpool_backward(pool: &MaxPool2d, x: &Tensor, dy: &[f64]) -> Vec<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let [_, oh, ow] = pool.output_shape([c, h, w]).expect("forward succeeded");
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f32::NEG_INFINITY, 0);
                for ky in 0..pool.window {
                    for kx in 0..pool.window {
                        let idx = (oy * pool.stride + ky) * w + ox * pool.stride + kx;
                        if plane[idx] > best.0 {
                            best = (plane[idx], idx);
                        }
                    }
                }
                dx[ci * h * w + best.1] += dy[(ci * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

/// Mean loss and its gradient over a batch of (N, C, H, W) images.
pub fn gradients(model: &ModelSpec, images: &Tensor, labels: &[u8]) -> Result<(f64, Gradients)> {
    let batch = model.batched(images)?;
    let n = batch.shape()[0];
    if n != labels.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let per = batch.len() / n;
    let idx: Vec<usize> = (0..n).collect();
    let (loss, _, grads) = chunked_gradients(
        model,
        &idx,
        |i| &batch.data()[i * per..(i + 1) * per],
        labels,
    )?;
    Ok((loss, grads))
}

fn chunked_gradients<'a>(
    model: &ModelSpec,
    idx: &[usize],
    pixels: impl Fn(usize) -> &'a [f32] + Sync,
    labels: &[u8],
) -> Result<(f64, usize, Gradients)> {
    let scale = 1.0 / idx.len() as f64;
    let parts: Vec<(f64, usize, Gradients)> = idx
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut g = Gradients::zeros(model);
            let mut loss = 0.0;
            let mut correct = 0;
            for (j, &i) in chunk.iter().enumerate() {
                let label = labels[ci * CHUNK + j] as usize;
                let (l, ok) = backprop_one(model, pixels(i), label, scale, &mut g)?;
                loss += l;
                correct += ok as usize;
            }
            Ok((loss, correct, g))
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros(model);
    let mut loss = 0.0;
    let mut correct = 0;
    for (l, c, g) in &parts {
        loss += l;
        correct += c;
        total.add(g);
    }
    Ok((loss / idx.len() as f64, correct, total))
}

/// `param -= lr * grad` for every parameter.
pub fn apply_update(model: &mut ModelSpec, grads: &Gradients, lr: f64) {
    for (layer, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
        let Some(g) = g else { continue };
        let (weight, bias) = match layer {
            LayerDef::Conv2d(c) => (&mut c.weight, &mut c.bias),
            LayerDef::Linear(l) => (&mut l.weight, &mut l.bias),
            _ => continue,
        };
        for (w, d) in weight.data_mut().iter_mut().zip(&g.weight) {
            *w = (*w as f64 - lr * d) as f32;
        }
        if let (Some(b), Some(gb)) = (bias, &g.bias) {
            for (w, d) in b.data_mut().iter_mut().zip(gb) {
                *w = (*w as f64 - lr * d) as f32;
            }
        }
    }
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss of the network the gradients were taken from.
    pub loss: f64,
    pub train_accuracy: f64,
    /// Mean diet-forward loss of the monitored images (fine-tuning only).
    pub diet_loss: Option<f64>,
    pub diet_accuracy: Option<f64>,
    pub refits: usize,
    #[serde(skip)]
    pub elapsed: Duration,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
    );
    idx.shuffle(&mut rng);
    idx
}

fn check_data(model: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if data.image_shape() != model.input_shape() {
        return Err(Error::Shape {
            op: "train",
            axis: "input",
            expected: model.input_shape().iter().product(),
            actual: data.image_shape().iter().product(),
        });
    }
    if let Some(&l) = data
        .labels()
        .iter()
        .find(|&&l| l as usize >= model.class_count())
    {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {} classes",
            model.class_count()
        )));
    }
    Ok(())
}

/// Trains the float network. `on_epoch` sees the model after each epoch.
pub fn train_float_with(
    model: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ModelSpec) -> Result<()>,
) -> Result<ModelSpec> {
    cfg.validate()?;
    check_data(model, data)?;
    let mut model = model.clone();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<u8> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (loss, ok, grads) = chunked_gradients(&model, batch, |i| data.pixels(i), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            apply_update(&mut model, &grads, cfg.lr);
            loss_sum += loss * batch.len() as f64;
            correct += ok;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            diet_loss: None,
            diet_accuracy: None,
            refits: 0,
            elapsed: start.elapsed(),
        };
        info!(
            "epoch {epoch}: loss {:.4}, train acc {:.4} ({:.1?})",
            stats.loss, stats.train_accuracy, stats.elapsed
        );
        on_epoch(&stats, &model)?;
    }
    Ok(model)
}

pub fn train_float(model: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<ModelSpec> {
    train_float_with(model, data, cfg, |_, _| Ok(()))
}

/// Which float network supplies the fine-tuning gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SteSource {
    /// The float network with its own weights.
    FloatWeights,
    /// The float network with every weight replaced by its decoded filter
    /// symbol; the update is applied to the float weights.
    #[default]
    DecodedWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub calib: CalibConfig,
    /// Images of each minibatch run through the diet forward for the
    /// monitored loss (0 disables monitoring).
    pub monitor_images: usize,
    pub ste: SteSource,
    pub order: FoldOrder,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 3,
                ..Default::default()
            },
            calib: CalibConfig::default(),
            monitor_images: 8,
            ste: SteSource::default(),
            order: FoldOrder::default(),
        }
    }
}

/// Symbolic form of `model` with freshly fitted filter codebooks and the
/// activation codebook (and the tables depending only on it) kept.
pub fn refit(
    model: &ModelSpec,
    act: &crate::codebook::Codebook,
    base: &LutSet,
    calib: &CalibConfig,
    layout: Option<&DietLayout>,
) -> Result<SymbolicModel> {
    let (conv, fc) = fit_filter_codebooks(model, calib)?;
    if conv.codebook.len() < 2 && !conv.reduced || fc.codebook.len() < 2 && !fc.reduced {
        return Err(Error::Invariant(
            "degenerate filter codebook after refit".into(),
        ));
    }
    let luts = rebuild_with(base, act, &conv.codebook, &fc.codebook, model)?;
    transform_model(model, act, &conv.codebook, &fc.codebook, &luts, layout)
}

/// Fine-tunes `model` against the diet network: the monitored loss comes
/// from the diet forward, the update from the float network's gradient on
/// the same minibatch, and the filter codebooks and tables are refitted
/// every `refit_every` minibatches. The activation codebook stays fixed.
pub fn finetune_diet_with(
    model: &ModelSpec,
    codebooks: &Codebooks,
    data: &Dataset,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ModelSpec, &SymbolicModel) -> Result<()>,
) -> Result<(ModelSpec, SymbolicModel)> {
    cfg.train.validate()?;
    check_data(model, data)?;
    let base = build_luts(&codebooks.act, &codebooks.conv, &codebooks.fc, model)?;
    let mut model = model.clone();
    let mut sym = transform_model(
        &model,
        &codebooks.act,
        &codebooks.conv,
        &codebooks.fc,
        &base,
        None,
    )?;
    let mut steps_since_refit = 0;

    for epoch in 0..cfg.train.epochs {
        let start = Instant::now();
        let order = epoch_order(data.len(), cfg.train.seed, epoch);
        let (mut loss_sum, mut correct, mut refits) = (0.0, 0, 0);
        let (mut diet_loss, mut diet_correct, mut monitored) = (0.0, 0, 0);
        for (step, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let labels: Vec<u8> = batch.iter().map(|&i| data.labels()[i]).collect();

            let watch = &batch[..cfg.monitor_images.min(batch.len())];
            let watched: Vec<(f64, bool)> = watch
                .par_iter()
                .map(|&i| {
                    let (logits, _) = diet_forward(&sym, &data.image(i), cfg.order)?;
                    let mut g = vec![0.0; logits.len()];
                    let label = data.labels()[i] as usize;
                    let l = softmax_xent(logits.data(), label, 1.0, &mut g);
                    Ok((l, argmax(logits.data()) == label))
                })
                .collect::<Result<_>>()?;
            for (l, ok) in watched {
                diet_loss += l;
                diet_correct += ok as usize;
                monitored += 1;
            }

            let grad_model = match cfg.ste {
                SteSource::FloatWeights => None,
                SteSource::DecodedWeights => Some(sym.decoded_model(&model)?),
            };
            let (loss, ok, grads) = chunked_gradients(
                grad_model.as_ref().unwrap_or(&model),
                batch,
                |i| data.pixels(i),
                &labels,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            apply_update(&mut model, &grads, cfg.train.lr);
            loss_sum += loss * batch.len() as f64;
            correct += ok;

            steps_since_refit += 1;
            if steps_since_refit == cfg.train.refit_every {
                steps_since_refit = 0;
                sym = refit(&model, &codebooks.act, &base, &cfg.calib, None)?;
                refits += 1;
            }
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            diet_loss: (monitored > 0).then(|| diet_loss / monitored as f64),
            diet_accuracy: (monitored > 0).then(|| diet_correct as f64 / monitored as f64),
            refits,
            elapsed: start.elapsed(),
        };
        info!(
            "finetune epoch {epoch}: loss {:.4}, diet loss {:?}, diet acc {:?}, {refits} refits ({:.1?})",
            stats.loss, stats.diet_loss, stats.diet_accuracy, stats.elapsed
        );
        on_epoch(&stats, &model, &sym)?;
    }
    Ok((model, sym))
}

pub fn finetune_diet(
    model: &ModelSpec,
    codebooks: &Codebooks,
    data: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<(ModelSpec, SymbolicModel)> {
    finetune_diet_with(model, codebooks, data, cfg, |_, _, _| Ok(()))
}
