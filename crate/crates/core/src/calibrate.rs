//! Collecting the value distributions the codebooks are fitted to.

use std::collections::HashMap;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{kmeans_fit_weighted, Codebook, CodebookKind, KMeansFit, WeightedSamples};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerDef, ModelSpec};

/// Symbol counts and fitting knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub n_clusters: usize,
    pub n_cfilters: usize,
    pub n_ffilters: usize,
    /// Images whose feature maps join the activation samples.
    pub calib_images: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            n_clusters: 512,
            n_cfilters: 256,
            n_ffilters: 32,
            calib_images: 2000,
            seed: 0,
            max_iters: 300,
        }
    }
}

/// The three codebooks of a diet model.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub act: Codebook,
    pub conv: Codebook,
    pub fc: Codebook,
}

/// All conv weights and all FC weights of `model`, as f64.
pub fn filter_samples(model: &ModelSpec) -> (Vec<f64>, Vec<f64>) {
    let mut conv = Vec::new();
    let mut fc = Vec::new();
    for layer in model.layers() {
        match layer {
            LayerDef::Conv2d(c) => conv.extend(c.weight.data().iter().map(|&v| v as f64)),
            LayerDef::Linear(l) => fc.extend(l.weight.data().iter().map(|&v| v as f64)),
            _ => {}
        }
    }
    (conv, fc)
}

/// Every pixel of `images` plus the output of every non-reshaping layer of
/// the float network over the first `calib_images` images.
pub fn activation_samples(
    model: &ModelSpec,
    images: &Dataset,
    calib_images: usize,
) -> Result<WeightedSamples> {
    let mut pixel_counts: HashMap<u32, f64> = HashMap::new();
    for &p in images.images().data() {
        *pixel_counts.entry(normalized_bits(p)).or_default() += 1.0;
    }
    let pixels = WeightedSamples::from_pairs(
        pixel_counts
            .into_iter()
            .map(|(bits, w)| (f32::from_bits(bits) as f64, w)),
    )?;

    let n = calib_images.min(images.len());
    if n == 0 {
        return Ok(pixels);
    }
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(50)
        .map(<[usize]>::to_vec)
        .collect();
    let per_chunk: Result<Vec<Vec<f32>>> = chunks
        .par_iter()
        .map(|idx| {
            let (batch, _) = images.batch(idx);
            let mut x = model.batched(&batch)?;
            let mut values = Vec::new();
            for layer in model.layers() {
                x = layer.apply(&x)?;
                if !matches!(layer, LayerDef::Flatten) {
                    values.extend_from_slice(x.data());
                }
            }
            Ok(values)
        })
        .collect();
    let mut values: Vec<f32> = per_chunk?.concat();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant(
            "non-finite feature map during calibration".into(),
        ));
    }
    values.par_sort_unstable_by(f32::total_cmp);
    let maps = WeightedSamples::from_pairs(runs(&values))?;
    debug!(
        "activation samples: {} distinct pixels, {} distinct feature-map values",
        pixels.distinct(),
        maps.distinct()
    );
    Ok(pixels.merge(&maps))
}

fn normalized_bits(v: f32) -> u32 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// Run-length pairs of a sorted slice.
fn runs(sorted: &[f32]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        out.push((v as f64, (j - i) as f64));
        i = j;
    }
    out
}

/// Fits the activation codebook and forces an exact zero centroid.
pub fn fit_activation_codebook(samples: &WeightedSamples, cfg: &CalibConfig) -> Result<KMeansFit> {
    let mut fit = kmeans_fit_weighted(
        samples,
        cfg.n_clusters,
        cfg.seed,
        cfg.max_iters,
        CodebookKind::Activation,
    )?;
    fit.codebook = fit.codebook.with_zero();
    Ok(fit)
}

/// Fits the shared conv-filter and FC-filter codebooks to `model`'s weights.
pub fn fit_filter_codebooks(
    model: &ModelSpec,
    cfg: &CalibConfig,
) -> Result<(KMeansFit, KMeansFit)> {
    let (conv_w, fc_w) = filter_samples(model);
    let fit = |w: &[f64], k: usize, kind| -> Result<KMeansFit> {
        if w.is_empty() {
            // no layers of this kind; a lone zero centroid keeps the tables well formed
            return Ok(KMeansFit {
                codebook: Codebook::new(vec![0.0], kind)?,
                requested_k: k,
                reduced: true,
                iterations: 0,
                sse: 0.0,
            });
        }
        let samples = WeightedSamples::from_values(w.iter().copied())?;
        kmeans_fit_weighted(&samples, k, cfg.seed, cfg.max_iters, kind)
    };
    Ok((
        fit(&conv_w, cfg.n_cfilters, CodebookKind::ConvFilter)?,
        fit(&fc_w, cfg.n_ffilters, CodebookKind::FcFilter)?,
    ))
}

/// Full calibration: activation codebook from pixels and feature maps,
/// filter codebooks from the weights.
pub fn calibrate(model: &ModelSpec, train: &Dataset, cfg: &CalibConfig) -> Result<Codebooks> {
    let samples = activation_samples(model, train, cfg.calib_images)?;
    let act = fit_activation_codebook(&samples, cfg)?;
    let (conv, fc) = fit_filter_codebooks(model, cfg)?;
    for fit in [&act, &conv, &fc] {
        if fit.reduced {
            log::warn!(
                "{:?} codebook reduced to {} of {} symbols",
                fit.codebook.kind(),
                fit.codebook.len(),
                fit.requested_k
            );
        }
    }
    Ok(Codebooks {
        act: act.codebook,
        conv: conv.codebook,
        fc: fc.codebook,
    })
}
