//! Accuracy of the float and diet networks over a dataset.

use rayon::prelude::*;
use serde::Serialize;

use crate::codebook::Codebook;
use crate::data::Dataset;
use crate::engine::{diet_forward, FoldOrder, Trace};
use crate::error::Result;
use crate::lut::SymbolicModel;
use crate::model::ModelSpec;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub images: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    fn new(predictions: Vec<usize>, labels: &[u8]) -> Self {
        let correct = predictions
            .iter()
            .zip(labels)
            .filter(|(p, &l)| **p == l as usize)
            .count();
        Self {
            images: predictions.len(),
            correct,
            accuracy: correct as f64 / predictions.len().max(1) as f64,
            predictions,
        }
    }

    /// Fraction of images on which two evaluations predict the same class.
    pub fn agreement(&self, other: &Evaluation) -> f64 {
        let same = self
            .predictions
            .iter()
            .zip(&other.predictions)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.predictions.len().max(1) as f64
    }
}

/// Float-network predictions, in batches of 100.
pub fn evaluate_float(model: &ModelSpec, data: &Dataset) -> Result<Evaluation> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds: Vec<Vec<usize>> = idx
        .par_chunks(100)
        .map(|chunk| {
            let (batch, _) = data.batch(chunk);
            let logits = model.forward(&batch)?;
            Ok(logits
                .data()
                .chunks_exact(model.class_count())
                .map(argmax)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation::new(preds.concat(), data.labels()))
}

/// Float-network predictions with the input and every layer output replaced
/// by its codebook reconstruction, decode(encode(x)). Arithmetic stays in
/// floats; only the values are quantized.
pub fn evaluate_reconstructed(
    model: &ModelSpec,
    act_cb: &Codebook,
    data: &Dataset,
) -> Result<Evaluation> {
    let quantize = |t: Tensor| -> Result<Tensor> {
        let shape = t.shape().to_vec();
        let data = t
            .into_data()
            .into_iter()
            .map(|v| act_cb.value(act_cb.encode(v as f64)) as f32)
            .collect();
        Tensor::new(shape, data)
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds: Vec<Vec<usize>> = idx
        .par_chunks(100)
        .map(|chunk| {
            let (batch, _) = data.batch(chunk);
            let mut x = quantize(batch)?;
            for layer in model.layers() {
                x = quantize(layer.apply(&x)?)?;
            }
            Ok(x.data()
                .chunks_exact(model.class_count())
                .map(argmax)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation::new(preds.concat(), data.labels()))
}

/// Diet-network predictions and the summed lookup trace.
pub fn evaluate_diet(
    sym: &SymbolicModel,
    data: &Dataset,
    order: FoldOrder,
) -> Result<(Evaluation, Trace)> {
    let results: Vec<(usize, Trace)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (logits, trace) = diet_forward(sym, &data.image(i), order)?;
            Ok((argmax(logits.data()), trace))
        })
        .collect::<Result<_>>()?;
    let mut total = Trace::default();
    let mut preds = Vec::with_capacity(results.len());
    for (p, t) in &results {
        preds.push(*p);
        total.accumulate(t);
    }
    Ok((Evaluation::new(preds, data.labels()), total))
}
