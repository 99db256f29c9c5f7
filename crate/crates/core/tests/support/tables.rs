//! Every entry of every table at K = 128, Fc = 64, Ff = 32.

use std::time::Instant;

use dietcnn::build_luts;
use dietcnn::codebook::{Codebook, CodebookKind, Symbol};
use dietcnn::lut::ActKind;
use dietcnn::model::{lenet5, Activation, Init, LayerDef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codebook(rng: &mut ChaCha8Rng, k: usize, spread: f64, kind: CodebookKind) -> Codebook {
    let mut c: Vec<f64> = Vec::new();
    while c.len() < k {
        c.push(rng.gen_range(-spread..spread));
        c.sort_by(f64::total_cmp);
        c.dedup();
    }
    Codebook::new(c, kind).unwrap()
}

/// Enumerates every table entry; returns the elapsed seconds.
pub fn enumerate_tables() -> Result<f64, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let act = codebook(&mut rng, 128, 6.0, CodebookKind::Activation).with_zero();
    let cf = codebook(&mut rng, 64, 0.5, CodebookKind::ConvFilter);
    let ff = codebook(&mut rng, 32, 0.5, CodebookKind::FcFilter);
    let model = lenet5(Init::FanInUniform { seed: 4 }, Activation::Relu);
    let luts = build_luts(&act, &cf, &ff, &model).unwrap();
    ensure_eq!(
        (act.len(), cf.len(), ff.len()),
        (128, 64, 32),
        "codebook sizes"
    );

    let v = |s: Symbol| act.value(s);
    let syms = |n: usize| (0..n as u16).map(Symbol);
    for a in syms(128) {
        for f in syms(64) {
            ensure_eq!(
                luts.mul_conv(a, f),
                act.encode(v(a) * cf.value(f)),
                "mul_conv[{a}, {f}]"
            );
        }
        for f in syms(32) {
            ensure_eq!(
                luts.mul_fc(a, f),
                act.encode(v(a) * ff.value(f)),
                "mul_fc[{a}, {f}]"
            );
        }
        for b in syms(128) {
            ensure_eq!(luts.add(a, b), act.encode(v(a) + v(b)), "add[{a}, {b}]");
        }
        ensure_eq!(
            luts.act(ActKind::Relu, a),
            act.encode(v(a).max(0.0)),
            "relu[{a}]"
        );
        ensure_eq!(
            luts.act(ActKind::Sigmoid, a),
            act.encode(1.0 / (1.0 + (-v(a)).exp())),
            "sigmoid[{a}]"
        );
    }

    let biases: Vec<Vec<f32>> = model
        .layers()
        .iter()
        .filter_map(|l| match l {
            LayerDef::Conv2d(c) => c.bias.as_ref().map(|b| b.data().to_vec()),
            LayerDef::Linear(l) => l.bias.as_ref().map(|b| b.data().to_vec()),
            _ => None,
        })
        .collect();
    ensure_eq!(luts.bias_tables().len(), biases.len(), "bias table count");
    for (table, bias) in luts.bias_tables().iter().zip(&biases) {
        ensure_eq!(table.channels, bias.len(), "bias channels");
        for (ch, &b) in bias.iter().enumerate() {
            for s in syms(128) {
                ensure_eq!(
                    luts.bias(table, ch, s),
                    act.encode(v(s) + b as f64),
                    "bias[{ch}, {s}]"
                );
            }
        }
    }

    // rank list against a full sort of the centroids
    let mut by_value: Vec<usize> = (0..128).collect();
    by_value.sort_by(|&i, &j| act.centroids()[i].total_cmp(&act.centroids()[j]));
    for (rank, &id) in by_value.iter().enumerate() {
        ensure_eq!(luts.pool_rank()[id] as usize, rank, "rank of {id}");
    }
    Ok(start.elapsed().as_secs_f64())
}
