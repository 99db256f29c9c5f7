//! Every diet op against a reference that decodes its operands, computes in
//! floats and re-encodes after each step, folding in the same order.

use dietcnn::codebook::{Codebook, CodebookKind, Symbol};
use dietcnn::engine::{diet_activation, diet_conv2d, diet_linear, diet_maxpool};
use dietcnn::lut::{ActKind, SymbolicLayer};
use dietcnn::model::LayerDef;
use dietcnn::tensor::{maxpool2d, Conv2d, Linear, MaxPool2d};
use dietcnn::{
    build_luts, diet_forward, transform_model, FoldOrder, LutSet, ModelSpec, SymbolicTensor, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_codebook(rng: &mut ChaCha8Rng, k: usize, spread: f64, kind: CodebookKind) -> Codebook {
    let mut c: Vec<f64> = (0..k).map(|_| rng.gen_range(-spread..spread)).collect();
    if kind == CodebookKind::Activation {
        c[0] = 0.0;
    }
    Codebook::new(c, kind).unwrap()
}

fn random_symbols(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Symbol> {
    (0..n).map(|_| Symbol(rng.gen_range(0..k) as u16)).collect()
}

struct Setup {
    act: Codebook,
    cf: Codebook,
    ff: Codebook,
}

impl Setup {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let (k, kc, kf) = (
            rng.gen_range(8..48),
            rng.gen_range(2..12),
            rng.gen_range(2..12),
        );
        Self {
            act: random_codebook(rng, k, 4.0, CodebookKind::Activation),
            cf: random_codebook(rng, kc, 1.5, CodebookKind::ConvFilter),
            ff: random_codebook(rng, kf, 1.5, CodebookKind::FcFilter),
        }
    }

    fn add(&self, a: Symbol, b: Symbol) -> Symbol {
        self.act.encode(self.act.value(a) + self.act.value(b))
    }

    /// Products in `bag` folded from the zero symbol, re-encoding each sum.
    fn fold(&self, mut bag: Vec<Symbol>, order: FoldOrder) -> Symbol {
        if order == FoldOrder::ValueAscending {
            bag.sort_by(|a, b| self.act.value(*a).total_cmp(&self.act.value(*b)));
        }
        let zero = self.act.encode(0.0);
        bag.into_iter().fold(zero, |acc, p| self.add(acc, p))
    }
}

fn pick_order(rng: &mut ChaCha8Rng) -> FoldOrder {
    if rng.gen_bool(0.5) {
        FoldOrder::ChannelMajorRaster
    } else {
        FoldOrder::ValueAscending
    }
}

pub fn fuzz_conv2d(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..cases {
        let s = Setup::new(&mut rng);
        let (c, oc) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let (h, w) = (rng.gen_range(kh..kh + 5), rng.gen_range(kw..kw + 5));
        let with_bias = rng.gen_bool(0.7);
        let bias: Vec<f32> = (0..oc).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let conv = Conv2d {
            weight: Tensor::zeros(&[oc, c, kh, kw]),
            bias: with_bias.then(|| Tensor::new(vec![oc], bias.clone()).unwrap()),
            stride,
            padding: pad,
        };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let host = ModelSpec::new(
            vec![LayerDef::Conv2d(conv), LayerDef::Flatten],
            [c, h, w],
            oc * oh * ow,
        )
        .unwrap();
        let luts = build_luts(&s.act, &s.cf, &s.ff, &host).unwrap();

        let x = random_symbols(&mut rng, c * h * w, s.act.len());
        let wsym = random_symbols(&mut rng, oc * c * kh * kw, s.cf.len());
        let layer = SymbolicLayer::Conv2d {
            weight: SymbolicTensor::new(vec![oc, c, kh, kw], wsym.clone()).unwrap(),
            stride,
            padding: pad,
            bias: with_bias.then_some(0),
        };
        let order = pick_order(&mut rng);
        let input = SymbolicTensor::new(vec![c, h, w], x.clone()).unwrap();
        let got = diet_conv2d(&input, &layer, &luts, order).unwrap();
        ensure_eq!(got.shape(), &[oc, oh, ow], "case {case}");

        let mut expect = Vec::new();
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut bag = Vec::new();
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let a = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                {
                                    0.0
                                } else {
                                    s.act.value(x[(ci * h + iy as usize) * w + ix as usize])
                                };
                                let f = s.cf.value(wsym[((o * c + ci) * kh + ky) * kw + kx]);
                                bag.push(s.act.encode(a * f));
                            }
                        }
                    }
                    let mut acc = s.fold(bag, order);
                    if with_bias {
                        acc = s.act.encode(s.act.value(acc) + bias[o] as f64);
                    }
                    expect.push(acc);
                }
            }
        }
        ensure_eq!(got.symbols(), &expect[..], "case {case}");
    }
    Ok(())
}

pub fn fuzz_linear(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..cases {
        let s = Setup::new(&mut rng);
        let (inf, outf) = (rng.gen_range(1..40), rng.gen_range(1..12));
        let with_bias = rng.gen_bool(0.7);
        let bias: Vec<f32> = (0..outf).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lin = Linear {
            weight: Tensor::zeros(&[outf, inf]),
            bias: with_bias.then(|| Tensor::new(vec![outf], bias.clone()).unwrap()),
        };
        let host = ModelSpec::new(
            vec![LayerDef::Flatten, LayerDef::Linear(lin)],
            [inf, 1, 1],
            outf,
        )
        .unwrap();
        let luts = build_luts(&s.act, &s.cf, &s.ff, &host).unwrap();

        let x = random_symbols(&mut rng, inf, s.act.len());
        let wsym = random_symbols(&mut rng, outf * inf, s.ff.len());
        let layer = SymbolicLayer::Linear {
            weight: SymbolicTensor::new(vec![outf, inf], wsym.clone()).unwrap(),
            bias: with_bias.then_some(0),
        };
        let order = pick_order(&mut rng);
        let got = diet_linear(
            &SymbolicTensor::new(vec![inf], x.clone()).unwrap(),
            &layer,
            &luts,
            order,
        )
        .unwrap();

        let expect: Vec<Symbol> = (0..outf)
            .map(|o| {
                let bag = (0..inf)
                    .map(|i| {
                        s.act
                            .encode(s.act.value(x[i]) * s.ff.value(wsym[o * inf + i]))
                    })
                    .collect();
                let acc = s.fold(bag, order);
                if with_bias {
                    s.act.encode(s.act.value(acc) + bias[o] as f64)
                } else {
                    acc
                }
            })
            .collect();
        ensure_eq!(got.symbols(), &expect[..], "case {case}");
    }
    Ok(())
}

fn plain_luts(s: &Setup) -> LutSet {
    let host = ModelSpec::new(vec![LayerDef::Flatten], [1, 1, 1], 1).unwrap();
    build_luts(&s.act, &s.cf, &s.ff, &host).unwrap()
}

pub fn fuzz_activations(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..cases {
        let s = Setup::new(&mut rng);
        let luts = plain_luts(&s);
        let n = rng.gen_range(1..64);
        let x = random_symbols(&mut rng, n, s.act.len());
        let input = SymbolicTensor::new(vec![n], x.clone()).unwrap();
        let relu = diet_activation(&input, ActKind::Relu, &luts);
        let sig = diet_activation(&input, ActKind::Sigmoid, &luts);
        for (i, &v) in x.iter().enumerate() {
            let d = s.act.value(v);
            ensure_eq!(relu.symbols()[i], s.act.encode(d.max(0.0)), "case {case}");
            ensure_eq!(
                sig.symbols()[i],
                s.act.encode(1.0 / (1.0 + (-d).exp())),
                "case {case}"
            );
        }
    }
    Ok(())
}

pub fn fuzz_maxpool(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..cases {
        let s = Setup::new(&mut rng);
        let luts = plain_luts(&s);
        let window = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let c = rng.gen_range(1..4);
        let (h, w) = (
            rng.gen_range(window..window + 6),
            rng.gen_range(window..window + 6),
        );
        let x = random_symbols(&mut rng, c * h * w, s.act.len());
        let pool = MaxPool2d { window, stride };
        let got = diet_maxpool(
            &SymbolicTensor::new(vec![c, h, w], x.clone()).unwrap(),
            &pool,
            &luts,
        )
        .unwrap();

        let decoded = Tensor::new(
            vec![1, c, h, w],
            x.iter().map(|&v| s.act.value(v) as f32).collect(),
        )
        .unwrap();
        let pooled = maxpool2d(&decoded, &pool).unwrap();
        // centroids are distinct, so the f32 maxima map back to their symbols
        let expect: Vec<Symbol> = pooled
            .data()
            .iter()
            .map(|&v| {
                let id = x.iter().find(|&&sym| s.act.value(sym) as f32 == v).unwrap();
                *id
            })
            .collect();
        ensure_eq!(got.symbols(), &expect[..], "case {case}");
    }
    Ok(())
}

/// conv -> relu -> pool -> flatten -> linear -> relu over integer codebooks;
/// every lookup is exact, so diet logits equal float logits.
pub fn integer_closure() -> Result<(), String> {
    let act = Codebook::integers(64, CodebookKind::Activation).unwrap();
    let cf = Codebook::integers(8, CodebookKind::ConvFilter).unwrap();
    let ff = Codebook::integers(8, CodebookKind::FcFilter).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let int = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| rng.gen_range(lo..=hi) as f32;

    for trial in 0..20 {
        // conv(1->2, 2x2) -> relu -> pool 2 -> flatten -> linear(8->3) -> relu
        let conv = Conv2d {
            weight: Tensor::from_fn(&[2, 1, 2, 2], |_| int(&mut rng, -1, 1)),
            bias: Some(Tensor::from_fn(&[2], |_| int(&mut rng, -1, 1))),
            stride: 1,
            padding: 0,
        };
        let lin = Linear {
            weight: Tensor::from_fn(&[3, 8], |_| int(&mut rng, -1, 1)),
            bias: Some(Tensor::from_fn(&[3], |_| int(&mut rng, -1, 1))),
        };
        let model = ModelSpec::new(
            vec![
                LayerDef::Conv2d(conv),
                LayerDef::Relu,
                LayerDef::MaxPool2d(MaxPool2d {
                    window: 2,
                    stride: 2,
                }),
                LayerDef::Flatten,
                LayerDef::Linear(lin),
                LayerDef::Relu,
            ],
            [1, 5, 5],
            3,
        )
        .unwrap();
        let luts = build_luts(&act, &cf, &ff, &model).unwrap();
        let sym = transform_model(&model, &act, &cf, &ff, &luts, None).unwrap();
        for _ in 0..10 {
            let image = Tensor::from_fn(&[1, 1, 5, 5], |_| int(&mut rng, 0, 1));
            let float = model.forward(&image).unwrap();
            for order in [
                FoldOrder::ChannelMajorRaster,
                FoldOrder::ValueAscending,
                FoldOrder::RandomSeeded(trial),
            ] {
                let (diet, _) = diet_forward(&sym, &image, order).unwrap();
                ensure_eq!(diet.data(), float.data(), "trial {trial}, {order:?}");
            }
        }
    }
    Ok(())
}
