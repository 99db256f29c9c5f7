//! Analytic gradients against central finite differences.

use dietcnn::model::LayerDef;
use dietcnn::tensor::{Conv2d, Linear, MaxPool2d};
use dietcnn::trainer::{batch_loss, gradients};
use dietcnn::{ModelSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn with_param(model: &ModelSpec, layer: usize, bias: bool, idx: usize, delta: f64) -> ModelSpec {
    let mut layers = model.layers().to_vec();
    let t = match &mut layers[layer] {
        LayerDef::Conv2d(c) if bias => c.bias.as_mut().unwrap(),
        LayerDef::Conv2d(c) => &mut c.weight,
        LayerDef::Linear(l) if bias => l.bias.as_mut().unwrap(),
        LayerDef::Linear(l) => &mut l.weight,
        _ => unreachable!(),
    };
    t.data_mut()[idx] = (t.data()[idx] as f64 + delta) as f32;
    ModelSpec::new(layers, model.input_shape(), model.class_count()).unwrap()
}

/// Largest relative error over every parameter of the network.
/// `eps` trades f32 rounding in the loss against truncation error and
/// against flipping a pooling argmax.
fn check(model: &ModelSpec, images: &Tensor, labels: &[u8], eps: f64) -> f64 {
    let (_, grads) = gradients(model, images, labels).unwrap();
    let mut worst: f64 = 0.0;
    for (li, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        let mut params: Vec<(bool, usize, f64)> = g
            .weight
            .iter()
            .enumerate()
            .map(|(i, &v)| (false, i, v))
            .collect();
        if let Some(b) = &g.bias {
            params.extend(b.iter().enumerate().map(|(i, &v)| (true, i, v)));
        }
        for (is_bias, i, analytic) in params {
            // perturb by an exactly representable step
            let base = match &model.layers()[li] {
                LayerDef::Conv2d(c) if is_bias => c.bias.as_ref().unwrap().data()[i],
                LayerDef::Conv2d(c) => c.weight.data()[i],
                LayerDef::Linear(l) if is_bias => l.bias.as_ref().unwrap().data()[i],
                LayerDef::Linear(l) => l.weight.data()[i],
                _ => unreachable!(),
            } as f64;
            let up = ((base + eps) as f32) as f64 - base;
            let down = ((base - eps) as f32) as f64 - base;
            let lp = batch_loss(&with_param(model, li, is_bias, i, up), images, labels).unwrap();
            let lm = batch_loss(&with_param(model, li, is_bias, i, down), images, labels).unwrap();
            let numeric = (lp - lm) / (up - down);
            let scale = analytic.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn conv(
    rng: &mut ChaCha8Rng,
    oc: usize,
    c: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> LayerDef {
    LayerDef::Conv2d(Conv2d {
        weight: rand_tensor(rng, &[oc, c, k, k], 0.8),
        bias: Some(rand_tensor(rng, &[oc], 0.3)),
        stride,
        padding,
    })
}

fn linear(rng: &mut ChaCha8Rng, o: usize, i: usize) -> LayerDef {
    LayerDef::Linear(Linear {
        weight: rand_tensor(rng, &[o, i], 0.8),
        bias: Some(rand_tensor(rng, &[o], 0.3)),
    })
}

fn batch(rng: &mut ChaCha8Rng, shape: [usize; 3], n: usize, classes: u8) -> (Tensor, Vec<u8>) {
    let [c, h, w] = shape;
    let images = rand_tensor(rng, &[n, c, h, w], 1.0);
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (images, labels)
}

/// Largest relative error over all parameters.
pub fn conv_sigmoid_pool_linear() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ModelSpec::new(
        vec![
            conv(&mut rng, 3, 2, 3, 1, 1),
            LayerDef::Sigmoid,
            LayerDef::MaxPool2d(MaxPool2d {
                window: 2,
                stride: 2,
            }),
            LayerDef::Flatten,
            linear(&mut rng, 4, 3 * 3 * 3),
        ],
        [2, 6, 6],
        4,
    )
    .unwrap();
    let (x, y) = batch(&mut rng, [2, 6, 6], 3, 4);
    check(&model, &x, &y, 1e-2)
}

/// Largest relative error over all parameters.
pub fn strided_conv_relu_stack() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = ModelSpec::new(
        vec![
            conv(&mut rng, 3, 1, 3, 2, 1),
            LayerDef::Relu,
            conv(&mut rng, 2, 3, 2, 1, 0),
            LayerDef::Flatten,
            linear(&mut rng, 5, 2 * 3 * 3),
            LayerDef::Relu,
            linear(&mut rng, 3, 5),
        ],
        [1, 7, 7],
        3,
    )
    .unwrap();
    let (x, y) = batch(&mut rng, [1, 7, 7], 4, 3);
    check(&model, &x, &y, 1e-2)
}

/// Largest relative error over all parameters.
pub fn overlapping_pool() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = ModelSpec::new(
        vec![
            conv(&mut rng, 2, 1, 2, 1, 0),
            LayerDef::MaxPool2d(MaxPool2d {
                window: 3,
                stride: 1,
            }),
            LayerDef::Flatten,
            linear(&mut rng, 3, 2 * 3 * 3),
        ],
        [1, 6, 6],
        3,
    )
    .unwrap();
    let (x, y) = batch(&mut rng, [1, 6, 6], 3, 3);
    check(&model, &x, &y, 3e-3)
}
