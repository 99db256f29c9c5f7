use dietcnn::analysis::footprint;
use dietcnn::codebook::{Codebook, CodebookKind};
use dietcnn::model::{lenet5, vgg11, Activation, Init};
use dietcnn::{build_luts, transform_model, ModelSpec};

fn spread(k: usize, lo: f64, hi: f64, kind: CodebookKind) -> Codebook {
    let step = (hi - lo) / (k - 1) as f64;
    Codebook::new((0..k).map(|i| lo + step * i as f64).collect(), kind)
        .unwrap()
        .with_zero()
}

/// (diet bytes, float bytes) at 512/256/32 with evenly spread codebooks.
fn bytes(model: &ModelSpec) -> (u64, u64) {
    let act = spread(512, -8.0, 8.0, CodebookKind::Activation);
    let conv = spread(256, -0.5, 0.5, CodebookKind::ConvFilter);
    let fc = spread(32, -0.5, 0.5, CodebookKind::FcFilter);
    let luts = build_luts(&act, &conv, &fc, model).unwrap();
    let sym = transform_model(model, &act, &conv, &fc, &luts, None).unwrap();
    let r = footprint(model, &sym);
    (r.diet_bytes, r.float_bytes)
}

#[test]
fn vgg11_diet_is_smaller_than_float() {
    let (diet, float) = bytes(&vgg11(Init::FanInUniform { seed: 0 }));
    // 9,225,610 parameters at 4 bytes
    assert_eq!(float, 36_902_440);
    assert!(diet < float, "{diet} >= {float}");
}

#[test]
fn lenet5_tables_outweigh_its_weights() {
    // The 512x512 add table alone (512 KiB at 2-byte symbols) is larger
    // than LeNet-5's 61,706 float parameters.
    let (diet, float) = bytes(&lenet5(Init::FanInUniform { seed: 0 }, Activation::Relu));
    assert_eq!(float, 61_706 * 4);
    assert!(diet > float, "{diet} <= {float}");
}
