use dietcnn::analysis::{count_lookups, count_lookups_for};
use dietcnn::codebook::{Codebook, CodebookKind};
use dietcnn::model::{vgg11, vgg11_diet_layout, Init};
use dietcnn::{build_luts, diet_forward, transform_model, FoldOrder, Tensor};

#[test]
fn vgg_diet_trace_matches_counted_lookups() {
    let model = vgg11(Init::FanInUniform { seed: 1 });
    let layout = vgg11_diet_layout(&model);
    let act = Codebook::new(vec![-1.0, -0.25, 0.0, 0.25, 1.0], CodebookKind::Activation).unwrap();
    let cf = Codebook::new(vec![-0.1, 0.0, 0.1], CodebookKind::ConvFilter).unwrap();
    let ff = Codebook::new(vec![-0.1, 0.1], CodebookKind::FcFilter).unwrap();
    let luts = build_luts(&act, &cf, &ff, &model).unwrap();
    let sym = transform_model(&model, &act, &cf, &ff, &luts, Some(&layout)).unwrap();
    assert!(sym.is_diet_variant());

    let image = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i % 7) as f32 - 3.0) / 4.0);
    let (logits, trace) = diet_forward(&sym, &image, FoldOrder::default()).unwrap();
    assert_eq!(logits.shape(), &[1, 10]);

    let counted = count_lookups(&sym, 1).unwrap();
    assert_eq!(counted.total, 236_692_160);
    assert_eq!(trace.mul_lookups(), counted.total);
    assert_eq!(trace.add_lookups(), counted.total);
    assert_eq!(
        trace.mul_lookups() + trace.add_lookups(),
        counted.final_total
    );
    // same per layer
    let per_layer: Vec<u64> = trace
        .layers
        .iter()
        .filter(|l| l.mul_lookups > 0)
        .map(|l| l.mul_lookups)
        .collect();
    let rows: Vec<u64> = counted.rows.iter().map(|r| r.count).collect();
    assert_eq!(per_layer, rows);
    // and the count from the float graph with the layout applied agrees
    let from_spec = count_lookups_for(&model.with_layout(&layout).unwrap(), 1).unwrap();
    assert_eq!(from_spec.total, counted.total);
    // one bias lookup per conv/linear output, no pooling in the diet layout
    assert_eq!(trace.pool_lookups(), 0);
    assert!(trace.bias_lookups() > 0);
}
