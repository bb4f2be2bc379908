use std::path::PathBuf;

use quantforge_core::archive::{load_calibration, load_model};
use quantforge_core::eval::{argmax_rows, top1};
use quantforge_core::{LayerKind, Precision};

fn fixture(part: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/tinycnn")
        .join(part)
}

#[test]
fn probe_logits_match_the_exporter() {
    let g = load_model(fixture("model")).unwrap();
    let probes = load_calibration(fixture("probes")).unwrap();
    let reference = load_calibration(fixture("probe_logits")).unwrap();
    let logits = g.forward(&probes.inputs, Precision::Full).unwrap();
    assert_eq!(probes.len(), 16);
    assert!(logits.max_abs_diff(&reference.inputs) <= 1e-4);
}

#[test]
fn full_precision_holdout_accuracy() {
    let g = load_model(fixture("model")).unwrap();
    let holdout = load_calibration(fixture("holdout")).unwrap();
    let labels: Vec<usize> = holdout
        .labels
        .as_ref()
        .unwrap()
        .iter()
        .map(|&l| l as usize)
        .collect();
    let logits = g.forward(&holdout.inputs, Precision::Full).unwrap();
    assert!(top1(&logits, &labels) >= 0.9);
}

#[test]
fn layout_and_calibration_set() {
    let g = load_model(fixture("model")).unwrap();
    assert_eq!(g.nodes.len(), 10);
    assert_eq!(g.weight_layers(), vec!["conv1", "conv2", "fc"]);
    let params: usize = g
        .nodes
        .iter()
        .flat_map(|n| n.params.values())
        .map(|t| t.numel())
        .sum();
    assert!((40_000..60_000).contains(&params), "{params}");
    let calib = load_calibration(fixture("calib")).unwrap();
    assert_eq!(calib.len(), 256);
    let labels = calib.labels.unwrap();
    for class in 0..10 {
        let n = labels.iter().filter(|&&l| l == class).count();
        assert!((25..=26).contains(&n), "class {class}: {n}");
    }
}

#[test]
fn fused_model_agrees_with_the_original() {
    let g = load_model(fixture("model")).unwrap();
    let fused = g.fuse_conv_bn().unwrap();
    assert!(fused
        .nodes
        .iter()
        .all(|n| !matches!(n.kind, LayerKind::BatchNorm2d { .. })));
    let holdout = load_calibration(fixture("holdout")).unwrap();
    let a = g.forward(&holdout.inputs, Precision::Full).unwrap();
    let b = fused.forward(&holdout.inputs, Precision::Full).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-4);
    assert_eq!(argmax_rows(&a), argmax_rows(&b));
}
