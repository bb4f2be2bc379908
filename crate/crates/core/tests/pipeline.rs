use std::path::PathBuf;

use quantforge_core::adaquant::{adaquant_parallel, apply_results, AdaQuantConfig};
use quantforge_core::allocator::{BitChoice, BitConfig};
use quantforge_core::archive::{load_calibration, load_model};
use quantforge_core::bias_tune::{bias_tune, BiasTuneConfig};
use quantforge_core::bn_tune::{reconstruct_bn, refuse_bn, tune_bn, BnTuneConfig};
use quantforge_core::eval::{kd_loss, EVAL_CHUNK};
use quantforge_core::pipeline::{run_targets, AllocationTarget, PipelineConfig};
use quantforge_core::qmodel::{quantize_model, RangeInit};
use quantforge_core::{CalibrationSet, ModelGraph, Precision};

fn fixture() -> (ModelGraph, CalibrationSet) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tinycnn");
    (
        load_model(root.join("model")).unwrap(),
        load_calibration(root.join("calib")).unwrap(),
    )
}

fn calib_kd(q: &ModelGraph, fp: &ModelGraph, calib: &CalibrationSet) -> f64 {
    let t = fp
        .forward_batched(&calib.inputs, Precision::Full, EVAL_CHUNK)
        .unwrap();
    let s = q
        .forward_batched(&calib.inputs, Precision::Quantized, EVAL_CHUNK)
        .unwrap();
    kd_loss(&t, &s).unwrap()
}

#[test]
fn bn_tuning_at_four_bits_does_not_raise_the_loss() {
    let (g, calib) = fixture();
    let fp = g.fuse_conv_bn().unwrap();
    let cfg = BitConfig::uniform(&fp, BitChoice::uniform(4));
    let q = quantize_model(&fp, &calib.inputs, &cfg, RangeInit::MinMax).unwrap();
    let tuned = refuse_bn(
        &tune_bn(
            &reconstruct_bn(&q).unwrap(),
            &calib.inputs,
            &BnTuneConfig::default(),
        )
        .unwrap(),
    )
    .unwrap();
    let before = calib_kd(&q, &fp, &calib);
    let after = calib_kd(&tuned, &fp, &calib);
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn bias_tuning_after_adaquant_lowers_the_loss() {
    let (g, calib) = fixture();
    let cfg = PipelineConfig {
        exempt_first_last: false,
        bias_tuning: false,
        ..PipelineConfig::advanced()
    };
    let (q, _) = run_targets(&g, &calib, None, &cfg, &[AllocationTarget::Ratio(0.125)])
        .unwrap()
        .remove(0);
    let fp = g.fuse_conv_bn().unwrap();
    let r = bias_tune(&q, &fp, &calib.inputs, &BiasTuneConfig::default()).unwrap();
    assert!(
        r.final_loss < r.initial_loss,
        "{} vs {}",
        r.final_loss,
        r.initial_loss
    );
}

#[test]
fn advanced_beats_light_at_every_ratio() {
    let (g, calib) = fixture();
    let targets = [
        AllocationTarget::Ratio(0.25),
        AllocationTarget::Ratio(0.16),
        AllocationTarget::Ratio(0.11),
    ];
    let light = PipelineConfig {
        low_bits: vec![2, 4, 8],
        ..PipelineConfig::light()
    };
    let advanced = PipelineConfig {
        mode: quantforge_core::pipeline::PipelineMode::Advanced,
        ..light.clone()
    };
    let l = run_targets(&g, &calib, None, &light, &targets).unwrap();
    let a = run_targets(&g, &calib, None, &advanced, &targets).unwrap();
    let mut ratios = Vec::new();
    for ((_, lr), (_, ar)) in l.iter().zip(&a) {
        assert_eq!(
            lr.config, ar.config,
            "the two modes picked different allocations"
        );
        assert!(
            ar.calibration.loss <= lr.calibration.loss,
            "ratio {}: advanced {} > light {}",
            ar.compression_ratio,
            ar.calibration.loss,
            lr.calibration.loss
        );
        ratios.push(ar.compression_ratio);
    }
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
}

#[test]
fn parallel_adaquant_beats_min_max_round_to_nearest() {
    let (g, calib) = fixture();
    let fp = g.fuse_conv_bn().unwrap();
    let bits = BitConfig::uniform(&fp, BitChoice::uniform(4));
    let rtn = quantize_model(&fp, &calib.inputs, &bits, RangeInit::MinMax).unwrap();
    let results = adaquant_parallel(&fp, &calib.inputs, &bits, &AdaQuantConfig::default()).unwrap();
    let tuned = apply_results(&fp, &results).unwrap();
    let (before, after) = (calib_kd(&rtn, &fp, &calib), calib_kd(&tuned, &fp, &calib));
    assert!(after < before, "{after} vs {before}");
}
