//! The light pipeline must not run a single backward kernel. This binary
//! holds one test so that no concurrent test can touch the global counter.

use std::path::PathBuf;

use quantforge_core::archive::{load_calibration, load_model};
use quantforge_core::layers::backward_calls;
use quantforge_core::pipeline::{run_light, PipelineConfig};

#[test]
fn light_pipeline_runs_no_backward_pass() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tinycnn");
    let g = load_model(root.join("model")).unwrap();
    let calib = load_calibration(root.join("calib")).unwrap();
    let before = backward_calls();
    let (_, report) = run_light(&g, &calib, None, &PipelineConfig::light()).unwrap();
    assert_eq!(backward_calls(), before);
    assert_eq!(report.backward_passes, 0);
    assert!(report.bn_tuning.is_some());
}
