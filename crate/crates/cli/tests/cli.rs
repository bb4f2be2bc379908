use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quantforge_core::allocator::{BitChoice, BitConfig};
use quantforge_core::archive::{load_model, save_calibration, save_model};
use quantforge_core::layers::ConvSpec;
use quantforge_core::{CalibrationSet, LayerKind, LayerNode, ModelGraph, Precision, Tensor};
use tempfile::TempDir;

fn fixture(part: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/tinycnn")
        .join(part)
}

fn quantforge(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_quantforge"));
    cmd.args(args).env_remove("QUANTFORGE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn wave(shape: &[usize], phase: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (i as f32 * 0.37 + phase).sin() * 1.3 + (i as f32 * 0.11).cos() * 0.4)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// conv-bn-relu, flatten, fc on `[2, 4, 4]` inputs, plus a 64-row labeled set.
fn small_model(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = ConvSpec::new(2, 3, 3, 1, 1);
    let nodes = vec![
        LayerNode::new("conv", LayerKind::Conv2d, &["input"])
            .with_conv(spec)
            .with_param("weight", wave(&spec.weight_shape(), 0.1).scale(0.4))
            .with_param("bias", wave(&[3], 0.7).scale(0.1)),
        LayerNode::new("bn", LayerKind::BatchNorm2d { eps: 1e-5 }, &["conv"])
            .with_param("gamma", Tensor::new(vec![3], vec![1.2, 0.8, 1.0]).unwrap())
            .with_param("beta", Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap())
            .with_param("mean", Tensor::new(vec![3], vec![0.05, -0.1, 0.0]).unwrap())
            .with_param("var", Tensor::new(vec![3], vec![0.9, 1.1, 0.7]).unwrap()),
        LayerNode::new("relu", LayerKind::Relu, &["bn"]),
        LayerNode::new("flat", LayerKind::Flatten, &["relu"]),
        LayerNode::new("fc", LayerKind::Fc, &["flat"])
            .with_param("weight", wave(&[4, 48], 1.9).scale(0.2))
            .with_param("bias", wave(&[4], 2.3).scale(0.1)),
    ];
    let g = ModelGraph::new(vec![2, 4, 4], nodes, "fc").unwrap();
    let x = wave(&[64, 2, 4, 4], 0.0);
    let labels = quantforge_core::eval::argmax_rows(&g.forward(&x, Precision::Full).unwrap())
        .into_iter()
        .map(|l| l as i64)
        .collect();
    let model = dir.join("model");
    let calib = dir.join("calib");
    save_model(&g, &model).unwrap();
    save_calibration(&CalibrationSet::new(x, Some(labels)).unwrap(), &calib).unwrap();
    (model, calib)
}

#[test]
fn light_pipeline_on_the_fixture() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("report.json");
    let out = dir.path().join("q");
    let model = fixture("model");
    let calib = fixture("calib");
    let holdout = fixture("holdout");
    ok(&quantforge(
        &[
            "pipeline",
            "--mode",
            "light",
            "--model",
            s(&model),
            "--calib",
            s(&calib),
            "--holdout",
            s(&holdout),
            "--target-ratio",
            "0.125",
            "--report",
            s(&report),
            "--out",
            s(&out),
        ],
        &[],
    ));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["mode"], "light");
    assert_eq!(json["backward_passes"], 0);
    assert!(json["holdout"]["top1"].as_f64().unwrap() > 0.85);
    let layers = fs::read_to_string(dir.path().join("report.layers.csv")).unwrap();
    assert_eq!(layers.lines().count(), 4);
    assert!(fs::read_to_string(dir.path().join("report.sweep.csv"))
        .unwrap()
        .starts_with("budget,ratio"));
    let q = load_model(&out).unwrap();
    assert!(q.is_quantized());
    let ratio = json["compression_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio <= 0.25);
}

#[test]
fn seed_environment_variable_overrides_config_seeds() {
    let dir = TempDir::new().unwrap();
    let (model, calib) = small_model(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"adaquant": {"iterations": 20, "batch_size": 8}, "bias": {"iterations": 20, "batch_size": 8}}"#)
        .unwrap();
    let run = |name: &str, extra: &[&str], env: &[(&str, &str)]| -> Vec<u8> {
        let out = dir.path().join(name);
        let report = dir.path().join(format!("{name}.json"));
        let mut args = vec![
            "pipeline",
            "--mode",
            "advanced",
            "--model",
            s(&model),
            "--calib",
            s(&calib),
            "--config",
            s(&cfg),
            "--no-exempt",
            "--report",
            s(&report),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&quantforge(&args, env));
        fs::read(out.join("fc.weight.bin")).unwrap()
    };
    let a = run("a", &[], &[("QUANTFORGE_SEED", "1")]);
    let b = run("b", &["--seed", "7"], &[("QUANTFORGE_SEED", "1")]);
    let c = run("c", &["--seed", "1"], &[]);
    let d = run("d", &[], &[("QUANTFORGE_SEED", "2")]);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_ne!(a, d);

    let out = quantforge(
        &[
            "pipeline",
            "--model",
            s(&model),
            "--calib",
            s(&calib),
            "--report",
            "r.json",
            "--out",
            "o",
        ],
        &[("QUANTFORGE_SEED", "abc")],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("QUANTFORGE_SEED"));
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope");
    let out = quantforge(
        &[
            "pipeline",
            "--model",
            s(&missing),
            "--calib",
            s(&missing),
            "--report",
            "r.json",
            "--out",
            "o",
        ],
        &[],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error") && err.contains("nope"), "{err}");

    let (model, calib) = small_model(dir.path());
    let out = quantforge(
        &[
            "pipeline",
            "--model",
            s(&model),
            "--calib",
            s(&calib),
            "--target-ratio",
            "0",
            "--report",
            s(&dir.path().join("r.json")),
            "--out",
            s(&dir.path().join("o")),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));
}

#[test]
fn profile_then_allocate() {
    let dir = TempDir::new().unwrap();
    let (model, calib) = small_model(dir.path());
    let table = dir.path().join("table.csv");
    ok(&quantforge(
        &[
            "profile",
            "--model",
            s(&model),
            "--calib",
            s(&calib),
            "--bits",
            "2..8",
            "--no-exempt",
            "--out",
            s(&table),
        ],
        &[],
    ));
    let text = fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("layer,k,n,dloss,dperf\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 7);

    let cfg: BitConfig = serde_json::from_str(&ok(&quantforge(
        &[
            "allocate",
            "--table",
            s(&table),
            "--budget",
            "0",
            "--bits",
            "4,8",
        ],
        &[],
    )))
    .unwrap();
    let g = load_model(&model).unwrap();
    assert_eq!(cfg, BitConfig::uniform(&g, BitChoice::uniform(8)));

    let path = dir.path().join("cfg.json");
    let out = quantforge(
        &[
            "allocate",
            "--table",
            s(&table),
            "--target-ratio",
            "0.0625",
            "--bits",
            "2..8",
            "--out",
            s(&path),
        ],
        &[],
    );
    ok(&out);
    let cfg = BitConfig::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
    let ratio = quantforge_core::allocator::compression_ratio(&g, &cfg).unwrap();
    assert!(ratio <= 0.0625 + 1e-12, "{ratio}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("compression ratio"));

    let out = quantforge(&["allocate", "--table", s(&table)], &[]);
    assert!(!out.status.success());
}

#[test]
fn layerwise_and_tuning_commands() {
    let dir = TempDir::new().unwrap();
    let (model, calib) = small_model(dir.path());
    let p = |name: &str| dir.path().join(name);

    for mode in ["parallel", "sequential"] {
        let report = ok(&quantforge(
            &[
                "adaquant",
                "--model",
                s(&model),
                "--calib",
                s(&calib),
                "--bits",
                "4",
                "--mode",
                mode,
                "--iterations",
                "30",
                "--out",
                s(&p(mode)),
            ],
            &[],
        ));
        let rows: Vec<&str> = report.lines().collect();
        assert_eq!(
            rows[0],
            "layer,weight_bits,act_bits,initial_mse,final_mse,best_iteration"
        );
        assert_eq!(rows.len(), 3);
        for row in &rows[1..] {
            let f: Vec<&str> = row.split(',').collect();
            assert!(
                f[4].parse::<f64>().unwrap() <= f[3].parse::<f64>().unwrap(),
                "{row}"
            );
        }
    }
    assert!(load_model(p("parallel")).unwrap().is_quantized());

    let bits = p("bits.json");
    fs::write(&bits, r#"{"conv": [4, 8], "fc": [8, 8]}"#).unwrap();
    ok(&quantforge(
        &[
            "quantize",
            "--model",
            s(&model),
            "--calib",
            s(&calib),
            "--bits",
            s(&bits),
            "--out",
            s(&p("rtn")),
        ],
        &[],
    ));
    let rtn = load_model(p("rtn")).unwrap();
    assert_eq!(
        rtn.node("conv").unwrap().quant.as_ref().unwrap().bits(),
        (4, 8)
    );

    ok(&quantforge(
        &[
            "bn-tune",
            "--model",
            s(&p("rtn")),
            "--calib",
            s(&calib),
            "--iters",
            "10",
            "--out",
            s(&p("bn")),
        ],
        &[],
    ));
    let tuned = load_model(p("bn")).unwrap();
    assert_eq!(tuned.nodes.len(), rtn.nodes.len());
    assert_ne!(
        tuned.node("conv").unwrap().weight().unwrap(),
        rtn.node("conv").unwrap().weight().unwrap()
    );

    let out = quantforge(
        &[
            "bn-tune",
            "--model",
            s(&model),
            "--calib",
            s(&calib),
            "--out",
            s(&p("x")),
        ],
        &[],
    );
    assert!(!out.status.success());

    let teacher = p("teacher");
    save_model(
        &load_model(&model).unwrap().fuse_conv_bn().unwrap(),
        &teacher,
    )
    .unwrap();
    let line = ok(&quantforge(
        &[
            "bias-tune",
            "--model",
            s(&p("bn")),
            "--teacher",
            s(&teacher),
            "--calib",
            s(&calib),
            "--iterations",
            "50",
            "--out",
            s(&p("bias")),
        ],
        &[],
    ));
    let field = |name: &str| -> f64 {
        line.split_whitespace()
            .find_map(|kv| kv.strip_prefix(&format!("{name}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(field("final_loss") <= field("initial_loss"));

    let metrics: serde_json::Value = serde_json::from_str(&ok(&quantforge(
        &[
            "evaluate",
            "--model",
            s(&p("bias")),
            "--calib",
            s(&calib),
            "--teacher",
            s(&teacher),
        ],
        &[],
    )))
    .unwrap();
    assert!((metrics["loss"].as_f64().unwrap() - field("final_loss")).abs() < 1e-9);
    assert_eq!(metrics["per_layer"].as_array().unwrap().len(), 2);
}
