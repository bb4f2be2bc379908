//! `quantforge` command-line front end: layerwise calibration, bit
//! allocation, batch-norm and bias tuning, and the end-to-end pipelines,
//! all reading and writing tensor archives.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use quantforge_core::adaquant::{
    adaquant_parallel, adaquant_sequential, apply_results, AdaQuantConfig,
};
use quantforge_core::allocator::{
    solve_ip, solve_ip_for_ratio, BitChoice, BitConfig, SensitivityTable,
};
use quantforge_core::archive::{load_calibration, load_model, save_model};
use quantforge_core::bias_tune::{bias_tune, BiasTuneConfig};
use quantforge_core::bn_tune::{reconstruct_bn, refuse_bn, tune_bn, BnTuneConfig};
use quantforge_core::eval::{evaluate_layers, EVAL_CHUNK};
use quantforge_core::pipeline::{self, AllocationTarget, PipelineConfig, PipelineMode, SEED_ENV};
use quantforge_core::qmodel::{quantize_model, RangeInit};
use quantforge_core::{CalibrationSet, ModelGraph, Precision};

#[derive(Parser)]
#[command(
    name = "quantforge",
    version,
    about = "Post-training quantization with mixed precision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layerwise calibration (AdaQuant) of every conv/fc layer.
    Adaquant(AdaquantArgs),
    /// Measure per-layer sensitivity and write it as a CSV table.
    Profile(ProfileArgs),
    /// Solve for a bit configuration from a sensitivity table.
    Allocate(AllocateArgs),
    /// Round-to-nearest quantization with min-max or MSE ranges.
    Quantize(QuantizeArgs),
    /// Re-estimate batch-norm statistics of a fused quantized model.
    BnTune(BnTuneArgs),
    /// Tune the biases of a quantized model against a full-precision teacher.
    BiasTune(BiasTuneArgs),
    /// Run the light or advanced pipeline end to end.
    Pipeline(PipelineArgs),
    /// Report loss, accuracy and per-layer error of a model.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibMode {
    Parallel,
    Sequential,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Light,
    Advanced,
}

impl From<Mode> for PipelineMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Light => PipelineMode::Light,
            Mode::Advanced => PipelineMode::Advanced,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Minmax,
    Mse,
}

impl From<Init> for RangeInit {
    fn from(i: Init) -> Self {
        match i {
            Init::Minmax => RangeInit::MinMax,
            Init::Mse => RangeInit::Mse,
        }
    }
}

#[derive(Args)]
struct AdaquantArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Bit configuration JSON (`{"layer": [k, n], ...}`) or one bit-width for every layer.
    #[arg(long)]
    bits: String,
    #[arg(long, value_enum, default_value = "parallel")]
    mode: CalibMode,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<Init>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-layer MSE report; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, value_enum, default_value = "light")]
    mode: Mode,
    /// Candidate bit-widths, e.g. `4,8` or `2..8`.
    #[arg(long, default_value = "4,8")]
    bits: String,
    #[arg(long, default_value_t = 8)]
    base_bits: u32,
    /// Profile the first and last conv/fc layers too.
    #[arg(long)]
    no_exempt: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["budget", "target_ratio"])))]
struct AllocateArgs {
    #[arg(long)]
    table: PathBuf,
    /// Largest allowed sum of per-layer loss increases.
    #[arg(long)]
    budget: Option<f64>,
    /// Largest allowed compression ratio (quantized weight bits over 32-bit).
    #[arg(long)]
    target_ratio: Option<f64>,
    /// Allowed bit-widths, e.g. `4,8` or `2..8`; the table's base is always allowed.
    #[arg(long, default_value = "4,8")]
    bits: String,
    /// Model archive supplying parameter counts; otherwise they are inferred
    /// from the table's parameter-bit gains.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Bit configuration JSON output; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Bit configuration JSON or one bit-width for every layer.
    #[arg(long)]
    bits: String,
    #[arg(long, value_enum, default_value = "minmax")]
    init: Init,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BnTuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    momentum: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BiasTuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("target").args(["budget", "target_ratio"])))]
struct PipelineArgs {
    #[arg(long, value_enum, default_value = "light")]
    mode: Mode,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Labeled held-out set for accuracy reporting.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Target compression ratio (default 0.125).
    #[arg(long)]
    target_ratio: Option<f64>,
    #[arg(long)]
    budget: Option<f64>,
    /// Allow every bit-width from 2 to 8 instead of {4, 8}.
    #[arg(long)]
    relaxed_bits: bool,
    /// Candidate bit-widths, e.g. `4,8` or `2..8`.
    #[arg(long, conflicts_with = "relaxed_bits")]
    bits: Option<String>,
    /// Full pipeline configuration JSON; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_exempt: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report; per-layer and sweep CSVs are written next to it.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Full-precision reference; the model's own full-precision pass otherwise.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("quantforge: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Adaquant(a) => cmd_adaquant(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Allocate(a) => cmd_allocate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::BnTune(a) => cmd_bn_tune(a),
        Command::BiasTune(a) => cmd_bias_tune(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn model(path: &Path) -> Result<ModelGraph> {
    load_model(path).with_context(|| format!("loading model archive {}", path.display()))
}

fn calibration(path: &Path) -> Result<CalibrationSet> {
    load_calibration(path)
        .with_context(|| format!("loading calibration archive {}", path.display()))
}

fn save(g: &ModelGraph, path: &Path) -> Result<()> {
    save_model(g, path).with_context(|| format!("writing model archive {}", path.display()))
}

/// `QUANTFORGE_SEED` wins over `--seed`, which wins over `default`.
fn seed(flag: Option<u64>, default: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got `{v}`")),
        Err(_) => Ok(flag.unwrap_or(default)),
    }
}

/// Parses `4,8`, `2..8` (inclusive) or combinations such as `2..4,8`.
fn parse_bits(spec: &str) -> Result<Vec<u32>> {
    let mut bits = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((lo, hi)) => {
                let lo: u32 = lo
                    .trim()
                    .parse()
                    .with_context(|| format!("bad bit range `{part}`"))?;
                let hi: u32 = hi
                    .trim_start_matches('=')
                    .trim()
                    .parse()
                    .with_context(|| format!("bad bit range `{part}`"))?;
                if lo > hi {
                    bail!("empty bit range `{part}`");
                }
                bits.extend(lo..=hi);
            }
            None => bits.push(
                part.parse()
                    .with_context(|| format!("bad bit-width `{part}`"))?,
            ),
        }
    }
    if bits.is_empty() {
        bail!("no bit-widths given");
    }
    bits.sort_unstable();
    bits.dedup();
    Ok(bits)
}

/// A bit configuration file, or one bit-width applied to every layer of `g`.
fn bit_config(spec: &str, g: &ModelGraph) -> Result<BitConfig> {
    let cfg = match spec.parse::<u32>() {
        Ok(b) => BitConfig::uniform(g, BitChoice::uniform(b)),
        Err(_) => {
            let text = fs::read_to_string(spec)
                .with_context(|| format!("reading bit configuration {spec}"))?;
            BitConfig::from_json(&text)
                .with_context(|| format!("parsing bit configuration {spec}"))?
        }
    };
    cfg.check_covers(g)?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn teacher_outputs(fp: &ModelGraph, calib: &CalibrationSet) -> Result<quantforge_core::Tensor> {
    Ok(fp.forward_batched(&calib.inputs, Precision::Full, EVAL_CHUNK)?)
}

fn cmd_adaquant(a: AdaquantArgs) -> Result<()> {
    let fp = model(&a.model)?.fuse_conv_bn()?;
    let calib = calibration(&a.calib)?;
    let bits = bit_config(&a.bits, &fp)?;
    let defaults = AdaQuantConfig::default();
    let cfg = AdaQuantConfig {
        iterations: a.iterations.unwrap_or(defaults.iterations),
        init: a.init.map(RangeInit::from).unwrap_or(defaults.init),
        seed: seed(a.seed, defaults.seed)?,
        ..defaults
    };
    let results = match a.mode {
        CalibMode::Parallel => adaquant_parallel(&fp, &calib.inputs, &bits, &cfg)?,
        CalibMode::Sequential => adaquant_sequential(&fp, &calib.inputs, &bits, &cfg)?,
    };
    let q = apply_results(&fp, &results)?;
    save(&q, &a.out)?;
    let mut w = output(a.report.as_deref())?;
    writeln!(
        w,
        "layer,weight_bits,act_bits,initial_mse,final_mse,best_iteration"
    )?;
    for r in &results {
        let b = r.bits();
        writeln!(
            w,
            "{},{},{},{:e},{:e},{}",
            r.layer, b.weight_bits, b.act_bits, r.initial_mse, r.final_mse, r.best_iteration
        )?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let cfg = PipelineConfig {
        mode: a.mode.into(),
        base_bits: a.base_bits,
        low_bits: parse_bits(&a.bits)?,
        exempt_first_last: !a.no_exempt,
        ..PipelineConfig::default()
    }
    .with_env_seed()?;
    let table = pipeline::profile(&model(&a.model)?, &calibration(&a.calib)?, &cfg)?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    table.write_csv(BufWriter::new(file))?;
    eprintln!(
        "reference loss {:e}, {} layers",
        table.reference_loss,
        table.layers.len()
    );
    Ok(())
}

fn cmd_allocate(a: AllocateArgs) -> Result<()> {
    let file = File::open(&a.table).with_context(|| format!("opening {}", a.table.display()))?;
    let mut table = SensitivityTable::read_csv(file)
        .with_context(|| format!("reading sensitivity table {}", a.table.display()))?
        .restricted(&parse_bits(&a.bits)?);
    let solution = match (a.budget, a.target_ratio) {
        (Some(b), _) => solve_ip(&table, b)?,
        (None, Some(r)) => {
            table = match &a.model {
                Some(m) => table.with_param_counts(&model(m)?.fuse_conv_bn()?)?,
                None => table.with_inferred_param_counts()?,
            };
            solve_ip_for_ratio(&table, r)?
        }
        (None, None) => unreachable!("clap requires a target"),
    };
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{}", solution.config.to_json()?)?;
    w.flush()?;
    let ratio = table
        .layers
        .iter()
        .all(|l| l.num_params.is_some())
        .then(|| table.ratio(&solution.config))
        .transpose()?;
    eprint!(
        "predicted loss increase {:e}, gain {}",
        solution.total_dloss, solution.total_dperf
    );
    match ratio {
        Some(r) => eprintln!(", compression ratio {r:.4}"),
        None => eprintln!(),
    }
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let fp = model(&a.model)?.fuse_conv_bn()?;
    let calib = calibration(&a.calib)?;
    let bits = bit_config(&a.bits, &fp)?;
    save(
        &quantize_model(&fp, &calib.inputs, &bits, a.init.into())?,
        &a.out,
    )
}

fn cmd_bn_tune(a: BnTuneArgs) -> Result<()> {
    let g = model(&a.model)?;
    let calib = calibration(&a.calib)?;
    let cfg = BnTuneConfig {
        iterations: a.iters,
        momentum: a.momentum,
    };
    let reconstructed = reconstruct_bn(&g)?;
    let count = reconstructed.nodes.len() - g.nodes.len();
    if count == 0 {
        bail!("model has no fused batch norms to tune");
    }
    save(
        &refuse_bn(&tune_bn(&reconstructed, &calib.inputs, &cfg)?)?,
        &a.out,
    )?;
    eprintln!("tuned {count} batch norms");
    Ok(())
}

fn cmd_bias_tune(a: BiasTuneArgs) -> Result<()> {
    let student = model(&a.model)?;
    let teacher = model(&a.teacher)?;
    let calib = calibration(&a.calib)?;
    let defaults = BiasTuneConfig::default();
    let cfg = BiasTuneConfig {
        iterations: a.iterations.unwrap_or(defaults.iterations),
        lr: a.lr.unwrap_or(defaults.lr),
        seed: seed(a.seed, defaults.seed)?,
        ..defaults
    };
    let r = bias_tune(&student, &teacher, &calib.inputs, &cfg)?;
    save(&r.graph, &a.out)?;
    println!(
        "initial_loss={:e} final_loss={:e} best_iteration={}",
        r.initial_loss, r.final_loss, r.best_iteration
    );
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing pipeline configuration {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    cfg.mode = a.mode.into();
    if a.relaxed_bits {
        cfg = cfg.relaxed();
    }
    if let Some(bits) = &a.bits {
        cfg.low_bits = parse_bits(bits)?;
    }
    if let Some(r) = a.target_ratio {
        cfg.target = AllocationTarget::Ratio(r);
    }
    if let Some(b) = a.budget {
        cfg.target = AllocationTarget::Budget(b);
    }
    if a.no_exempt {
        cfg.exempt_first_last = false;
    }
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    let cfg = cfg.with_env_seed()?;

    let g = model(&a.model)?;
    let calib = calibration(&a.calib)?;
    let holdout = a.holdout.as_deref().map(calibration).transpose()?;
    let (q, report) = pipeline::run(&g, &calib, holdout.as_ref(), &cfg)?;
    save(&q, &a.out)?;
    fs::write(&a.report, report.to_json()? + "\n")
        .with_context(|| format!("writing {}", a.report.display()))?;
    report.write_layers_csv(File::create(sibling(&a.report, "layers.csv"))?)?;
    report.write_sweep_csv(File::create(sibling(&a.report, "sweep.csv"))?)?;
    eprintln!(
        "compression ratio {:.4}, calibration loss {:e}{}",
        report.compression_ratio,
        report.calibration.loss,
        report
            .holdout
            .as_ref()
            .and_then(|h| h.top1)
            .map(|t| format!(", holdout top-1 {t:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let g = model(&a.model)?;
    let calib = calibration(&a.calib)?;
    let reference = a
        .teacher
        .as_deref()
        .map(|t| teacher_outputs(&model(t)?, &calib))
        .transpose()?;
    let report = evaluate_layers(&g, &calib, reference.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
