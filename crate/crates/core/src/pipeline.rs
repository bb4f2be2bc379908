//! End-to-end flows: the backprop-free "light" pipeline (min-max init, bit
//! allocation, batch-norm tuning) and the "advanced" pipeline that adds
//! layerwise calibration and bias tuning.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaquant::{adaquant_bank, AdaQuantConfig};
use crate::allocator::{
    compression_ratio, profile_sensitivity, solve_ip, solve_ip_for_ratio, solve_ip_sweep,
    BitChoice, BitConfig, ParamBits, ProfileOptions, SensitivityTable, Solution,
};
use crate::bias_tune::{bias_tune, BiasTuneConfig};
use crate::bn_tune::{reconstruct_bn, refuse_bn, tune_bn, BnTuneConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, EVAL_CHUNK};
use crate::graph::{CalibrationSet, ModelGraph, Precision};
use crate::layers::backward_calls;
use crate::qmodel::{collect_layer_io, recalibrate_activations, LayerBank, RangeInit};
use crate::quant::PASSTHROUGH_BITS;

/// Environment variable that replaces every seed of a pipeline run.
pub const SEED_ENV: &str = "QUANTFORGE_SEED";

/// Number of loss budgets in the report's compression sweep.
const SWEEP_POINTS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Light,
    Advanced,
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(Self::Light),
            "advanced" => Ok(Self::Advanced),
            other => Err(Error::Config(format!("unknown pipeline mode `{other}`"))),
        }
    }
}

/// What the bit allocator is asked for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationTarget {
    /// Largest allowed sum of per-layer loss increases.
    Budget(f64),
    /// Largest allowed compression ratio (quantized bits over 32-bit bits).
    Ratio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub base_bits: u32,
    /// Candidate bit-widths; each is used for both weights and activations.
    pub low_bits: Vec<u32>,
    pub target: AllocationTarget,
    /// Keep the first and last conv/fc layers at the base precision.
    pub exempt_first_last: bool,
    pub bn_tuning: bool,
    /// Discard the tuned batch norms when they raise the calibration loss.
    pub bn_guard: bool,
    /// Re-derive activation ranges with one min-max pass after batch-norm tuning.
    pub recalibrate_activations: bool,
    pub bias_tuning: bool,
    pub seed: u64,
    pub adaquant: AdaQuantConfig,
    pub bn: BnTuneConfig,
    pub bias: BiasTuneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Light,
            base_bits: 8,
            low_bits: vec![4, 8],
            target: AllocationTarget::Ratio(0.125),
            exempt_first_last: true,
            bn_tuning: true,
            bn_guard: true,
            recalibrate_activations: false,
            bias_tuning: true,
            seed: 0,
            adaquant: AdaQuantConfig::default(),
            bn: BnTuneConfig::default(),
            bias: BiasTuneConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn light() -> Self {
        Self::default()
    }

    pub fn advanced() -> Self {
        Self {
            mode: PipelineMode::Advanced,
            ..Self::default()
        }
    }

    /// Allows every bit-width from 2 to 8.
    pub fn relaxed(mut self) -> Self {
        self.low_bits = (2..=8).collect();
        self
    }

    /// Sets the pipeline seed and the seeds of every sub-configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.adaquant.seed = seed;
        self.bias.seed = seed;
        self
    }

    /// Applies [`SEED_ENV`] when it is set.
    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v.trim().parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
                })?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.base_bits == PASSTHROUGH_BITS && self.low_bits.iter().all(|&b| b == PASSTHROUGH_BITS)
    }

    pub fn validate(&self) -> Result<()> {
        let valid = |b: u32| b == PASSTHROUGH_BITS || (2..=8).contains(&b);
        if !valid(self.base_bits) {
            return Err(Error::Config(format!(
                "unsupported base bit-width {}",
                self.base_bits
            )));
        }
        if self.low_bits.is_empty() {
            return Err(Error::Config("no candidate bit-widths".into()));
        }
        if let Some(b) = self
            .low_bits
            .iter()
            .find(|&&b| !valid(b) || b > self.base_bits)
        {
            return Err(Error::Config(format!(
                "candidate bit-width {b} is unsupported or above the base {}",
                self.base_bits
            )));
        }
        match self.target {
            AllocationTarget::Budget(b) if !(b >= 0.0) => {
                return Err(Error::Config(format!(
                    "loss budget must be non-negative, got {b}"
                )));
            }
            AllocationTarget::Ratio(r) if !(r > 0.0) => {
                return Err(Error::Config(format!(
                    "target ratio must be positive, got {r}"
                )));
            }
            _ => {}
        }
        self.bn.validate()?;
        self.bias.validate()?;
        if self.mode == PipelineMode::Advanced {
            self.adaquant.validate()?;
        }
        Ok(())
    }

    fn base(&self) -> BitChoice {
        BitChoice::uniform(self.base_bits)
    }

    fn choices(&self) -> Vec<BitChoice> {
        let mut bits = self.low_bits.clone();
        bits.push(self.base_bits);
        bits.sort_unstable();
        bits.dedup();
        bits.into_iter().rev().map(BitChoice::uniform).collect()
    }

    fn exempt(&self, g: &ModelGraph) -> Vec<String> {
        let layers = g.weight_layers();
        match (self.exempt_first_last, layers.first(), layers.last()) {
            (true, Some(first), Some(last)) => {
                let mut v = vec![first.clone(), last.clone()];
                v.dedup();
                v
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub params: usize,
    pub dloss: f64,
    pub dperf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub budget: f64,
    pub ratio: f64,
    pub predicted_dloss: f64,
    pub dperf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningReport {
    pub initial_loss: f64,
    /// Loss of the tuned model, whether or not it was kept.
    pub final_loss: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub mode: PipelineMode,
    pub target: AllocationTarget,
    pub base_bits: u32,
    pub low_bits: Vec<u32>,
    pub exempt: Vec<String>,
    pub compression_ratio: f64,
    pub predicted_dloss: f64,
    pub dperf: f64,
    pub reference_loss: f64,
    pub layers: Vec<LayerReport>,
    /// Loss budget → allocation on the sensitivity table, plot-ready.
    pub sweep: Vec<SweepRow>,
    /// Distillation loss right after stitching the allocated layers.
    pub stitched_loss: f64,
    pub bn_tuning: Option<TuningReport>,
    pub bias_tuning: Option<TuningReport>,
    /// Calibration-set metrics of the final model against the full-precision teacher.
    pub calibration: MetricsReport,
    /// Held-out metrics, when a held-out set was given.
    pub holdout: Option<MetricsReport>,
    /// Backward kernel invocations since the run started.
    pub backward_passes: u64,
    #[serde(skip)]
    pub table: Option<SensitivityTable>,
    #[serde(skip)]
    pub config: BitConfig,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per conv/fc layer: `layer,weight_bits,act_bits,params,dloss,dperf`.
    pub fn write_layers_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.layers {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_sweep_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.sweep {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Metrics of a quantized model on the calibration set (against the
/// full-precision `teacher`) and, optionally, on a labeled held-out set.
pub fn report_metrics(
    g: &ModelGraph,
    teacher: &ModelGraph,
    calib: &CalibrationSet,
    holdout: Option<&CalibrationSet>,
) -> Result<(MetricsReport, Option<MetricsReport>)> {
    let reference = teacher.forward_batched(&calib.inputs, Precision::Full, EVAL_CHUNK)?;
    let calibration = evaluate(g, calib, Some(&reference))?;
    let held = holdout
        .map(|h| {
            let r = teacher.forward_batched(&h.inputs, Precision::Full, EVAL_CHUNK)?;
            evaluate(g, h, Some(&r))
        })
        .transpose()?;
    Ok((calibration, held))
}

fn allocate(table: &SensitivityTable, target: AllocationTarget) -> Result<Solution> {
    match target {
        AllocationTarget::Budget(b) => solve_ip(table, b),
        AllocationTarget::Ratio(r) => solve_ip_for_ratio(table, r),
    }
}

fn sweep(table: &SensitivityTable) -> Result<Vec<SweepRow>> {
    let max_loss: f64 = table
        .layers
        .iter()
        .map(|l| {
            l.choices
                .iter()
                .map(|c| c.dloss)
                .filter(|d| d.is_finite())
                .fold(0.0, f64::max)
        })
        .sum();
    let budgets: Vec<f64> = (0..SWEEP_POINTS)
        .map(|i| max_loss * i as f64 / (SWEEP_POINTS - 1) as f64)
        .collect();
    solve_ip_sweep(table, &budgets)?
        .into_iter()
        .map(|p| {
            Ok(SweepRow {
                budget: p.budget,
                ratio: table.ratio(&p.solution.config)?,
                predicted_dloss: p.solution.total_dloss,
                dperf: p.solution.total_dperf,
            })
        })
        .collect()
}

fn passthrough_report(
    g: &ModelGraph,
    cfg: &PipelineConfig,
    calib: &CalibrationSet,
    holdout: Option<&CalibrationSet>,
) -> Result<PipelineReport> {
    let config = BitConfig::uniform(g, BitChoice::uniform(PASSTHROUGH_BITS));
    let (calibration, holdout) = report_metrics(g, g, calib, holdout)?;
    Ok(PipelineReport {
        mode: cfg.mode,
        target: cfg.target,
        base_bits: cfg.base_bits,
        low_bits: cfg.low_bits.clone(),
        exempt: Vec::new(),
        compression_ratio: compression_ratio(g, &config)?,
        predicted_dloss: 0.0,
        dperf: 0.0,
        reference_loss: 0.0,
        layers: g
            .nodes
            .iter()
            .filter(|n| n.is_weight_layer())
            .map(|n| LayerReport {
                layer: n.id.clone(),
                weight_bits: PASSTHROUGH_BITS,
                act_bits: PASSTHROUGH_BITS,
                params: n.num_weight_params(),
                dloss: 0.0,
                dperf: 0.0,
            })
            .collect(),
        sweep: Vec::new(),
        stitched_loss: 0.0,
        bn_tuning: None,
        bias_tuning: None,
        calibration,
        holdout,
        backward_passes: 0,
        table: None,
        config,
    })
}

/// Layer bank and bookkeeping shared by every allocation target of one run.
struct Prepared {
    fp: ModelGraph,
    bank: LayerBank,
    exempt: Vec<String>,
    backward_start: u64,
}

fn prepare(g: &ModelGraph, calib: &CalibrationSet, cfg: &PipelineConfig) -> Result<Prepared> {
    let backward_start = backward_calls();
    let fp = g.fuse_conv_bn()?;
    let io = collect_layer_io(&fp, &calib.inputs, Precision::Full)?;
    let bank = match cfg.mode {
        PipelineMode::Light => {
            LayerBank::round_to_nearest(&fp, &io, &cfg.choices(), RangeInit::MinMax)?
        }
        PipelineMode::Advanced => adaquant_bank(&fp, &io, &cfg.choices(), &cfg.adaquant)?.0,
    };
    let exempt = cfg.exempt(&fp);
    Ok(Prepared {
        fp,
        bank,
        exempt,
        backward_start,
    })
}

fn profile_prepared(
    p: &Prepared,
    calib: &CalibrationSet,
    cfg: &PipelineConfig,
) -> Result<SensitivityTable> {
    let teacher =
        p.fp.forward_batched(&calib.inputs, Precision::Full, EVAL_CHUNK)?;
    let opts = ProfileOptions {
        base: cfg.base(),
        choices: cfg.choices(),
        exempt: p.exempt.clone(),
    };
    profile_sensitivity(&p.bank, &calib.inputs, &teacher, &opts, &ParamBits)
}

/// The sensitivity table the pipeline selected by `cfg.mode` allocates from.
pub fn profile(
    g: &ModelGraph,
    calib: &CalibrationSet,
    cfg: &PipelineConfig,
) -> Result<SensitivityTable> {
    cfg.validate()?;
    profile_prepared(&prepare(g, calib, cfg)?, calib, cfg)
}

/// Allocates for `target`, stitches, tunes batch norms and (advanced only)
/// biases, then evaluates.
fn finish(
    p: &Prepared,
    table: &SensitivityTable,
    cfg: &PipelineConfig,
    target: AllocationTarget,
    calib: &CalibrationSet,
    holdout: Option<&CalibrationSet>,
) -> Result<(ModelGraph, PipelineReport)> {
    let fp = &p.fp;
    let teacher = fp.forward_batched(&calib.inputs, Precision::Full, EVAL_CHUNK)?;
    let solution = allocate(table, target)?;
    let mut q = p.bank.stitch(&solution.config)?;
    let stitched_loss = evaluate(&q, calib, Some(&teacher))?.loss;

    let bn_tuning = if cfg.bn_tuning && q.nodes.iter().any(|n| n.fused_bn.is_some()) {
        let mut tuned = refuse_bn(&tune_bn(&reconstruct_bn(&q)?, &calib.inputs, &cfg.bn)?)?;
        if cfg.recalibrate_activations {
            tuned = recalibrate_activations(&tuned, &calib.inputs, RangeInit::MinMax)?;
        }
        let final_loss = evaluate(&tuned, calib, Some(&teacher))?.loss;
        let accepted = !cfg.bn_guard || final_loss <= stitched_loss;
        if accepted {
            q = tuned;
        }
        Some(TuningReport {
            initial_loss: stitched_loss,
            final_loss,
            accepted,
        })
    } else {
        None
    };

    let bias_tuning = if cfg.mode == PipelineMode::Advanced && cfg.bias_tuning {
        let r = bias_tune(&q, fp, &calib.inputs, &cfg.bias)?;
        q = r.graph;
        Some(TuningReport {
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            accepted: true,
        })
    } else {
        None
    };

    let (calibration, holdout) = report_metrics(&q, fp, calib, holdout)?;
    let layers = table
        .layers
        .iter()
        .map(|l| {
            let bits = solution
                .config
                .get(&l.layer)
                .expect("solution covers every layer");
            let entry = l
                .choices
                .iter()
                .find(|c| c.bits == bits)
                .expect("chosen entry exists");
            LayerReport {
                layer: l.layer.clone(),
                weight_bits: bits.weight_bits,
                act_bits: bits.act_bits,
                params: l.num_params.unwrap_or(0),
                dloss: entry.dloss,
                dperf: entry.dperf,
            }
        })
        .collect();
    let report = PipelineReport {
        mode: cfg.mode,
        target,
        base_bits: cfg.base_bits,
        low_bits: cfg.low_bits.clone(),
        exempt: p.exempt.clone(),
        compression_ratio: compression_ratio(&q, &solution.config)?,
        predicted_dloss: solution.total_dloss,
        dperf: solution.total_dperf,
        reference_loss: table.reference_loss,
        layers,
        sweep: sweep(table)?,
        stitched_loss,
        bn_tuning,
        bias_tuning,
        calibration,
        holdout,
        backward_passes: backward_calls() - p.backward_start,
        table: Some(table.clone()),
        config: solution.config,
    };
    Ok((q, report))
}

/// Runs the pipeline selected by `cfg.mode` once per allocation target,
/// sharing the per-precision layer calibration and the sensitivity profile.
///
/// Light: fuse, min-max initialize every candidate precision, profile,
/// allocate, stitch and tune batch norms; no gradient is computed.
/// Advanced: every candidate precision of every layer is first calibrated
/// with AdaQuant (in parallel), and biases are tuned at the end.
pub fn run_targets(
    g: &ModelGraph,
    calib: &CalibrationSet,
    holdout: Option<&CalibrationSet>,
    cfg: &PipelineConfig,
    targets: &[AllocationTarget],
) -> Result<Vec<(ModelGraph, PipelineReport)>> {
    cfg.validate()?;
    for &target in targets {
        PipelineConfig {
            target,
            ..cfg.clone()
        }
        .validate()?;
    }
    if cfg.is_passthrough() {
        return targets
            .iter()
            .map(|&target| {
                let cfg = PipelineConfig {
                    target,
                    ..cfg.clone()
                };
                Ok((g.clone(), passthrough_report(g, &cfg, calib, holdout)?))
            })
            .collect();
    }
    let p = prepare(g, calib, cfg)?;
    let table = profile_prepared(&p, calib, cfg)?;
    targets
        .iter()
        .map(|&target| finish(&p, &table, cfg, target, calib, holdout))
        .collect()
}

/// Runs the pipeline selected by `cfg.mode` for `cfg.target`.
pub fn run(
    g: &ModelGraph,
    calib: &CalibrationSet,
    holdout: Option<&CalibrationSet>,
    cfg: &PipelineConfig,
) -> Result<(ModelGraph, PipelineReport)> {
    Ok(run_targets(g, calib, holdout, cfg, &[cfg.target])?.remove(0))
}

/// Backprop-free pipeline (see [`run_targets`]), whatever `cfg.mode` says.
pub fn run_light(
    g: &ModelGraph,
    calib: &CalibrationSet,
    holdout: Option<&CalibrationSet>,
    cfg: &PipelineConfig,
) -> Result<(ModelGraph, PipelineReport)> {
    let cfg = PipelineConfig {
        mode: PipelineMode::Light,
        ..cfg.clone()
    };
    run(g, calib, holdout, &cfg)
}

/// Full pipeline with AdaQuant and bias tuning (see [`run_targets`]),
/// whatever `cfg.mode` says.
pub fn run_advanced(
    g: &ModelGraph,
    calib: &CalibrationSet,
    holdout: Option<&CalibrationSet>,
    cfg: &PipelineConfig,
) -> Result<(ModelGraph, PipelineReport)> {
    let cfg = PipelineConfig {
        mode: PipelineMode::Advanced,
        ..cfg.clone()
    };
    run(g, calib, holdout, &cfg)
}
