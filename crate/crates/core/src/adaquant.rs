//! Layerwise calibration: jointly optimizes an additive weight perturbation,
//! a bias perturbation and the quantizer ranges of one conv/fc layer to
//! minimize the MSE between its quantized output and the full-precision
//! output.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::allocator::{BitChoice, BitConfig};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, ModelGraph, Precision};
use crate::qmodel::{
    collect_layer_io, init_layer_quant, quantize_with_io, LayerBank, LayerIo, RangeInit,
};
use crate::quant::{
    levels, quantize, quantize_codes, ste_backward, LayerQuant, QuantParams, DEGENERATE_STEP,
};
use crate::sampling::CyclicSampler;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaQuantConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_weight: f32,
    pub lr_bias: f32,
    /// Learning rate of the activation quantizer range and zero point.
    pub lr_act_quant: f32,
    /// Learning rate of the weight quantizer ranges and zero points.
    pub lr_weight_quant: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
    /// Iterations between full-batch checkpoints of the best parameters.
    pub eval_every: usize,
    /// Range initialization of the quantizers before optimization.
    pub init: RangeInit,
}

impl Default for AdaQuantConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            batch_size: 50,
            lr_weight: 1e-5,
            lr_bias: 1e-3,
            lr_act_quant: 1e-1,
            lr_weight_quant: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 10,
            init: RangeInit::Mse,
        }
    }
}

impl AdaQuantConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_weight,
            self.lr_bias,
            self.lr_act_quant,
            self.lr_weight_quant,
            self.eps,
        ];
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "iterations, batch size and checkpoint interval must be ≥ 1".into(),
            ));
        }
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config(
                "learning rates and eps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Outcome of calibrating one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibResult {
    pub layer: String,
    /// Additive weight perturbation `V`; the quantized weight is `Q(W + V)`.
    pub weight_delta: Tensor,
    pub bias_delta: Tensor,
    pub quant: LayerQuant,
    /// Output MSE over the whole calibration batch with the initial
    /// (round-to-nearest) parameters.
    pub initial_mse: f64,
    /// Output MSE over the whole calibration batch with the returned parameters.
    pub final_mse: f64,
    /// Iteration whose parameters were returned (0 means unchanged).
    pub best_iteration: usize,
}

impl LayerCalibResult {
    pub fn bits(&self) -> BitChoice {
        let (k, n) = self.quant.bits();
        BitChoice::new(k, n)
    }

    /// `layer` with the calibrated weight, bias and quantizers.
    pub fn apply_to(&self, layer: &LayerNode) -> Result<LayerNode> {
        if layer.id != self.layer {
            return Err(Error::Graph(format!(
                "result for `{}` applied to `{}`",
                self.layer, layer.id
            )));
        }
        let mut node = layer.clone();
        let w = node.weight()?.add(&self.weight_delta)?;
        let b = node.bias()?.add(&self.bias_delta)?;
        node.params.insert("weight".into(), w);
        node.params.insert("bias".into(), b);
        node.quant = Some(self.quant.clone());
        Ok(node)
    }

    /// Per-element change of the integer weight code (`code + offset`)
    /// relative to round-to-nearest with the layer's initial quantizer.
    pub fn weight_code_shift(&self, layer: &LayerNode) -> Result<Vec<i64>> {
        let q0 = layer.quant.as_ref().ok_or_else(|| {
            Error::Quant(format!("layer `{}` has no initial quantizer", layer.id))
        })?;
        let before = integer_codes(layer.weight()?, &q0.weight)?;
        let after = integer_codes(
            &layer.weight()?.add(&self.weight_delta)?,
            &self.quant.weight,
        )?;
        Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
    }
}

fn integer_codes(w: &Tensor, q: &QuantParams) -> Result<Vec<i64>> {
    let codes = quantize_codes(w, q)?;
    let per_channel = w.numel() / codes.offsets.len().max(1);
    Ok(codes
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| c as i64 + codes.offsets[(i / per_channel).min(codes.offsets.len() - 1)])
        .collect())
}

/// Smallest calibration batch for which the layer's least-squares problem
/// is not over-parameterized: `N` input features for fc, and
/// `⌈C_i·k²/(H·W)⌉` (at least 1) for conv, with `H×W` the output plane.
///
/// `input_shape` is the per-sample input shape of the layer.
pub fn min_calibration_size(layer: &LayerNode, input_shape: &[usize]) -> Result<usize> {
    match layer.kind {
        LayerKind::Fc => Ok(layer.weight()?.dim(1)),
        LayerKind::Conv2d => {
            let spec = layer.conv_spec()?;
            if input_shape.len() != 3 {
                return Err(Error::Shape(format!("conv input shape {input_shape:?}")));
            }
            let plane = spec.out_dim(input_shape[1])? * spec.out_dim(input_shape[2])?;
            Ok(conv_min_calibration_size(
                spec.in_channels,
                spec.kernel,
                plane,
            ))
        }
        _ => Err(Error::Unsupported {
            id: layer.id.clone(),
            op: "min_calibration_size",
        }),
    }
}

/// `⌈C_i·k²/plane⌉`, at least 1.
pub fn conv_min_calibration_size(in_channels: usize, kernel: usize, plane: usize) -> usize {
    (in_channels * kernel * kernel)
        .div_ceil(plane.max(1))
        .max(1)
}

fn layer_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a, so a layer's stream does not depend on processing order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

/// Optimization variables.
#[derive(Clone)]
struct Vars {
    w: Tensor,
    b: Tensor,
    w_step: Vec<f32>,
    w_zero: Vec<f32>,
    x_step: Vec<f32>,
    x_zero: Vec<f32>,
}

impl Vars {
    fn quant(&self, template: &LayerQuant) -> LayerQuant {
        let params = |q: &QuantParams, step: &[f32], zero: &[f32]| {
            if q.is_passthrough() {
                q.clone()
            } else {
                QuantParams {
                    bits: q.bits,
                    step: step.to_vec(),
                    zero_point: zero.to_vec(),
                    granularity: q.granularity,
                }
            }
        };
        LayerQuant {
            weight: params(&template.weight, &self.w_step, &self.w_zero),
            input: params(&template.input, &self.x_step, &self.x_zero),
        }
    }
}

fn forward(layer: &LayerNode, x: &Tensor, v: &Vars, q: &LayerQuant) -> Result<Tensor> {
    let xq = quantize(x, &q.input)?;
    let wq = quantize(&v.w, &q.weight)?;
    layer.weight_forward(&xq, &wq, &v.b)
}

/// Calibrates `layer` (which must carry initialized quantizers) on the
/// full-precision input `x_fp`, against its own full-precision output.
pub fn adaquant_layer(
    layer: &LayerNode,
    x_fp: &Tensor,
    cfg: &AdaQuantConfig,
) -> Result<LayerCalibResult> {
    let target = layer.weight_forward(x_fp, layer.weight()?, layer.bias()?)?;
    adaquant_layer_to_target(layer, x_fp, &target, cfg)
}

/// Calibrates `layer` so that its quantized output on `input` approaches
/// `target`. Returns the best parameters seen at full-batch checkpoints,
/// including the initial ones, so `final_mse ≤ initial_mse`.
pub fn adaquant_layer_to_target(
    layer: &LayerNode,
    input: &Tensor,
    target: &Tensor,
    cfg: &AdaQuantConfig,
) -> Result<LayerCalibResult> {
    cfg.validate()?;
    let template = layer.quant.as_ref().ok_or_else(|| {
        Error::Quant(format!(
            "layer `{}` has no initialized quantizers",
            layer.id
        ))
    })?;
    if input.dim(0) != target.dim(0) {
        return Err(Error::Shape(format!(
            "{} input rows vs {} target rows",
            input.dim(0),
            target.dim(0)
        )));
    }
    let mut v = Vars {
        w: layer.weight()?.clone(),
        b: layer.bias()?.clone(),
        w_step: template.weight.step.clone(),
        w_zero: template.weight.zero_point.clone(),
        x_step: template.input.step.clone(),
        x_zero: template.input.zero_point.clone(),
    };
    let diverged = |iteration: usize| Error::Divergence {
        layer: layer.id.clone(),
        iteration,
    };
    let full_mse =
        |v: &Vars| -> Result<f64> { Ok(forward(layer, input, v, &v.quant(template))?.mse(target)) };

    let initial_mse = full_mse(&v)?;
    if !initial_mse.is_finite() {
        return Err(diverged(0));
    }
    let mut best = (initial_mse, 0usize, v.clone());

    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
    let mut opt_w = Adam::new(v.w.numel(), cfg.lr_weight, b1, b2, eps);
    let mut opt_b = Adam::new(v.b.numel(), cfg.lr_bias, b1, b2, eps);
    // Quantizer learning rates refer to the range `step·(2^b−1)`.
    let range_lr = |lr: f32, q: &QuantParams| lr / levels(q.bits.min(8)) as f32;
    let mut opt_ws = Adam::new(
        v.w_step.len(),
        range_lr(cfg.lr_weight_quant, &template.weight),
        b1,
        b2,
        eps,
    );
    let mut opt_wz = Adam::new(v.w_zero.len(), cfg.lr_weight_quant, b1, b2, eps);
    let mut opt_xs = Adam::new(
        v.x_step.len(),
        range_lr(cfg.lr_act_quant, &template.input),
        b1,
        b2,
        eps,
    );
    let mut opt_xz = Adam::new(v.x_zero.len(), cfg.lr_act_quant, b1, b2, eps);
    let mut sampler = CyclicSampler::new(input.dim(0), layer_seed(cfg.seed, &layer.id));

    for it in 1..=cfg.iterations {
        let rows = sampler.next_batch(cfg.batch_size);
        let xb = input.select_rows(&rows);
        let yb = target.select_rows(&rows);
        let q = v.quant(template);
        let xq = quantize(&xb, &q.input)?;
        let wq = quantize(&v.w, &q.weight)?;
        let y = layer.weight_forward(&xq, &wq, &v.b)?;
        let diff = y.sub(&yb)?;
        if !diff.is_finite() {
            return Err(diverged(it));
        }
        let grad = diff.scale(2.0 / diff.numel() as f32);
        let (gxq, gwq, gb) = layer.weight_backward(&xq, &wq, &grad, true)?;
        let ste_w = ste_backward(&v.w, &q.weight, &gwq.expect("requested"))?;
        let ste_x = ste_backward(&xb, &q.input, &gxq)?;
        if !ste_w.x.is_finite() || !gb.is_finite() {
            return Err(diverged(it));
        }

        opt_w.step(v.w.data_mut(), ste_w.x.data());
        opt_b.step(v.b.data_mut(), gb.data());
        if !q.weight.is_passthrough() {
            opt_ws.step(&mut v.w_step, &ste_w.step);
            opt_wz.step(&mut v.w_zero, &ste_w.zero_point);
            v.w_step
                .iter_mut()
                .for_each(|s| *s = s.max(DEGENERATE_STEP));
        }
        if !q.input.is_passthrough() {
            opt_xs.step(&mut v.x_step, &ste_x.step);
            opt_xz.step(&mut v.x_zero, &ste_x.zero_point);
            v.x_step
                .iter_mut()
                .for_each(|s| *s = s.max(DEGENERATE_STEP));
        }

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let mse = full_mse(&v)?;
            if !mse.is_finite() {
                return Err(diverged(it));
            }
            if mse < best.0 {
                best = (mse, it, v.clone());
            }
        }
    }

    let (final_mse, best_iteration, v) = best;
    Ok(LayerCalibResult {
        layer: layer.id.clone(),
        weight_delta: v.w.sub(layer.weight()?)?,
        bias_delta: v.b.sub(layer.bias()?)?,
        quant: v.quant(template),
        initial_mse,
        final_mse,
        best_iteration,
    })
}

/// Calibrates every conv/fc layer of the full-precision graph `g`
/// independently on its full-precision input and output, with quantizers
/// initialized per `bits`. Layers run concurrently; each result is
/// identical to a standalone [`adaquant_layer`] call.
pub fn adaquant_parallel(
    g: &ModelGraph,
    calib_inputs: &Tensor,
    bits: &BitConfig,
    cfg: &AdaQuantConfig,
) -> Result<Vec<LayerCalibResult>> {
    let io = collect_layer_io(g, calib_inputs, Precision::Full)?;
    let q = quantize_with_io(g, &io, bits, cfg.init)?;
    q.nodes
        .par_iter()
        .filter(|n| n.is_weight_layer())
        .map(|n| {
            let layer_io = &io[&n.id];
            adaquant_layer_to_target(n, &layer_io.input, &layer_io.output, cfg)
        })
        .collect()
}

/// Calibrates layers in topological order. Each layer's input comes from
/// the quantized graph with all earlier layers already calibrated; its
/// target stays the full-precision output.
pub fn adaquant_sequential(
    g: &ModelGraph,
    calib_inputs: &Tensor,
    bits: &BitConfig,
    cfg: &AdaQuantConfig,
) -> Result<Vec<LayerCalibResult>> {
    let io = collect_layer_io(g, calib_inputs, Precision::Full)?;
    let mut q = quantize_with_io(g, &io, bits, cfg.init)?;
    let mut results = Vec::new();
    for id in g.weight_layers() {
        let q_io = collect_layer_io(&q, calib_inputs, Precision::Quantized)?;
        let node = q.node(&id)?;
        let r = adaquant_layer_to_target(node, &q_io[&id].input, &io[&id].output, cfg)?;
        *q.node_mut(&id)? = r.apply_to(node)?;
        results.push(r);
    }
    Ok(results)
}

/// Applies calibration results to the matching layers of `g`.
pub fn apply_results(g: &ModelGraph, results: &[LayerCalibResult]) -> Result<ModelGraph> {
    let mut out = g.clone();
    for r in results {
        let node = out.node(&r.layer)?.clone();
        *out.node_mut(&r.layer)? = r.apply_to(&node)?;
    }
    Ok(out)
}

/// Calibrated variants of every conv/fc layer at each of `choices`, all
/// computed independently against full-precision activations.
pub fn adaquant_bank(
    g: &ModelGraph,
    io: &BTreeMap<String, LayerIo>,
    choices: &[BitChoice],
    cfg: &AdaQuantConfig,
) -> Result<(LayerBank, Vec<LayerCalibResult>)> {
    let jobs: Vec<(&LayerNode, BitChoice)> = g
        .nodes
        .iter()
        .filter(|n| n.is_weight_layer())
        .flat_map(|n| choices.iter().map(move |&c| (n, c)))
        .collect();
    let results: Vec<(LayerNode, LayerCalibResult)> = jobs
        .par_iter()
        .map(|&(node, bits)| {
            let layer_io = io.get(&node.id).ok_or_else(|| {
                Error::Graph(format!("no activations collected for `{}`", node.id))
            })?;
            let mut init = node.clone();
            init.quant = Some(init_layer_quant(node, &layer_io.input, bits, cfg.init)?);
            let r = adaquant_layer_to_target(&init, &layer_io.input, &layer_io.output, cfg)?;
            Ok((r.apply_to(&init)?, r))
        })
        .collect::<Result<_>>()?;
    let mut bank = LayerBank::new(g.clone());
    let mut list = Vec::with_capacity(results.len());
    for ((_, bits), (node, r)) in jobs.into_iter().zip(results) {
        bank.insert(bits, node);
        list.push(r);
    }
    Ok((bank, list))
}
