//! Label-free fine-tuning of conv/fc biases: plain SGD on the distillation
//! loss between a full-precision teacher and the quantized student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{distillation_loss, kd_loss, EVAL_CHUNK};
use crate::graph::{ModelGraph, Precision};
use crate::sampling::CyclicSampler;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasTuneConfig {
    pub iterations: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Full-calibration evaluations happen every `eval_every` iterations and
    /// after the last one; the best evaluated biases are returned.
    pub eval_every: usize,
}

impl Default for BiasTuneConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr: 0.1,
            batch_size: 50,
            seed: 0,
            eval_every: 10,
        }
    }
}

impl BiasTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "bias learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "bias tuning batch size and eval interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasTuneResult {
    pub graph: ModelGraph,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_iteration: usize,
    /// Full-calibration loss at every evaluated iteration, starting with 0.
    pub trace: Vec<(usize, f64)>,
}

fn full_loss(g: &ModelGraph, inputs: &Tensor, teacher: &Tensor) -> Result<f64> {
    let out = g.forward_batched(inputs, Precision::Quantized, EVAL_CHUNK)?;
    kd_loss(teacher, &out)
}

fn biases(g: &ModelGraph) -> Result<Vec<(String, Tensor)>> {
    g.nodes
        .iter()
        .filter(|n| n.is_weight_layer())
        .map(|n| Ok((n.id.clone(), n.bias()?.clone())))
        .collect()
}

/// Tunes the biases of `student` so that its quantized outputs on the
/// calibration inputs match those of `teacher` at full precision. Every other
/// tensor is left untouched and the returned loss never exceeds the initial one.
pub fn bias_tune(
    student: &ModelGraph,
    teacher: &ModelGraph,
    calib_inputs: &Tensor,
    cfg: &BiasTuneConfig,
) -> Result<BiasTuneResult> {
    cfg.validate()?;
    let targets = teacher.forward_batched(calib_inputs, Precision::Full, EVAL_CHUNK)?;
    let initial_loss = full_loss(student, calib_inputs, &targets)?;
    if !initial_loss.is_finite() {
        return Err(Error::BiasTuneDivergence(0));
    }
    let mut best = (initial_loss, 0usize, biases(student)?);
    let mut trace = vec![(0, initial_loss)];
    if initial_loss == 0.0 {
        return Ok(BiasTuneResult {
            graph: student.clone(),
            initial_loss,
            final_loss: initial_loss,
            best_iteration: 0,
            trace,
        });
    }
    let mut g = student.clone();
    let mut sampler = CyclicSampler::new(calib_inputs.dim(0), cfg.seed);
    for it in 1..=cfg.iterations {
        let rows = sampler.next_batch(cfg.batch_size);
        let xb = calib_inputs.select_rows(&rows);
        let tb = targets.select_rows(&rows);
        let trace_b = g.forward_trace(&xb, Precision::Quantized)?;
        let out = trace_b.output(g.index_of(&g.output).expect("validated output"));
        let (loss, grad) = distillation_loss(&tb, out)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::BiasTuneDivergence(it));
        }
        let grads = g.bias_gradients(&trace_b, &grad, Precision::Quantized)?;
        for (id, gb) in grads {
            let b = g.node_mut(&id)?.param_mut("bias")?;
            for (v, d) in b.data_mut().iter_mut().zip(gb.data()) {
                *v -= cfg.lr * d;
            }
        }
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let l = full_loss(&g, calib_inputs, &targets)?;
            if !l.is_finite() {
                return Err(Error::BiasTuneDivergence(it));
            }
            trace.push((it, l));
            if l < best.0 {
                best = (l, it, biases(&g)?);
            }
        }
    }
    for (id, b) in best.2 {
        g.node_mut(&id)?.params.insert("bias".into(), b);
    }
    Ok(BiasTuneResult {
        graph: g,
        initial_loss,
        final_loss: best.0,
        best_iteration: best.1,
        trace,
    })
}
