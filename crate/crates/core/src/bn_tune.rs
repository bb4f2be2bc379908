//! Batch-norm reconstruction, forward-only statistics re-estimation and
//! code-preserving re-fusion for models whose batch norms were folded into
//! their conv/fc layers.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnAffine, LayerKind, LayerNode, ModelGraph, Precision, INPUT_ID};
use crate::layers::{batchnorm, BnParams};
use crate::quant::{code, levels, offset, Granularity, QuantParams};
use crate::tensor::Tensor;

/// Suffix appended to a weight layer's id to name its reconstructed batch norm.
pub const BN_SUFFIX: &str = ".bn";

/// Largest number of one-ulp moves tried when re-fusing a single weight.
const MAX_NUDGES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnTuneConfig {
    /// Number of running-statistics updates over the calibration set.
    pub iterations: usize,
    /// Weight of the new statistics in each exponential-moving-average update.
    pub momentum: f64,
}

impl Default for BnTuneConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            momentum: 0.1,
        }
    }
}

impl BnTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-channel state of a batch norm: running `μ, σ²` and frozen `γ, β, ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BnState {
    /// Batch norm that is the identity and carries the folded affine:
    /// `μ = β_r = β`, `σ² = γ²`, `γ_r = √(γ² + ε)`.
    pub fn reconstruct(affine: &BnAffine) -> Self {
        Self {
            mean: affine.beta.clone(),
            var: affine.gamma.iter().map(|g| g * g).collect(),
            gamma: affine
                .gamma
                .iter()
                .map(|g| (g * g + affine.eps).sqrt())
                .collect(),
            beta: affine.beta.clone(),
            eps: affine.eps,
        }
    }

    pub fn from_node(node: &LayerNode) -> Result<Self> {
        let LayerKind::BatchNorm2d { eps } = node.kind else {
            return Err(Error::Unsupported {
                id: node.id.clone(),
                op: "batch-norm state",
            });
        };
        let get = |name: &str| node.param(name).map(|t| t.data().to_vec());
        let state = Self {
            mean: get("mean")?,
            var: get("var")?,
            gamma: get("gamma")?,
            beta: get("beta")?,
            eps,
        };
        let c = state.channels();
        if state.mean.len() != c || state.var.len() != c || state.beta.len() != c {
            return Err(Error::Shape(format!(
                "batch norm `{}` has ragged parameters",
                node.id
            )));
        }
        Ok(state)
    }

    pub fn to_node(&self, id: &str, input: &str) -> LayerNode {
        LayerNode::new(id, LayerKind::BatchNorm2d { eps: self.eps }, &[input])
            .with_param("gamma", Tensor::from_vec(self.gamma.clone()))
            .with_param("beta", Tensor::from_vec(self.beta.clone()))
            .with_param("mean", Tensor::from_vec(self.mean.clone()))
            .with_param("var", Tensor::from_vec(self.var.clone()))
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn params(&self) -> BnParams<'_> {
        BnParams {
            gamma: &self.gamma,
            beta: &self.beta,
            mean: &self.mean,
            var: &self.var,
            eps: self.eps,
        }
    }

    /// Per-channel multiplier `γ_r / √(σ² + ε)`, always positive for `γ_r > 0`.
    pub fn scale(&self) -> Vec<f32> {
        self.gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect()
    }

    /// One moving-average update toward batch moments; `σ²` is floored at `ε`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for c in 0..self.channels() {
            let m = (1.0 - momentum) * self.mean[c] as f64 + momentum * batch_mean[c];
            let v = (1.0 - momentum) * self.var[c] as f64 + momentum * batch_var[c];
            self.mean[c] = m as f32;
            self.var[c] = (v as f32).max(self.eps);
        }
    }

    fn write_statistics(&self, node: &mut LayerNode) {
        node.params
            .insert("mean".into(), Tensor::from_vec(self.mean.clone()));
        node.params
            .insert("var".into(), Tensor::from_vec(self.var.clone()));
    }
}

/// Inserts an identity batch norm after every layer that records a folded
/// one. The new node is named `<layer>.bn` and takes over the layer's consumers.
pub fn reconstruct_bn(g: &ModelGraph) -> Result<ModelGraph> {
    let mut nodes = Vec::with_capacity(g.nodes.len());
    let mut renamed: HashMap<String, String> = HashMap::new();
    for node in &g.nodes {
        let mut node = node.clone();
        for input in &mut node.inputs {
            if let Some(new) = renamed.get(input) {
                *input = new.clone();
            }
        }
        let affine = node.fused_bn.clone();
        let id = node.id.clone();
        nodes.push(node);
        if let Some(affine) = affine {
            let bn_id = format!("{id}{BN_SUFFIX}");
            if g.index_of(&bn_id).is_some() {
                return Err(Error::Graph(format!(
                    "`{id}` already has a reconstructed batch norm"
                )));
            }
            nodes.push(BnState::reconstruct(&affine).to_node(&bn_id, &id));
            renamed.insert(id, bn_id);
        }
    }
    let output = renamed
        .get(&g.output)
        .cloned()
        .unwrap_or_else(|| g.output.clone());
    ModelGraph::new(g.input_shape.clone(), nodes, output)
}

/// Per-channel `(mean, variance)`.
pub type Moments = (Vec<f64>, Vec<f64>);

/// Biased per-channel mean and variance over every axis but 1.
pub fn channel_moments(x: &Tensor) -> Result<Moments> {
    if x.ndim() < 2 {
        return Err(Error::Shape(format!("channel moments of {:?}", x.shape())));
    }
    let (batch, channels) = (x.dim(0), x.dim(1));
    let plane: usize = x.shape()[2..].iter().product();
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        mean[i % channels] += chunk.iter().map(|&v| v as f64).sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let m = mean[i % channels];
        var[i % channels] += chunk.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

/// One forward pass in which every batch norm normalizes with the moments of
/// its own input over the whole batch. Returns those moments per batch norm.
pub fn train_mode_statistics(g: &ModelGraph, x: &Tensor) -> Result<BTreeMap<String, Moments>> {
    let mut values: Vec<Tensor> = Vec::with_capacity(g.nodes.len());
    let mut stats = BTreeMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        let inputs: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|id| {
                if id == INPUT_ID {
                    Ok(x)
                } else {
                    g.index_of(id)
                        .filter(|&j| j < values.len())
                        .map(|j| &values[j])
                        .ok_or_else(|| Error::Graph(format!("unresolved input `{id}`")))
                }
            })
            .collect::<Result<_>>()?;
        let out = if let LayerKind::BatchNorm2d { .. } = node.kind {
            let state = BnState::from_node(node)?;
            let (mean, var) = channel_moments(inputs[0])?;
            let batch = BnState {
                mean: mean.iter().map(|&m| m as f32).collect(),
                var: var.iter().map(|&v| v as f32).collect(),
                ..state
            };
            let out = batchnorm(inputs[0], &batch.params())?;
            stats.insert(node.id.clone(), (mean, var));
            out
        } else {
            g.node_forward(i, &inputs, Precision::Quantized)?.output
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(format!(
                "output of `{}` during batch-norm tuning",
                node.id
            )));
        }
        values.push(out);
    }
    Ok(stats)
}

/// Re-estimates the running statistics of every batch norm on the
/// calibration inputs with the model's quantizers active. Only `μ` and `σ²`
/// change.
///
/// Each update uses the moments of a full-batch train-mode pass. That pass
/// does not read the running statistics, so it is computed once and the
/// moving average is applied `iterations` times.
pub fn tune_bn(g: &ModelGraph, calib_inputs: &Tensor, cfg: &BnTuneConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut out = g.clone();
    let has_bn = g
        .nodes
        .iter()
        .any(|n| matches!(n.kind, LayerKind::BatchNorm2d { .. }));
    if cfg.iterations == 0 || !has_bn {
        return Ok(out);
    }
    let stats = train_mode_statistics(g, calib_inputs)?;
    for (id, (mean, var)) in stats {
        let node = out.node_mut(&id)?;
        let mut state = BnState::from_node(node)?;
        for _ in 0..cfg.iterations {
            state.update(&mean, &var, cfg.momentum);
        }
        state.write_statistics(node);
    }
    Ok(out)
}

/// Rescales a per-channel weight quantizer and its weights by `scale` so
/// that every integer code and offset is unchanged. Rounded products that
/// would land on a different code are moved one ulp at a time until they
/// match.
pub fn rescale_quantized_weights(
    layer: &str,
    weight: &mut Tensor,
    q: &QuantParams,
    scale: &[f32],
) -> Result<QuantParams> {
    if q.granularity != (Granularity::PerChannel { axis: 0 }) {
        return Err(Error::PerTensorRefuse(layer.to_string()));
    }
    let mut rescaled = q.rescaled(scale)?;
    let top = levels(q.bits);
    let channels = q.channels();
    let mut offsets = Vec::with_capacity(channels);
    for c in 0..channels {
        let zi = offset(q.step[c] as f64, q.zero_point[c] as f64);
        if offset(rescaled.step[c] as f64, rescaled.zero_point[c] as f64) != zi {
            rescaled.zero_point[c] = (rescaled.step[c] as f64 * zi) as f32;
            if offset(rescaled.step[c] as f64, rescaled.zero_point[c] as f64) != zi {
                return Err(Error::Quant(format!(
                    "zero point of `{layer}` channel {c} cannot be rescaled"
                )));
            }
        }
        offsets.push(zi);
    }
    rescaled.validate()?;
    let per_channel = weight.numel() / channels;
    for (c, row) in weight.data_mut().chunks_mut(per_channel).enumerate() {
        for v in row.iter_mut() {
            let target = code(*v, q.step[c], offsets[c], top);
            let mut moved = *v * scale[c];
            let mut nudges = 0;
            loop {
                let got = code(moved, rescaled.step[c], offsets[c], top);
                if got == target {
                    break;
                }
                if nudges == MAX_NUDGES {
                    return Err(Error::Quant(format!(
                        "weight of `{layer}` channel {c} changes code on rescaling"
                    )));
                }
                moved = if got > target {
                    moved.next_down()
                } else {
                    moved.next_up()
                };
                nudges += 1;
            }
            *v = moved;
        }
    }
    Ok(rescaled)
}

/// Folds `bn` into `layer`: `W' = k·W`, `b' = k·(b − μ) + β` with
/// `k = γ / √(σ² + ε)`. A quantized layer also gets `s' = k·s`, `z' = k·z`,
/// keeping its weight codes.
pub fn fold_bn_into(layer: &mut LayerNode, bn: &BnState) -> Result<()> {
    let channels = layer.out_channels()?;
    if bn.channels() != channels {
        return Err(Error::Shape(format!(
            "batch norm with {} channels after `{}` ({channels} channels)",
            bn.channels(),
            layer.id
        )));
    }
    let k = bn.scale();
    let bias: Vec<f32> = (0..channels)
        .map(|c| {
            k[c] * (layer.bias().map(|b| b.data()[c]).unwrap_or(0.0) - bn.mean[c]) + bn.beta[c]
        })
        .collect();
    let id = layer.id.clone();
    let quant = layer.quant.clone();
    let weight = layer.param_mut("weight")?;
    match quant {
        Some(mut q) if !q.weight.is_passthrough() => {
            q.weight = rescale_quantized_weights(&id, weight, &q.weight, &k)?;
            layer.quant = Some(q);
        }
        _ => {
            let per_channel = weight.numel() / channels;
            for (c, row) in weight.data_mut().chunks_mut(per_channel).enumerate() {
                row.iter_mut().for_each(|v| *v *= k[c]);
            }
        }
    }
    layer.params.insert("bias".into(), Tensor::from_vec(bias));
    if layer.fused_bn.is_none() {
        layer.fused_bn = Some(BnAffine {
            gamma: bn.gamma.clone(),
            beta: bn.beta.clone(),
            eps: bn.eps,
        });
    }
    Ok(())
}

/// Folds every batch norm back into the conv/fc layer feeding it, keeping the
/// integer weight codes of quantized layers. Weight quantizers must be
/// per-channel.
pub fn refuse_bn(g: &ModelGraph) -> Result<ModelGraph> {
    let consumers = g.consumers();
    let mut nodes: Vec<LayerNode> = Vec::with_capacity(g.nodes.len());
    let mut renamed: HashMap<String, String> = HashMap::new();
    for node in &g.nodes {
        let mut node = node.clone();
        for input in &mut node.inputs {
            if let Some(new) = renamed.get(input) {
                *input = new.clone();
            }
        }
        if !matches!(node.kind, LayerKind::BatchNorm2d { .. }) {
            nodes.push(node);
            continue;
        }
        let pred_id = node.inputs[0].clone();
        let pred = nodes
            .iter_mut()
            .find(|n| n.id == pred_id && n.is_weight_layer())
            .ok_or_else(|| Error::BnWithoutPredecessor(node.id.clone()))?;
        if consumers.get(&pred_id).map_or(0, Vec::len) != 1 {
            return Err(Error::Graph(format!(
                "cannot fold `{}`: `{pred_id}` has other consumers",
                node.id
            )));
        }
        fold_bn_into(pred, &BnState::from_node(&node)?)?;
        renamed.insert(node.id.clone(), pred_id);
    }
    let output = renamed
        .get(&g.output)
        .cloned()
        .unwrap_or_else(|| g.output.clone());
    ModelGraph::new(g.input_shape.clone(), nodes, output)
}
