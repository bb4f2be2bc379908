//! Sequential-with-residuals model graphs, optionally carrying per-layer
//! quantizers, and their forward/backward passes.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::layers::{self, bn_params, conv2d, conv2d_backward, fc, fc_backward, ConvSpec};
use crate::quant::{quantize, ste_backward, LayerQuant};
use crate::tensor::Tensor;

/// Id under which the graph input is referenced by node `inputs`.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Fc,
    Conv2d,
    BatchNorm2d { eps: f32 },
    Relu,
    AvgPool { kernel: usize },
    Flatten,
    Add,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Fc => "fc",
            LayerKind::Conv2d => "conv2d",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
        }
    }

    pub fn is_weight_layer(&self) -> bool {
        matches!(self, LayerKind::Fc | LayerKind::Conv2d)
    }
}

/// Affine parameters of a batch norm that was folded into a weight layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnAffine {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub params: BTreeMap<String, Tensor>,
    pub conv: Option<ConvSpec>,
    pub inputs: Vec<String>,
    pub quant: Option<LayerQuant>,
    pub fused_bn: Option<BnAffine>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            params: BTreeMap::new(),
            conv: None,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            quant: None,
            fused_bn: None,
        }
    }

    pub fn with_param(mut self, name: &str, t: Tensor) -> Self {
        self.params.insert(name.to_string(), t);
        self
    }

    pub fn with_conv(mut self, spec: ConvSpec) -> Self {
        self.conv = Some(spec);
        self
    }

    pub fn conv_spec(&self) -> Result<ConvSpec> {
        self.conv
            .ok_or_else(|| Error::Graph(format!("conv layer `{}` has no spec", self.id)))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| {
            Error::Graph(format!("layer `{}` is missing parameter `{name}`", self.id))
        })
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id.clone();
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("layer `{id}` is missing parameter `{name}`")))
    }

    pub fn weight(&self) -> Result<&Tensor> {
        self.param("weight")
    }

    pub fn bias(&self) -> Result<&Tensor> {
        self.param("bias")
    }

    pub fn is_weight_layer(&self) -> bool {
        self.kind.is_weight_layer()
    }

    pub fn out_channels(&self) -> Result<usize> {
        Ok(self.weight()?.dim(0))
    }

    pub fn num_weight_params(&self) -> usize {
        self.params.get("weight").map_or(0, Tensor::numel)
    }

    /// Forward of a conv/fc layer with explicit (possibly quantized) operands.
    pub fn weight_forward(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        match self.kind {
            LayerKind::Fc => fc(x, w, b),
            LayerKind::Conv2d => conv2d(x, w, b, &self.conv_spec()?),
            _ => Err(Error::Unsupported {
                id: self.id.clone(),
                op: "weight forward",
            }),
        }
    }

    /// Backward of a conv/fc layer: `(grad_x, grad_w, grad_b)`.
    pub fn weight_backward(
        &self,
        x: &Tensor,
        w: &Tensor,
        grad_out: &Tensor,
        need_weight_grad: bool,
    ) -> Result<(Tensor, Option<Tensor>, Tensor)> {
        match self.kind {
            LayerKind::Fc => fc_backward(x, w, grad_out, need_weight_grad),
            LayerKind::Conv2d => {
                conv2d_backward(x, w, &self.conv_spec()?, grad_out, need_weight_grad)
            }
            _ => Err(Error::Unsupported {
                id: self.id.clone(),
                op: "weight backward",
            }),
        }
    }
}

/// Whether forward passes apply the quantizers stored on the nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Full,
    Quantized,
}

/// Per-node values retained by a traced forward pass.
#[derive(Debug, Clone)]
pub struct NodeTrace {
    pub output: Tensor,
    /// Quantized input and weight of a quantized conv/fc layer.
    pub quantized_operands: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Tensor,
    pub nodes: Vec<NodeTrace>,
}

impl Trace {
    pub fn output(&self, index: usize) -> &Tensor {
        &self.nodes[index].output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    /// Shape of one sample, without the batch axis.
    pub input_shape: Vec<usize>,
    /// Nodes in topological order.
    pub nodes: Vec<LayerNode>,
    pub output: String,
}

impl ModelGraph {
    pub fn new(
        input_shape: Vec<usize>,
        nodes: Vec<LayerNode>,
        output: impl Into<String>,
    ) -> Result<Self> {
        let g = Self {
            input_shape,
            nodes,
            output: output.into(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks ids, arity, topological order and parameter shapes.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for node in &self.nodes {
            if node.id == INPUT_ID {
                return Err(Error::Graph(format!("node id `{INPUT_ID}` is reserved")));
            }
            let arity = if node.kind == LayerKind::Add { 2 } else { 1 };
            if node.inputs.len() != arity {
                return Err(Error::Graph(format!(
                    "`{}` ({}) needs {arity} input(s), has {}",
                    node.id,
                    node.kind.name(),
                    node.inputs.len()
                )));
            }
            for input in &node.inputs {
                if input != INPUT_ID && !seen.contains(input.as_str()) {
                    return Err(Error::Graph(format!(
                        "`{}` consumes `{input}` which is not an earlier node (cycle or bad order)",
                        node.id
                    )));
                }
            }
            if !seen.insert(node.id.as_str()) {
                return Err(Error::Graph(format!("duplicate node id `{}`", node.id)));
            }
            self.validate_params(node)?;
        }
        if !seen.contains(self.output.as_str()) {
            return Err(Error::Graph(format!(
                "output `{}` is not a node",
                self.output
            )));
        }
        Ok(())
    }

    fn validate_params(&self, node: &LayerNode) -> Result<()> {
        let bad = |msg: String| Err(Error::Graph(format!("`{}`: {msg}", node.id)));
        match node.kind {
            LayerKind::Conv2d => {
                let spec = node.conv_spec()?;
                spec.validate()?;
                if node.weight()?.shape() != spec.weight_shape().as_slice() {
                    return bad(format!(
                        "weight shape {:?} vs spec {:?}",
                        node.weight()?.shape(),
                        spec
                    ));
                }
                if node.bias()?.numel() != spec.out_channels {
                    return bad("bias length".into());
                }
            }
            LayerKind::Fc => {
                let w = node.weight()?;
                if w.ndim() != 2 || node.bias()?.numel() != w.dim(0) {
                    return bad(format!(
                        "fc weight {:?} / bias {:?}",
                        w.shape(),
                        node.bias()?.shape()
                    ));
                }
            }
            LayerKind::BatchNorm2d { eps } => {
                if !(eps >= 0.0) {
                    return bad(format!("eps {eps}"));
                }
                let c = node.param("gamma")?.numel();
                for name in ["beta", "mean", "var"] {
                    if node.param(name)?.numel() != c {
                        return bad(format!("{name} length"));
                    }
                }
                if node.param("var")?.data().iter().any(|&v| v < 0.0) {
                    return bad("negative variance".into());
                }
            }
            LayerKind::AvgPool { kernel: 0 } => return bad("avgpool window 0".into()),
            _ => {}
        }
        if let Some(q) = &node.quant {
            if !node.is_weight_layer() {
                return bad("quantizers on a non-weight layer".into());
            }
            q.weight.validate()?;
            q.input.validate()?;
        }
        Ok(())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: &str) -> Result<&LayerNode> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::Graph(format!("no node `{id}`")))
    }

    pub fn node_mut(&mut self, id: &str) -> Result<&mut LayerNode> {
        self.nodes
            .iter_mut()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::Graph(format!("no node `{id}`")))
    }

    /// Ids of conv/fc layers in topological order.
    pub fn weight_layers(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.is_weight_layer())
            .map(|n| n.id.clone())
            .collect()
    }

    /// Ids of the nodes reading each node's output.
    pub fn consumers(&self) -> HashMap<String, Vec<String>> {
        let mut map: HashMap<String, Vec<String>> = HashMap::new();
        for node in &self.nodes {
            for input in &node.inputs {
                map.entry(input.clone()).or_default().push(node.id.clone());
            }
        }
        map
    }

    /// Copy with every quantizer removed.
    pub fn without_quant(&self) -> Self {
        let mut g = self.clone();
        for node in &mut g.nodes {
            node.quant = None;
        }
        g
    }

    pub fn is_quantized(&self) -> bool {
        self.nodes.iter().any(|n| n.quant.is_some())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "graph expects [B, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    fn gather<'a>(
        &self,
        node: &LayerNode,
        input: &'a Tensor,
        done: &'a [NodeTrace],
    ) -> Result<Vec<&'a Tensor>> {
        node.inputs
            .iter()
            .map(|id| {
                if id == INPUT_ID {
                    Ok(input)
                } else {
                    self.index_of(id)
                        .filter(|&i| i < done.len())
                        .map(|i| &done[i].output)
                        .ok_or_else(|| Error::Graph(format!("unresolved input `{id}`")))
                }
            })
            .collect()
    }

    /// Forward of node `index` on already-computed inputs.
    pub fn node_forward(
        &self,
        index: usize,
        inputs: &[&Tensor],
        precision: Precision,
    ) -> Result<NodeTrace> {
        let node = &self.nodes[index];
        match (&node.quant, precision) {
            (Some(q), Precision::Quantized) => {
                let [x] = inputs else {
                    return Err(Error::Graph(format!("`{}` expects one input", node.id)));
                };
                let xq = quantize(x, &q.input)?;
                let wq = quantize(node.weight()?, &q.weight)?;
                let output = node.weight_forward(&xq, &wq, node.bias()?)?;
                Ok(NodeTrace {
                    output,
                    quantized_operands: Some((xq, wq)),
                })
            }
            _ => Ok(NodeTrace {
                output: layers::layer_forward(node, inputs)?,
                quantized_operands: None,
            }),
        }
    }

    /// Forward pass retaining every node output.
    pub fn forward_trace(&self, x: &Tensor, precision: Precision) -> Result<Trace> {
        self.check_input(x)?;
        let mut done: Vec<NodeTrace> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs = self.gather(node, x, &done)?;
            let t = self.node_forward(i, &inputs, precision)?;
            done.push(t);
        }
        Ok(Trace {
            input: x.clone(),
            nodes: done,
        })
    }

    /// Forward pass returning only the graph output.
    pub fn forward(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        self.check_input(x)?;
        let out_index = self
            .index_of(&self.output)
            .ok_or_else(|| Error::Graph(format!("no output node `{}`", self.output)))?;
        // Drop intermediate outputs once their last consumer has run.
        let mut last_use = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for input in &node.inputs {
                if let Some(j) = self.index_of(input) {
                    last_use[j] = i;
                }
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|id| {
                    if id == INPUT_ID {
                        Ok(x)
                    } else {
                        self.index_of(id)
                            .and_then(|j| values[j].as_ref())
                            .ok_or_else(|| Error::Graph(format!("unresolved input `{id}`")))
                    }
                })
                .collect::<Result<_>>()?;
            let out = self.node_forward(i, &inputs, precision)?.output;
            values[i] = Some(out);
            for input in &node.inputs {
                if let Some(j) = self.index_of(input) {
                    if last_use[j] == i && j != out_index {
                        values[j] = None;
                    }
                }
            }
        }
        values[out_index]
            .take()
            .ok_or_else(|| Error::Graph("output was not computed".into()))
    }

    /// Forward over a large batch in fixed-size chunks, concatenating outputs.
    pub fn forward_batched(
        &self,
        x: &Tensor,
        precision: Precision,
        chunk: usize,
    ) -> Result<Tensor> {
        let n = x.dim(0);
        if n <= chunk {
            return self.forward(x, precision);
        }
        let parts: Vec<Tensor> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
                self.forward(&x.select_rows(&rows), precision)
            })
            .collect::<Result<_>>()?;
        Tensor::concat_rows(&parts)
    }

    /// Backpropagates `grad_out` through a traced forward pass and returns the
    /// gradient of every conv/fc bias. Quantized layers use straight-through
    /// input gradients; batch norms run in inference form.
    pub fn bias_gradients(
        &self,
        trace: &Trace,
        grad_out: &Tensor,
        precision: Precision,
    ) -> Result<BTreeMap<String, Tensor>> {
        let out_index = self
            .index_of(&self.output)
            .ok_or_else(|| Error::Graph("missing output".into()))?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out_index] = Some(grad_out.clone());
        let mut bias_grads = BTreeMap::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let inputs = self.gather(node, &trace.input, &trace.nodes)?;
            let input_grads: Vec<Tensor> = if node.is_weight_layer() {
                match (&node.quant, precision, &trace.nodes[i].quantized_operands) {
                    (Some(q), Precision::Quantized, Some((xq, wq))) => {
                        let (gxq, _, gb) = node.weight_backward(xq, wq, &g, false)?;
                        bias_grads.insert(node.id.clone(), gb);
                        vec![ste_backward(inputs[0], &q.input, &gxq)?.x]
                    }
                    _ => {
                        let (gx, _, gb) =
                            node.weight_backward(inputs[0], node.weight()?, &g, false)?;
                        bias_grads.insert(node.id.clone(), gb);
                        vec![gx]
                    }
                }
            } else if let LayerKind::BatchNorm2d { eps } = node.kind {
                vec![layers::batchnorm_backward(inputs[0], &bn_params(node, eps)?, &g)?.x]
            } else {
                layers::layer_backward(node, &inputs, &g)?.inputs
            };
            for (input_id, gi) in node.inputs.iter().zip(input_grads) {
                if input_id == INPUT_ID {
                    continue;
                }
                let j = self
                    .index_of(input_id)
                    .ok_or_else(|| Error::Graph(format!("unresolved input `{input_id}`")))?;
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => acc.add(&gi)?,
                    None => gi,
                });
            }
        }
        Ok(bias_grads)
    }

    /// Folds every batch norm into the conv/fc layer feeding it.
    ///
    /// `W' = W·γ/√(σ²+ε)`, `b' = γ/√(σ²+ε)·(b−μ)+β`. The folded node keeps
    /// its id and records the batch norm's `γ, β, ε` for later reconstruction;
    /// consumers of the batch norm are rewired to the folded node.
    pub fn fuse_conv_bn(&self) -> Result<ModelGraph> {
        let consumers = self.consumers();
        let mut nodes: Vec<LayerNode> = Vec::with_capacity(self.nodes.len());
        let mut renamed: HashMap<String, String> = HashMap::new();
        for node in &self.nodes {
            let mut node = node.clone();
            for input in &mut node.inputs {
                if let Some(new) = renamed.get(input) {
                    *input = new.clone();
                }
            }
            let LayerKind::BatchNorm2d { eps } = node.kind else {
                nodes.push(node);
                continue;
            };
            let pred_id = node.inputs[0].clone();
            let pred = nodes
                .iter_mut()
                .find(|n| n.id == pred_id)
                .filter(|n| n.is_weight_layer() && n.fused_bn.is_none())
                .ok_or_else(|| Error::BnWithoutPredecessor(node.id.clone()))?;
            if consumers.get(&pred_id).map_or(0, Vec::len) != 1 {
                return Err(Error::Graph(format!(
                    "cannot fuse `{}`: `{pred_id}` has other consumers",
                    node.id
                )));
            }
            if pred.quant.is_some() {
                return Err(Error::Graph(format!(
                    "cannot fuse `{}` into quantized layer `{pred_id}`",
                    node.id
                )));
            }
            let bn = bn_params(&node, eps)?;
            let channels = pred.out_channels()?;
            if bn.gamma.len() != channels {
                return Err(Error::Shape(format!(
                    "batch norm `{}` has {} channels, `{pred_id}` produces {channels}",
                    node.id,
                    bn.gamma.len()
                )));
            }
            let scale: Vec<f32> = (0..channels)
                .map(|c| bn.gamma[c] / (bn.var[c] + eps).sqrt())
                .collect();
            let new_bias: Vec<f32> = (0..channels)
                .map(|c| {
                    scale[c] * (pred.bias().map(|b| b.data()[c]).unwrap_or(0.0) - bn.mean[c])
                        + bn.beta[c]
                })
                .collect();
            let affine = BnAffine {
                gamma: bn.gamma.to_vec(),
                beta: bn.beta.to_vec(),
                eps,
            };
            let w = pred.param_mut("weight")?;
            let per_channel = w.numel() / channels;
            for (c, row) in w.data_mut().chunks_mut(per_channel).enumerate() {
                row.iter_mut().for_each(|v| *v *= scale[c]);
            }
            pred.params
                .insert("bias".to_string(), Tensor::from_vec(new_bias));
            pred.fused_bn = Some(affine);
            renamed.insert(node.id.clone(), pred_id);
        }
        let output = renamed
            .get(&self.output)
            .cloned()
            .unwrap_or_else(|| self.output.clone());
        ModelGraph::new(self.input_shape.clone(), nodes, output)
    }
}

/// Calibration inputs with optional integer labels (used for reporting only).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub inputs: Tensor,
    pub labels: Option<Vec<i64>>,
}

impl CalibrationSet {
    pub fn new(inputs: Tensor, labels: Option<Vec<i64>>) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.dim(0) == 0 {
            return Err(Error::Shape(format!(
                "calibration inputs must be [B≥1, ...], got {:?}",
                inputs.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.dim(0) {
                return Err(Error::Shape(format!(
                    "{} labels for {} samples",
                    l.len(),
                    inputs.dim(0)
                )));
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }
}
