//! Building quantized graphs from a full-precision graph: activation
//! collection, range initialization for a bit configuration, and a bank of
//! per-precision calibrated layers that can be stitched into any mixed
//! configuration.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{BitChoice, BitConfig};
use crate::error::{Error, Result};
use crate::graph::{LayerNode, ModelGraph, Precision, INPUT_ID};
use crate::quant::{
    calibrate_step_mse, init_minmax, Granularity, LayerQuant, QuantParams, PASSTHROUGH_BITS,
};
use crate::tensor::Tensor;

/// Samples per forward chunk while collecting activations.
pub const COLLECT_CHUNK: usize = 128;

/// Range initialization method for quantizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeInit {
    #[default]
    MinMax,
    Mse,
}

/// Input and output of one conv/fc layer over a calibration batch.
#[derive(Debug, Clone)]
pub struct LayerIo {
    pub input: Tensor,
    pub output: Tensor,
}

/// Inputs and outputs of every conv/fc layer of `g` on `x`, keyed by id.
pub fn collect_layer_io(
    g: &ModelGraph,
    x: &Tensor,
    precision: Precision,
) -> Result<BTreeMap<String, LayerIo>> {
    let n = x.dim(0);
    let weight_ids: Vec<usize> = (0..g.nodes.len())
        .filter(|&i| g.nodes[i].is_weight_layer())
        .collect();
    let mut parts: Vec<(Vec<Tensor>, Vec<Tensor>)> =
        vec![(Vec::new(), Vec::new()); weight_ids.len()];
    for start in (0..n).step_by(COLLECT_CHUNK) {
        let rows: Vec<usize> = (start..(start + COLLECT_CHUNK).min(n)).collect();
        let xb = x.select_rows(&rows);
        let trace = g.forward_trace(&xb, precision)?;
        for (slot, &i) in weight_ids.iter().enumerate() {
            let node = &g.nodes[i];
            let input = match node.inputs[0].as_str() {
                INPUT_ID => xb.clone(),
                id => trace
                    .output(g.index_of(id).expect("validated graph"))
                    .clone(),
            };
            parts[slot].0.push(input);
            parts[slot].1.push(trace.output(i).clone());
        }
    }
    weight_ids
        .iter()
        .zip(parts)
        .map(|(&i, (ins, outs))| {
            Ok((
                g.nodes[i].id.clone(),
                LayerIo {
                    input: Tensor::concat_rows(&ins)?,
                    output: Tensor::concat_rows(&outs)?,
                },
            ))
        })
        .collect()
}

fn init(x: &Tensor, bits: u32, granularity: Granularity, method: RangeInit) -> Result<QuantParams> {
    match method {
        RangeInit::MinMax => init_minmax(x, bits, granularity),
        RangeInit::Mse => calibrate_step_mse(x, bits, granularity),
    }
}

/// Quantizers for a layer at `bits`, initialized from its weight and the
/// given input activations.
pub fn init_layer_quant(
    node: &LayerNode,
    input: &Tensor,
    bits: BitChoice,
    method: RangeInit,
) -> Result<LayerQuant> {
    Ok(LayerQuant {
        weight: init(
            node.weight()?,
            bits.weight_bits,
            Granularity::PerChannel { axis: 0 },
            method,
        )?,
        input: init(input, bits.act_bits, Granularity::PerTensor, method)?,
    })
}

/// Copy of the full-precision graph `g` with every conv/fc layer quantized
/// per `cfg`, ranges initialized from `io` (full-precision activations).
pub fn quantize_with_io(
    g: &ModelGraph,
    io: &BTreeMap<String, LayerIo>,
    cfg: &BitConfig,
    method: RangeInit,
) -> Result<ModelGraph> {
    cfg.check_covers(g)?;
    let mut q = g.clone();
    for node in q.nodes.iter_mut().filter(|n| n.is_weight_layer()) {
        let bits = cfg.get(&node.id).expect("covered");
        let layer_io = io
            .get(&node.id)
            .ok_or_else(|| Error::Graph(format!("no activations collected for `{}`", node.id)))?;
        node.quant = Some(init_layer_quant(node, &layer_io.input, bits, method)?);
    }
    Ok(q)
}

/// [`quantize_with_io`] collecting the activations from `calib_inputs` first.
pub fn quantize_model(
    g: &ModelGraph,
    calib_inputs: &Tensor,
    cfg: &BitConfig,
    method: RangeInit,
) -> Result<ModelGraph> {
    let io = collect_layer_io(g, calib_inputs, Precision::Full)?;
    quantize_with_io(g, &io, cfg, method)
}

/// Re-initializes the activation quantizer of every quantized layer from
/// the inputs it sees in the quantized graph, keeping bit-widths and weight
/// quantizers.
pub fn recalibrate_activations(
    g: &ModelGraph,
    calib_inputs: &Tensor,
    method: RangeInit,
) -> Result<ModelGraph> {
    let mut out = g.clone();
    // Each layer's range is set from inputs produced by the already
    // recalibrated predecessors.
    for i in 0..out.nodes.len() {
        let Some(q) = out.nodes[i].quant.clone() else {
            continue;
        };
        if q.input.is_passthrough() {
            continue;
        }
        let id = out.nodes[i].id.clone();
        let io = collect_layer_io(&out, calib_inputs, Precision::Quantized)?;
        let input = &io[&id].input;
        out.nodes[i].quant = Some(LayerQuant {
            weight: q.weight,
            input: init(input, q.input.bits, Granularity::PerTensor, method)?,
        });
    }
    Ok(out)
}

/// Calibrated versions of every conv/fc layer at several precisions.
///
/// Each variant is a complete layer node (weights, bias and quantizers), so
/// stitching a configuration is a pure selection.
#[derive(Debug, Clone)]
pub struct LayerBank {
    /// The full-precision (fused) graph the variants belong to.
    pub base: ModelGraph,
    variants: BTreeMap<(String, BitChoice), LayerNode>,
}

impl LayerBank {
    pub fn new(base: ModelGraph) -> Self {
        Self {
            base,
            variants: BTreeMap::new(),
        }
    }

    /// Min-max or MSE range-initialized variants at each of `choices`,
    /// computed in parallel.
    pub fn round_to_nearest(
        base: &ModelGraph,
        io: &BTreeMap<String, LayerIo>,
        choices: &[BitChoice],
        method: RangeInit,
    ) -> Result<Self> {
        let jobs: Vec<(&LayerNode, BitChoice)> = base
            .nodes
            .iter()
            .filter(|n| n.is_weight_layer())
            .flat_map(|n| choices.iter().map(move |&c| (n, c)))
            .collect();
        let nodes: Vec<LayerNode> = jobs
            .par_iter()
            .map(|&(node, bits)| {
                let layer_io = io.get(&node.id).ok_or_else(|| {
                    Error::Graph(format!("no activations collected for `{}`", node.id))
                })?;
                let mut n = node.clone();
                n.quant = Some(init_layer_quant(node, &layer_io.input, bits, method)?);
                Ok(n)
            })
            .collect::<Result<_>>()?;
        let mut bank = Self::new(base.clone());
        for ((_, bits), node) in jobs.into_iter().zip(nodes) {
            bank.insert(bits, node);
        }
        Ok(bank)
    }

    pub fn insert(&mut self, bits: BitChoice, node: LayerNode) {
        self.variants.insert((node.id.clone(), bits), node);
    }

    pub fn get(&self, layer: &str, bits: BitChoice) -> Option<&LayerNode> {
        self.variants.get(&(layer.to_string(), bits))
    }

    pub fn contains(&self, layer: &str, bits: BitChoice) -> bool {
        self.variants.contains_key(&(layer.to_string(), bits))
    }

    /// Graph with each conv/fc layer replaced by its variant at `cfg`'s bits.
    /// Passthrough (32/32) layers fall back to the full-precision node.
    pub fn stitch(&self, cfg: &BitConfig) -> Result<ModelGraph> {
        cfg.check_covers(&self.base)?;
        let mut g = self.base.clone();
        for node in g.nodes.iter_mut().filter(|n| n.is_weight_layer()) {
            let bits = cfg.get(&node.id).expect("covered");
            match self.get(&node.id, bits) {
                Some(v) => *node = v.clone(),
                None if bits == BitChoice::uniform(PASSTHROUGH_BITS) => node.quant = None,
                None => {
                    return Err(Error::Config(format!(
                        "no calibrated variant of `{}` at {bits}",
                        node.id
                    )))
                }
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{gaussian, tiny_cnn, tiny_mlp};

    #[test]
    fn collected_io_matches_trace() {
        let g = tiny_cnn(1).fuse_conv_bn().unwrap();
        let x = gaussian(&[300, 2, 6, 6], 2, 1.0);
        let io = collect_layer_io(&g, &x, Precision::Full).unwrap();
        assert_eq!(io.keys().collect::<Vec<_>>(), vec!["conv1", "conv2", "fc"]);
        let trace = g.forward_trace(&x, Precision::Full).unwrap();
        assert_eq!(io["conv1"].input, x);
        assert_eq!(
            io["conv2"].input,
            *trace.output(g.index_of("relu1").unwrap())
        );
        assert_eq!(io["fc"].output, *trace.output(g.index_of("fc").unwrap()));
    }

    #[test]
    fn quantized_model_carries_config_bits() {
        let g = tiny_mlp(3);
        let x = gaussian(&[40, 8], 4, 1.0);
        let mut cfg = BitConfig::uniform(&g, BitChoice::uniform(8));
        cfg.set("fc2", BitChoice::new(4, 6));
        let q = quantize_model(&g, &x, &cfg, RangeInit::MinMax).unwrap();
        assert_eq!(
            q.node("fc1").unwrap().quant.as_ref().unwrap().bits(),
            (8, 8)
        );
        assert_eq!(
            q.node("fc2").unwrap().quant.as_ref().unwrap().bits(),
            (4, 6)
        );
        let fp = g.forward(&x, Precision::Full).unwrap();
        let q8 = quantize_model(
            &g,
            &x,
            &BitConfig::uniform(&g, BitChoice::uniform(8)),
            RangeInit::MinMax,
        )
        .unwrap();
        let q4 = quantize_model(
            &g,
            &x,
            &BitConfig::uniform(&g, BitChoice::uniform(4)),
            RangeInit::MinMax,
        )
        .unwrap();
        let e8 = q8.forward(&x, Precision::Quantized).unwrap().mse(&fp);
        let e4 = q4.forward(&x, Precision::Quantized).unwrap().mse(&fp);
        assert!(e8 < e4);
    }

    #[test]
    fn stitching_selects_bank_variants() {
        let g = tiny_mlp(5);
        let x = gaussian(&[40, 8], 6, 1.0);
        let io = collect_layer_io(&g, &x, Precision::Full).unwrap();
        let choices = [BitChoice::uniform(4), BitChoice::uniform(8)];
        let bank = LayerBank::round_to_nearest(&g, &io, &choices, RangeInit::MinMax).unwrap();
        let mut cfg = BitConfig::uniform(&g, BitChoice::uniform(8));
        cfg.set("fc1", BitChoice::uniform(4));
        let s = bank.stitch(&cfg).unwrap();
        assert_eq!(
            s.node("fc1").unwrap(),
            bank.get("fc1", BitChoice::uniform(4)).unwrap()
        );
        assert_eq!(
            s.node("fc2").unwrap(),
            bank.get("fc2", BitChoice::uniform(8)).unwrap()
        );
        assert_eq!(
            s,
            quantize_with_io(&g, &io, &cfg, RangeInit::MinMax).unwrap()
        );
        cfg.set("fc2", BitChoice::uniform(6));
        assert!(bank.stitch(&cfg).is_err());
        let fp = bank
            .stitch(&BitConfig::uniform(&g, BitChoice::uniform(32)))
            .unwrap();
        assert_eq!(fp, g);
    }

    #[test]
    fn recalibration_keeps_weights_and_bits() {
        let g = tiny_cnn(7).fuse_conv_bn().unwrap();
        let x = gaussian(&[20, 2, 6, 6], 8, 1.0);
        let q = quantize_model(
            &g,
            &x,
            &BitConfig::uniform(&g, BitChoice::uniform(4)),
            RangeInit::MinMax,
        )
        .unwrap();
        let r = recalibrate_activations(&q, &x, RangeInit::MinMax).unwrap();
        for (a, b) in q.nodes.iter().zip(&r.nodes) {
            assert_eq!(a.params, b.params);
            if let (Some(qa), Some(qb)) = (&a.quant, &b.quant) {
                assert_eq!(qa.weight, qb.weight);
                assert_eq!(qa.input.bits, qb.input.bits);
            }
        }
        // The first layer sees the graph input either way.
        assert_eq!(q.nodes[0].quant, r.nodes[0].quant);
    }
}
