//! Per-layer sensitivity measurement.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{BitChoice, BitConfig, ChoiceEntry, LayerChoices, SensitivityTable};
use crate::error::{Error, Result};
use crate::eval::{kd_loss, EVAL_CHUNK};
use crate::graph::{LayerNode, Precision};
use crate::qmodel::LayerBank;
use crate::tensor::Tensor;

/// Performance gain of running a layer at `choice` instead of `base`.
pub trait PerfMetric: Sync {
    fn dperf(&self, layer: &LayerNode, base: BitChoice, choice: BitChoice) -> Result<f64>;
}

/// Weight bits saved: `N_l·(base_k − k)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParamBits;

impl PerfMetric for ParamBits {
    fn dperf(&self, layer: &LayerNode, base: BitChoice, choice: BitChoice) -> Result<f64> {
        Ok(
            layer.num_weight_params() as f64
                * (base.weight_bits as f64 - choice.weight_bits as f64),
        )
    }
}

/// User-supplied gain per `(layer, choice)`; the base choice is always 0.
#[derive(Debug, Clone, Default)]
pub struct PerfTable(pub BTreeMap<(String, BitChoice), f64>);

impl PerfMetric for PerfTable {
    fn dperf(&self, layer: &LayerNode, base: BitChoice, choice: BitChoice) -> Result<f64> {
        if choice == base {
            return Ok(0.0);
        }
        self.0
            .get(&(layer.id.clone(), choice))
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "performance table has no entry for `{}` at {choice}",
                    layer.id
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct ProfileOptions {
    pub base: BitChoice,
    /// Candidate lower precisions (the base may be included; it is skipped).
    pub choices: Vec<BitChoice>,
    /// Layers restricted to the base precision.
    pub exempt: Vec<String>,
}

fn loss_of(bank: &LayerBank, cfg: &BitConfig, inputs: &Tensor, teacher: &Tensor) -> Result<f64> {
    let g = bank.stitch(cfg)?;
    let out = g.forward_batched(inputs, Precision::Quantized, EVAL_CHUNK)?;
    let loss = kd_loss(teacher, &out)?;
    Ok(if loss.is_finite() {
        loss
    } else {
        f64::INFINITY
    })
}

/// Loss increase of lowering one layer at a time from the all-base model,
/// measured as distillation loss against `teacher` (the full-precision
/// outputs on `inputs`). Non-finite losses become `+∞`.
pub fn profile_sensitivity(
    bank: &LayerBank,
    inputs: &Tensor,
    teacher: &Tensor,
    opts: &ProfileOptions,
    perf: &dyn PerfMetric,
) -> Result<SensitivityTable> {
    let g = &bank.base;
    let base_cfg = BitConfig::uniform(g, opts.base);
    let reference_loss = loss_of(bank, &base_cfg, inputs, teacher)?;
    if !reference_loss.is_finite() {
        return Err(Error::NonFinite("loss of the base-precision model".into()));
    }
    let layers: Vec<&LayerNode> = g.nodes.iter().filter(|n| n.is_weight_layer()).collect();
    let jobs: Vec<(usize, BitChoice)> = layers
        .iter()
        .enumerate()
        .filter(|(_, n)| !opts.exempt.contains(&n.id))
        .flat_map(|(i, _)| {
            opts.choices
                .iter()
                .filter(|&&c| c != opts.base)
                .map(move |&c| (i, c))
        })
        .collect();
    let losses: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, c)| {
            let mut cfg = base_cfg.clone();
            cfg.set(&layers[i].id, c);
            loss_of(bank, &cfg, inputs, teacher)
        })
        .collect::<Result<_>>()?;
    let mut table_layers: Vec<LayerChoices> = layers
        .iter()
        .map(|n| LayerChoices {
            layer: n.id.clone(),
            num_params: Some(n.num_weight_params()),
            choices: vec![ChoiceEntry {
                bits: opts.base,
                dloss: 0.0,
                dperf: 0.0,
            }],
        })
        .collect();
    for (&(i, c), loss) in jobs.iter().zip(losses) {
        table_layers[i].choices.push(ChoiceEntry {
            bits: c,
            dloss: loss - reference_loss,
            dperf: perf.dperf(layers[i], opts.base, c)?,
        });
    }
    Ok(SensitivityTable {
        base: opts.base,
        reference_loss,
        layers: table_layers,
    })
}

/// For each configuration, the table's predicted loss increase (sum of
/// per-layer entries) paired with the jointly measured increase.
pub fn additivity_samples(
    bank: &LayerBank,
    table: &SensitivityTable,
    inputs: &Tensor,
    teacher: &Tensor,
    configs: &[BitConfig],
) -> Result<Vec<(f64, f64)>> {
    configs
        .par_iter()
        .map(|cfg| {
            let (predicted, _) = table.totals(cfg)?;
            let measured = loss_of(bank, cfg, inputs, teacher)? - table.reference_loss;
            Ok((predicted, measured))
        })
        .collect()
}

/// Pearson correlation coefficient; NaN when either side is constant.
pub fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Precision;
    use crate::qmodel::{collect_layer_io, RangeInit};
    use crate::test_support::{gaussian, tiny_cnn};

    fn setup() -> (LayerBank, Tensor, Tensor) {
        let g = tiny_cnn(1).fuse_conv_bn().unwrap();
        let x = gaussian(&[64, 2, 6, 6], 2, 1.0);
        let teacher = g.forward(&x, Precision::Full).unwrap();
        let io = collect_layer_io(&g, &x, Precision::Full).unwrap();
        let choices = [
            BitChoice::uniform(8),
            BitChoice::uniform(4),
            BitChoice::uniform(2),
        ];
        (
            LayerBank::round_to_nearest(&g, &io, &choices, RangeInit::MinMax).unwrap(),
            x,
            teacher,
        )
    }

    #[test]
    fn table_rows_and_gains() {
        let (bank, x, teacher) = setup();
        let opts = ProfileOptions {
            base: BitChoice::uniform(8),
            choices: vec![BitChoice::uniform(4), BitChoice::uniform(2)],
            exempt: vec!["fc".into()],
        };
        let t = profile_sensitivity(&bank, &x, &teacher, &opts, &ParamBits).unwrap();
        t.validate().unwrap();
        assert_eq!(t.layers.len(), 3);
        assert_eq!(t.layer("fc").unwrap().choices.len(), 1);
        let conv2 = t.layer("conv2").unwrap();
        assert_eq!(
            conv2.choices[0],
            ChoiceEntry {
                bits: BitChoice::uniform(8),
                dloss: 0.0,
                dperf: 0.0
            }
        );
        assert_eq!(conv2.choices[1].dperf, 4.0 * 144.0);
        assert_eq!(conv2.choices[2].dperf, 6.0 * 144.0);
        assert!(conv2.choices[2].dloss > conv2.choices[1].dloss);
        assert!(t.reference_loss >= 0.0);
    }

    #[test]
    fn additivity_of_single_layer_configs_is_exact() {
        let (bank, x, teacher) = setup();
        let opts = ProfileOptions {
            base: BitChoice::uniform(8),
            choices: vec![BitChoice::uniform(4)],
            exempt: vec![],
        };
        let t = profile_sensitivity(&bank, &x, &teacher, &opts, &ParamBits).unwrap();
        let mut cfg = BitConfig::uniform(&bank.base, BitChoice::uniform(8));
        cfg.set("conv2", BitChoice::uniform(4));
        let s = additivity_samples(&bank, &t, &x, &teacher, &[cfg]).unwrap();
        assert!((s[0].0 - s[0].1).abs() < 1e-12);
    }

    #[test]
    fn user_perf_table() {
        let (bank, x, teacher) = setup();
        let mut perf = PerfTable::default();
        for id in ["conv1", "conv2", "fc"] {
            perf.0.insert((id.to_string(), BitChoice::uniform(4)), 3.5);
        }
        let opts = ProfileOptions {
            base: BitChoice::uniform(8),
            choices: vec![BitChoice::uniform(4)],
            exempt: vec![],
        };
        let t = profile_sensitivity(&bank, &x, &teacher, &opts, &perf).unwrap();
        assert!(t.layers.iter().all(|l| l.choices[1].dperf == 3.5));
        let opts = ProfileOptions {
            choices: vec![BitChoice::uniform(2)],
            ..opts
        };
        assert!(profile_sensitivity(&bank, &x, &teacher, &opts, &perf).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.5)]) - 0.9986).abs() < 1e-3);
        assert!((pearson(&[(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)]) + 1.0).abs() < 1e-12);
    }
}
