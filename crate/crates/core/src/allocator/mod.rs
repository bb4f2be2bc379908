//! Mixed-precision bit allocation: per-layer sensitivity tables, an exact
//! multiple-choice knapsack solver and greedy baselines.

mod greedy;
mod profile;
mod solver;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;

pub use greedy::{greedy_accuracy, greedy_compression};
pub use profile::{
    additivity_samples, pearson, profile_sensitivity, ParamBits, PerfMetric, PerfTable,
    ProfileOptions,
};
pub use solver::{brute_force, solve_ip, solve_ip_for_ratio, solve_ip_sweep, Solution, SweepPoint};

/// Weight and activation bit-widths of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct BitChoice {
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl BitChoice {
    pub fn new(weight_bits: u32, act_bits: u32) -> Self {
        Self {
            weight_bits,
            act_bits,
        }
    }

    pub fn uniform(bits: u32) -> Self {
        Self::new(bits, bits)
    }
}

impl From<(u32, u32)> for BitChoice {
    fn from((k, n): (u32, u32)) -> Self {
        Self::new(k, n)
    }
}

impl From<BitChoice> for (u32, u32) {
    fn from(c: BitChoice) -> Self {
        (c.weight_bits, c.act_bits)
    }
}

impl fmt::Display for BitChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}a{}", self.weight_bits, self.act_bits)
    }
}

/// Bit-widths for every conv/fc layer, keyed by layer id.
///
/// Serializes as a JSON object mapping each layer id to `[weight_bits, act_bits]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitConfig(pub BTreeMap<String, BitChoice>);

impl BitConfig {
    /// Every weight layer of `g` at `choice`.
    pub fn uniform(g: &ModelGraph, choice: BitChoice) -> Self {
        Self(
            g.weight_layers()
                .into_iter()
                .map(|id| (id, choice))
                .collect(),
        )
    }

    pub fn get(&self, layer: &str) -> Option<BitChoice> {
        self.0.get(layer).copied()
    }

    pub fn set(&mut self, layer: &str, choice: BitChoice) {
        self.0.insert(layer.to_string(), choice);
    }

    /// Errors unless every weight layer of `g` has an entry and no extra ids appear.
    pub fn check_covers(&self, g: &ModelGraph) -> Result<()> {
        let layers = g.weight_layers();
        for id in &layers {
            let c = self.get(id).ok_or_else(|| {
                Error::Config(format!("bit configuration has no entry for layer `{id}`"))
            })?;
            for bits in [c.weight_bits, c.act_bits] {
                if !(bits == crate::quant::PASSTHROUGH_BITS || (2..=8).contains(&bits)) {
                    return Err(Error::Config(format!(
                        "layer `{id}`: unsupported bit-width {bits}"
                    )));
                }
            }
        }
        if let Some(extra) = self.0.keys().find(|k| !layers.contains(k)) {
            return Err(Error::Config(format!(
                "bit configuration names unknown layer `{extra}`"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Σ_l N_l·k_l / (32·Σ_l N_l) over the weight layers of `g`, where `N_l`
/// counts weight elements.
pub fn compression_ratio(g: &ModelGraph, cfg: &BitConfig) -> Result<f64> {
    cfg.check_covers(g)?;
    let counts: Vec<(usize, u32)> = g
        .nodes
        .iter()
        .filter(|n| n.is_weight_layer())
        .map(|n| {
            (
                n.num_weight_params(),
                cfg.get(&n.id).expect("covered").weight_bits,
            )
        })
        .collect();
    Ok(ratio_of(&counts))
}

pub(crate) fn ratio_of(counts: &[(usize, u32)]) -> f64 {
    let total: f64 = counts.iter().map(|&(n, _)| n as f64).sum();
    let bits: f64 = counts.iter().map(|&(n, k)| n as f64 * k as f64).sum();
    bits / (32.0 * total)
}

/// One row of a sensitivity table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiceEntry {
    pub bits: BitChoice,
    /// Loss increase when only this layer is lowered to `bits`.
    pub dloss: f64,
    /// Performance gain of `bits` over the base precision.
    pub dperf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerChoices {
    pub layer: String,
    /// Weight element count, when known.
    pub num_params: Option<usize>,
    pub choices: Vec<ChoiceEntry>,
}

impl LayerChoices {
    pub fn base(&self, base: BitChoice) -> Option<&ChoiceEntry> {
        self.choices.iter().find(|c| c.bits == base)
    }
}

/// Per-layer `(ΔL, ΔP)` for every candidate precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTable {
    pub base: BitChoice,
    /// Loss of the all-base-precision model.
    pub reference_loss: f64,
    /// Layers in graph order.
    pub layers: Vec<LayerChoices>,
}

impl SensitivityTable {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("sensitivity table has no layers".into()));
        }
        for l in &self.layers {
            let bases = l.choices.iter().filter(|c| c.bits == self.base).count();
            if bases != 1 {
                return Err(Error::Config(format!(
                    "layer `{}` has {bases} base-precision ({}) rows, expected exactly one",
                    l.layer, self.base
                )));
            }
            if l.choices
                .iter()
                .any(|c| c.dloss.is_nan() || !c.dperf.is_finite())
            {
                return Err(Error::Config(format!(
                    "layer `{}` has a NaN or infinite entry",
                    l.layer
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, id: &str) -> Option<&LayerChoices> {
        self.layers.iter().find(|l| l.layer == id)
    }

    /// Copies weight element counts from `g`.
    pub fn with_param_counts(mut self, g: &ModelGraph) -> Result<Self> {
        for l in &mut self.layers {
            l.num_params = Some(g.node(&l.layer)?.num_weight_params());
        }
        Ok(self)
    }

    /// Recovers missing weight element counts from parameter-bits gains
    /// (`dperf = N·(base_k − k)`). Fails for a layer whose only rows are at
    /// the base weight precision, or whose rows disagree on the count.
    pub fn with_inferred_param_counts(mut self) -> Result<Self> {
        let base_k = self.base.weight_bits as f64;
        for l in self.layers.iter_mut().filter(|l| l.num_params.is_none()) {
            let mut counts = l
                .choices
                .iter()
                .filter(|c| (c.bits.weight_bits as f64) < base_k)
                .map(|c| c.dperf / (base_k - c.bits.weight_bits as f64));
            let first = counts.next().ok_or_else(|| {
                Error::Config(format!(
                    "cannot infer the parameter count of `{}`: no lower-precision row",
                    l.layer
                ))
            })?;
            if first < 0.0 || first.fract() != 0.0 || counts.any(|n| n != first) {
                return Err(Error::Config(format!(
                    "gains of `{}` are not parameter-bit savings; pass the model to get parameter counts",
                    l.layer
                )));
            }
            l.num_params = Some(first as usize);
        }
        Ok(self)
    }

    /// Restricts every layer to choices whose weight and activation bits are
    /// in `allowed`. The base choice is always kept.
    pub fn restricted(&self, allowed: &[u32]) -> Self {
        let mut t = self.clone();
        for l in &mut t.layers {
            l.choices.retain(|c| {
                c.bits == self.base
                    || (allowed.contains(&c.bits.weight_bits) && allowed.contains(&c.bits.act_bits))
            });
        }
        t
    }

    /// Compression ratio of `cfg` from the table's parameter counts.
    pub fn ratio(&self, cfg: &BitConfig) -> Result<f64> {
        let counts = self
            .layers
            .iter()
            .map(|l| {
                let n = l.num_params.ok_or_else(|| {
                    Error::Config(format!("no parameter count for layer `{}`", l.layer))
                })?;
                let c = cfg
                    .get(&l.layer)
                    .ok_or_else(|| Error::Config(format!("no bits for layer `{}`", l.layer)))?;
                Ok((n, c.weight_bits))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ratio_of(&counts))
    }

    /// Sum of the per-layer table entries selected by `cfg`.
    pub fn totals(&self, cfg: &BitConfig) -> Result<(f64, f64)> {
        let mut dloss = 0.0;
        let mut dperf = 0.0;
        for l in &self.layers {
            let bits = cfg
                .get(&l.layer)
                .ok_or_else(|| Error::Config(format!("no bits for layer `{}`", l.layer)))?;
            let e =
                l.choices.iter().find(|c| c.bits == bits).ok_or_else(|| {
                    Error::Config(format!("layer `{}` has no {bits} entry", l.layer))
                })?;
            dloss += e.dloss;
            dperf += e.dperf;
        }
        Ok((dloss, dperf))
    }

    /// Writes `layer,k,n,dloss,dperf` rows in layer order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "k", "n", "dloss", "dperf"])?;
        for l in &self.layers {
            for c in &l.choices {
                out.write_record([
                    l.layer.clone(),
                    c.bits.weight_bits.to_string(),
                    c.bits.act_bits.to_string(),
                    format_float(c.dloss),
                    format_float(c.dperf),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Parses the CSV written by [`write_csv`](Self::write_csv). The base
    /// precision is the widest weight/activation pair present; the reference
    /// loss is unknown and set to 0.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["layer", "k", "n", "dloss", "dperf"] {
            return Err(Error::Config(format!(
                "unexpected sensitivity CSV header {headers:?}"
            )));
        }
        let mut layers: Vec<LayerChoices> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let parse_err = |what: &str| Error::Config(format!("CSV row {}: bad {what}", row + 2));
            let layer = field(0).to_string();
            let k = u32::from_str(field(1)).map_err(|_| parse_err("k"))?;
            let n = u32::from_str(field(2)).map_err(|_| parse_err("n"))?;
            let dloss = parse_float(field(3)).ok_or_else(|| parse_err("dloss"))?;
            let dperf = parse_float(field(4)).ok_or_else(|| parse_err("dperf"))?;
            let entry = ChoiceEntry {
                bits: BitChoice::new(k, n),
                dloss,
                dperf,
            };
            match layers.iter_mut().find(|l| l.layer == layer) {
                Some(l) => l.choices.push(entry),
                None => layers.push(LayerChoices {
                    layer,
                    num_params: None,
                    choices: vec![entry],
                }),
            }
        }
        let base = layers
            .iter()
            .flat_map(|l| l.choices.iter().map(|c| c.bits))
            .max()
            .ok_or_else(|| Error::Config("empty sensitivity CSV".into()))?;
        let t = Self {
            base,
            reference_loss: 0.0,
            layers,
        };
        t.validate()?;
        Ok(t)
    }
}

fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:e}")
    }
}

fn parse_float(s: &str) -> Option<f64> {
    match s {
        "inf" | "+inf" => Some(f64::INFINITY),
        _ => s.parse().ok().filter(|v: &f64| !v.is_nan()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::tiny_mlp;

    #[test]
    fn uniform_ratios() {
        let g = tiny_mlp(1);
        assert_eq!(
            compression_ratio(&g, &BitConfig::uniform(&g, BitChoice::uniform(8))).unwrap(),
            0.25
        );
        assert_eq!(
            compression_ratio(&g, &BitConfig::uniform(&g, BitChoice::uniform(4))).unwrap(),
            0.125
        );
    }

    #[test]
    fn param_counts_are_recovered_from_gains() {
        let text = "layer,k,n,dloss,dperf\na,8,8,0,0\na,4,4,0.5,400\na,2,2,1.5,600\nb,8,8,0,0\n";
        let t = SensitivityTable::read_csv(text.as_bytes()).unwrap();
        let err = t.clone().with_inferred_param_counts().unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        let text = text.replace("b,8,8,0,0\n", "b,8,8,0,0\nb,6,6,0.1,20\n");
        let t = SensitivityTable::read_csv(text.as_bytes())
            .unwrap()
            .with_inferred_param_counts()
            .unwrap();
        assert_eq!(t.layer("a").unwrap().num_params, Some(100));
        assert_eq!(t.layer("b").unwrap().num_params, Some(10));
        let bad = "layer,k,n,dloss,dperf\na,8,8,0,0\na,4,4,0.5,400\na,2,2,1.5,601\n";
        assert!(SensitivityTable::read_csv(bad.as_bytes())
            .unwrap()
            .with_inferred_param_counts()
            .is_err());
    }

    #[test]
    fn half_and_half_ratio() {
        assert_eq!(ratio_of(&[(100, 8), (100, 4)]), 0.1875);
    }

    #[test]
    fn config_must_cover_graph() {
        let g = tiny_mlp(1);
        let mut cfg = BitConfig::uniform(&g, BitChoice::uniform(8));
        cfg.0.remove("fc2");
        assert!(compression_ratio(&g, &cfg).is_err());
        let mut cfg = BitConfig::uniform(&g, BitChoice::uniform(8));
        cfg.set("nope", BitChoice::uniform(8));
        assert!(cfg.check_covers(&g).is_err());
        let cfg = BitConfig::uniform(&g, BitChoice::uniform(9));
        assert!(cfg.check_covers(&g).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let g = tiny_mlp(1);
        let mut cfg = BitConfig::uniform(&g, BitChoice::uniform(8));
        cfg.set("fc2", BitChoice::new(4, 6));
        let text = cfg.to_json().unwrap();
        assert!(text.contains("\"fc2\""));
        assert_eq!(BitConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(
            BitConfig::from_json(r#"{"fc1":[8,8],"fc2":[4,4]}"#)
                .unwrap()
                .get("fc2"),
            Some(BitChoice::uniform(4))
        );
    }

    #[test]
    fn csv_round_trip() {
        let table = SensitivityTable {
            base: BitChoice::uniform(8),
            reference_loss: 0.0,
            layers: vec![
                LayerChoices {
                    layer: "a".into(),
                    num_params: None,
                    choices: vec![
                        ChoiceEntry {
                            bits: BitChoice::uniform(8),
                            dloss: 0.0,
                            dperf: 0.0,
                        },
                        ChoiceEntry {
                            bits: BitChoice::uniform(4),
                            dloss: 0.125,
                            dperf: 400.0,
                        },
                    ],
                },
                LayerChoices {
                    layer: "b".into(),
                    num_params: None,
                    choices: vec![
                        ChoiceEntry {
                            bits: BitChoice::uniform(8),
                            dloss: 0.0,
                            dperf: 0.0,
                        },
                        ChoiceEntry {
                            bits: BitChoice::uniform(4),
                            dloss: f64::INFINITY,
                            dperf: 40.0,
                        },
                        ChoiceEntry {
                            bits: BitChoice::uniform(2),
                            dloss: -1.5e-3,
                            dperf: 60.0,
                        },
                    ],
                },
            ],
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layer,k,n,dloss,dperf\n"));
        assert_eq!(text.lines().count(), 6);
        assert_eq!(SensitivityTable::read_csv(buf.as_slice()).unwrap(), table);
    }

    #[test]
    fn csv_without_base_row_is_rejected() {
        let text = "layer,k,n,dloss,dperf\na,8,8,0,0\nb,4,4,0.1,4\n";
        assert!(SensitivityTable::read_csv(text.as_bytes()).is_err());
    }
}
