//! Greedy allocation baselines.

use super::{BitConfig, ChoiceEntry, LayerChoices, SensitivityTable};
use crate::error::{Error, Result};

/// The most compressing finite-loss choice of a layer (ties: smaller loss).
fn lowest(l: &LayerChoices) -> &ChoiceEntry {
    l.choices
        .iter()
        .filter(|c| c.dloss.is_finite())
        .max_by(|a, b| {
            a.dperf
                .total_cmp(&b.dperf)
                .then(b.dloss.total_cmp(&a.dloss))
        })
        .expect("validated table has a base choice")
}

fn base_config(table: &SensitivityTable) -> BitConfig {
    BitConfig(
        table
            .layers
            .iter()
            .map(|l| (l.layer.clone(), table.base))
            .collect(),
    )
}

fn params(l: &LayerChoices) -> Result<usize> {
    l.num_params
        .ok_or_else(|| Error::Config(format!("no parameter count for layer `{}`", l.layer)))
}

/// Starts with every layer at its lowest precision and promotes layers to
/// base precision from the smallest to the largest (stable by layer order),
/// stopping at the first promotion that would exceed `target_ratio`.
pub fn greedy_compression(table: &SensitivityTable, target_ratio: f64) -> Result<BitConfig> {
    table.validate()?;
    let mut cfg = BitConfig(
        table
            .layers
            .iter()
            .map(|l| (l.layer.clone(), lowest(l).bits))
            .collect(),
    );
    let mut order: Vec<(usize, &LayerChoices)> = table
        .layers
        .iter()
        .map(|l| Ok((params(l)?, l)))
        .collect::<Result<_>>()?;
    order.sort_by_key(|(n, _)| *n);
    for (_, l) in order {
        if cfg.get(&l.layer) == Some(table.base) {
            continue;
        }
        let mut trial = cfg.clone();
        trial.set(&l.layer, table.base);
        if table.ratio(&trial)? > target_ratio {
            break;
        }
        cfg = trial;
    }
    Ok(cfg)
}

/// Starts at base precision and lowers layers to their most compressing
/// choice in ascending order of that choice's ΔL (stable by layer order)
/// until `target_ratio` is met.
pub fn greedy_accuracy(table: &SensitivityTable, target_ratio: f64) -> Result<BitConfig> {
    table.validate()?;
    let mut cfg = base_config(table);
    let mut order: Vec<(f64, &LayerChoices)> =
        table.layers.iter().map(|l| (lowest(l).dloss, l)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, l) in order {
        if table.ratio(&cfg)? <= target_ratio {
            break;
        }
        cfg.set(&l.layer, lowest(l).bits);
    }
    Ok(cfg)
}
