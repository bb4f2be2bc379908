//! Exact multiple-choice knapsack: pick one precision per layer maximizing
//! the total performance gain subject to a total loss-degradation budget.
//!
//! The solver enumerates the Pareto frontier of partial sums `(ΣΔL, ΣΔP)`
//! layer by layer. A partial assignment is dropped when another one has no
//! larger loss and no smaller gain, or when even the cheapest completion
//! would exceed the budget. Both sums are accumulated in layer order, the
//! same order used by [`brute_force`], so results agree exactly.

use std::cmp::Ordering;

use super::{BitChoice, BitConfig, SensitivityTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub config: BitConfig,
    pub total_dloss: f64,
    pub total_dperf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub budget: f64,
    pub solution: Solution,
}

/// Candidate choices of one layer with finite loss, as `(ΔL, ΔP, bits)`.
fn finite_choices(table: &SensitivityTable) -> Result<Vec<Vec<(f64, f64, BitChoice)>>> {
    table.validate()?;
    table
        .layers
        .iter()
        .map(|l| {
            let c: Vec<_> = l
                .choices
                .iter()
                .filter(|c| c.dloss.is_finite())
                .map(|c| (c.dloss, c.dperf, c.bits))
                .collect();
            if c.is_empty() {
                Err(Error::Infeasible(format!(
                    "layer `{}` has no choice with finite loss",
                    l.layer
                )))
            } else {
                Ok(c)
            }
        })
        .collect()
}

fn check_budget(budget: f64) -> Result<()> {
    if budget.is_nan() || budget == f64::NEG_INFINITY {
        return Err(Error::Config(format!("invalid loss budget {budget}")));
    }
    Ok(())
}

#[derive(Clone)]
struct State {
    dloss: f64,
    dperf: f64,
    picks: Vec<BitChoice>,
}

/// Max ΔP, then min ΔL, then lexicographically smaller bits in layer order.
fn better(a: &State, b: &State) -> Ordering {
    b.dperf
        .total_cmp(&a.dperf)
        .then(a.dloss.total_cmp(&b.dloss))
        .then_with(|| a.picks.cmp(&b.picks))
}

fn build(table: &SensitivityTable, best: State) -> Solution {
    let config = BitConfig(
        table
            .layers
            .iter()
            .zip(&best.picks)
            .map(|(l, &c)| (l.layer.clone(), c))
            .collect(),
    );
    Solution {
        config,
        total_dloss: best.dloss,
        total_dperf: best.dperf,
    }
}

/// Exact optimum of `max ΣΔP s.t. ΣΔL ≤ budget`, one choice per layer.
///
/// Choices with infinite ΔL are never selected. Negative ΔL is allowed.
/// Ties prefer the smaller total loss, then lexicographically smaller bits.
pub fn solve_ip(table: &SensitivityTable, budget: f64) -> Result<Solution> {
    check_budget(budget)?;
    let layers = finite_choices(table)?;
    // Cheapest achievable loss over layers l.. (suffix sums).
    let mut min_rest = vec![0.0f64; layers.len() + 1];
    for l in (0..layers.len()).rev() {
        let m = layers[l].iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        min_rest[l] = min_rest[l + 1] + m;
    }
    let slack = 1e-9
        * (1.0 + budget.abs().min(1e12) + min_rest.iter().map(|v| v.abs()).fold(0.0, f64::max));
    let mut frontier = vec![State {
        dloss: 0.0,
        dperf: 0.0,
        picks: Vec::new(),
    }];
    for (l, choices) in layers.iter().enumerate() {
        let mut next: Vec<State> = Vec::with_capacity(frontier.len() * choices.len());
        for s in &frontier {
            for &(dl, dp, bits) in choices {
                let dloss = s.dloss + dl;
                if dloss + min_rest[l + 1] > budget + slack {
                    continue;
                }
                let mut picks = s.picks.clone();
                picks.push(bits);
                next.push(State {
                    dloss,
                    dperf: s.dperf + dp,
                    picks,
                });
            }
        }
        // Keep states not dominated by one with smaller-or-equal loss.
        next.sort_by(|a, b| a.dloss.total_cmp(&b.dloss).then_with(|| better(a, b)));
        let mut kept: Vec<State> = Vec::with_capacity(next.len());
        let mut best_perf = f64::NEG_INFINITY;
        for s in next {
            if s.dperf > best_perf {
                best_perf = s.dperf;
                kept.push(s);
            }
        }
        frontier = kept;
    }
    frontier
        .into_iter()
        .filter(|s| s.dloss <= budget)
        .min_by(better)
        .map(|s| build(table, s))
        .ok_or_else(|| Error::Infeasible(format!("no configuration fits loss budget {budget}")))
}

/// Exhaustive enumeration with the same objective and tie-breaking as
/// [`solve_ip`]. Exponential in the number of layers.
pub fn brute_force(table: &SensitivityTable, budget: f64) -> Result<Solution> {
    check_budget(budget)?;
    let layers = finite_choices(table)?;
    let mut idx = vec![0usize; layers.len()];
    let mut best: Option<State> = None;
    loop {
        let mut dloss = 0.0;
        let mut dperf = 0.0;
        let mut picks = Vec::with_capacity(layers.len());
        for (l, &i) in idx.iter().enumerate() {
            let (dl, dp, bits) = layers[l][i];
            dloss += dl;
            dperf += dp;
            picks.push(bits);
        }
        if dloss <= budget {
            let s = State {
                dloss,
                dperf,
                picks,
            };
            if best
                .as_ref()
                .is_none_or(|b| better(&s, b) == Ordering::Less)
            {
                best = Some(s);
            }
        }
        // Odometer increment.
        let mut l = 0;
        loop {
            if l == idx.len() {
                return best.map(|s| build(table, s)).ok_or_else(|| {
                    Error::Infeasible(format!("no configuration fits loss budget {budget}"))
                });
            }
            idx[l] += 1;
            if idx[l] < layers[l].len() {
                break;
            }
            idx[l] = 0;
            l += 1;
        }
    }
}

/// [`solve_ip`] at each budget.
pub fn solve_ip_sweep(table: &SensitivityTable, budgets: &[f64]) -> Result<Vec<SweepPoint>> {
    budgets
        .iter()
        .map(|&budget| {
            Ok(SweepPoint {
                budget,
                solution: solve_ip(table, budget)?,
            })
        })
        .collect()
}

/// Number of bisection steps used by [`solve_ip_for_ratio`].
pub const RATIO_SEARCH_ITERATIONS: usize = 20;

/// Bisects the loss budget for the smallest one whose optimal configuration
/// reaches `target_ratio` (weight bits over 32-bit). If no budget reaches the
/// target, the most compressed optimal configuration is returned.
///
/// Needs parameter counts in `table`.
pub fn solve_ip_for_ratio(table: &SensitivityTable, target_ratio: f64) -> Result<Solution> {
    let layers = finite_choices(table)?;
    let lo_total: f64 = layers
        .iter()
        .map(|c| c.iter().map(|e| e.0).fold(f64::INFINITY, f64::min))
        .sum();
    let hi_total: f64 = layers
        .iter()
        .map(|c| c.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    let mut hi = hi_total;
    let mut best = solve_ip(table, hi)?;
    if table.ratio(&best.config)? > target_ratio {
        return Ok(best);
    }
    let mut lo = lo_total;
    if let Ok(s) = solve_ip(table, lo) {
        if table.ratio(&s.config)? <= target_ratio {
            return Ok(s);
        }
    }
    for _ in 0..RATIO_SEARCH_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        match solve_ip(table, mid) {
            Ok(s) if table.ratio(&s.config)? <= target_ratio => {
                hi = mid;
                best = s;
            }
            _ => lo = mid,
        }
    }
    Ok(best)
}
