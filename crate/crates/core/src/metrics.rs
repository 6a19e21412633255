//! The five evaluation components.
//!
//! Accuracy and convergence are computed from a single log. Computational
//! efficiency, fairness and personalization are comparative: each is a
//! min-max normalization across the whole evaluated algorithm set, so they
//! take a map of raw measurements keyed by algorithm name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::ExperimentLog;

/// Index given to every member of a comparative set that cannot be told apart.
pub const NEUTRAL_INDEX: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaClock {
    #[default]
    CostUnits,
    WallClock,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyVariant {
    /// `-sum a_i ln a_i` on the raw accuracies.
    #[default]
    Raw,
    /// Shannon entropy of `a_i / sum_j a_j`.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub target_accuracy: f64,
    pub round_budget: usize,
    pub accuracy_window: usize,
    pub tta_clock: TtaClock,
    pub entropy: EntropyVariant,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            target_accuracy: 0.8,
            round_budget: 1000,
            accuracy_window: 10,
            tta_clock: TtaClock::CostUnits,
            entropy: EntropyVariant::Raw,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_accuracy > 0.0 && self.target_accuracy < 1.0) {
            return Err(Error::Config("target_accuracy must lie in (0, 1)".into()));
        }
        if self.round_budget == 0 || self.accuracy_window == 0 {
            return Err(Error::Config(
                "round_budget and accuracy_window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The component indices of one algorithm, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentIndices {
    pub accuracy: f64,
    pub convergence: f64,
    pub comp_efficiency: f64,
    pub fairness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personalization: Option<f64>,
}

impl ComponentIndices {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("accuracy", Some(self.accuracy)),
            ("convergence", Some(self.convergence)),
            ("comp_efficiency", Some(self.comp_efficiency)),
            ("fairness", Some(self.fairness)),
            ("personalization", self.personalization),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::arg(format!("{name} index {v} is outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

fn nonempty(log: &ExperimentLog) -> Result<()> {
    if log.records.is_empty() {
        Err(Error::arg(format!("log for {} has no rounds", log.algorithm_name)))
    } else {
        Ok(())
    }
}

/// Mean of the per-round mean client accuracy over the final `W` rounds.
pub fn accuracy_index(log: &ExperimentLog, cfg: &MetricConfig) -> Result<f64> {
    nonempty(log)?;
    let w = cfg.accuracy_window.min(log.records.len());
    let tail = &log.records[log.records.len() - w..];
    let means: Vec<f64> = tail.iter().map(|r| r.mean_client_accuracy).collect();
    Ok(crate::fedsim::mean(&means))
}

/// Per-client accuracy averaged over the final `W` rounds, ordered by client id.
pub fn final_client_accuracies(log: &ExperimentLog, cfg: &MetricConfig) -> Result<Vec<f64>> {
    nonempty(log)?;
    let w = cfg.accuracy_window.min(log.records.len());
    let tail = &log.records[log.records.len() - w..];
    let n = tail[0].client_accuracies.len();
    let mut out = vec![0.0; n];
    for r in tail {
        if r.client_accuracies.len() != n {
            return Err(Error::arg("client count changes between rounds"));
        }
        out.iter_mut()
            .zip(&r.client_accuracies)
            .for_each(|(o, a)| *o += a);
    }
    out.iter_mut().for_each(|o| *o /= w as f64);
    Ok(out)
}

/// First round whose mean client accuracy reaches the target, or the round
/// budget when no round does.
pub fn first_crossing_round(log: &ExperimentLog, cfg: &MetricConfig) -> usize {
    log.records
        .iter()
        .find(|r| r.mean_client_accuracy >= cfg.target_accuracy)
        .map_or(cfg.round_budget, |r| r.round.min(cfg.round_budget))
}

/// `1 - r*/R_max`, where `r*` is the first crossing round.
pub fn convergence_index(log: &ExperimentLog, cfg: &MetricConfig) -> Result<f64> {
    nonempty(log)?;
    Ok(convergence_from_round(first_crossing_round(log, cfg), cfg.round_budget))
}

pub fn convergence_from_round(r_star: usize, round_budget: usize) -> f64 {
    1.0 - r_star.min(round_budget) as f64 / round_budget as f64
}

/// Cumulative clock up to and including round `r*`; capped at the budget or
/// the last logged round when the target is never reached.
pub fn tta(log: &ExperimentLog, cfg: &MetricConfig) -> Result<f64> {
    nonempty(log)?;
    let r_star = first_crossing_round(log, cfg);
    let clock = |r: &crate::fedsim::RoundRecord| match cfg.tta_clock {
        TtaClock::CostUnits => r.cost_units,
        TtaClock::WallClock => r.wall_clock_seconds,
    };
    Ok(log
        .records
        .iter()
        .take_while(|r| r.round <= r_star)
        .map(clock)
        .sum())
}

fn min_max(values: &BTreeMap<String, f64>, higher_is_better: bool) -> Result<BTreeMap<String, f64>> {
    if values.is_empty() {
        return Err(Error::arg("comparative index over an empty algorithm set"));
    }
    if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::arg(format!("{name} has non-finite measurement {v}")));
    }
    let lo = values.values().copied().fold(f64::INFINITY, f64::min);
    let hi = values.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(values
        .iter()
        .map(|(k, &v)| {
            let idx = if hi == lo {
                NEUTRAL_INDEX
            } else if higher_is_better {
                (v - lo) / (hi - lo)
            } else {
                (hi - v) / (hi - lo)
            };
            (k.clone(), idx)
        })
        .collect())
}

/// Lower TTA is better: the slowest algorithm scores 0, the fastest 1.
pub fn comp_efficiency_indices(ttas: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    min_max(ttas, false)
}

/// Lower entropy is better: the lowest-entropy algorithm scores 1.
pub fn fairness_indices(entropies: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    min_max(entropies, false)
}

/// Higher MPI is better.
pub fn personalization_indices(mpis: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    min_max(mpis, true)
}

fn check_unit_interval(accuracies: &[f64]) -> Result<()> {
    match accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        Some(a) => Err(Error::arg(format!("accuracy {a} is outside [0, 1]"))),
        None => Ok(()),
    }
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `H(L) = -sum a_i ln a_i` over the raw client accuracy list, `0 ln 0 = 0`.
pub fn fairness_entropy(accuracies: &[f64]) -> Result<f64> {
    check_unit_interval(accuracies)?;
    // -0.0 from an all-ones list is normalized to 0.0
    Ok(-accuracies.iter().map(|&a| xlnx(a)).sum::<f64>() + 0.0)
}

/// Shannon entropy of the accuracies normalized to a distribution. An
/// all-zero list has entropy 0.
pub fn fairness_entropy_normalized(accuracies: &[f64]) -> Result<f64> {
    check_unit_interval(accuracies)?;
    let total: f64 = accuracies.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(-accuracies.iter().map(|&a| xlnx(a / total)).sum::<f64>() + 0.0)
}

pub fn entropy(accuracies: &[f64], variant: EntropyVariant) -> Result<f64> {
    match variant {
        EntropyVariant::Raw => fairness_entropy(accuracies),
        EntropyVariant::Normalized => fairness_entropy_normalized(accuracies),
    }
}
