//! Federated strategies: FedAvg, SCAFFOLD and FedDyn.
//!
//! Each strategy is a pair of functions: a client update run on the broadcast
//! model and a server rule that folds the client results into the next global
//! model. Client updates are generic over a [`BatchGradient`] so that a
//! personalizer can replace the data gradient while the strategy keeps its
//! own correction terms.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{
    cross_entropy_rows, local_sgd, BatchGradient, ModelParams, ModelSpec, PlainGradient, SgdConfig,
};

pub const DEFAULT_FEDDYN_ALPHA: f64 = 0.1;
pub const DEFAULT_SERVER_LR: f64 = 1.0;

fn default_alpha() -> f64 {
    DEFAULT_FEDDYN_ALPHA
}

fn default_server_lr() -> f64 {
    DEFAULT_SERVER_LR
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategyConfig {
    FedAvg {},
    FedDyn {
        #[serde(default = "default_alpha")]
        feddyn_alpha: f64,
    },
    Scaffold {
        #[serde(default = "default_server_lr")]
        server_lr: f64,
    },
}

impl StrategyConfig {
    pub fn fedavg() -> Self {
        StrategyConfig::FedAvg {}
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::FedAvg {} => "fedavg",
            StrategyConfig::FedDyn { .. } => "feddyn",
            StrategyConfig::Scaffold { .. } => "scaffold",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategyConfig::FedAvg {} => Ok(()),
            StrategyConfig::FedDyn { feddyn_alpha } if feddyn_alpha > 0.0 && feddyn_alpha.is_finite() => Ok(()),
            StrategyConfig::FedDyn { .. } => Err(Error::arg("feddyn_alpha must be positive")),
            StrategyConfig::Scaffold { server_lr } if server_lr > 0.0 && server_lr.is_finite() => Ok(()),
            StrategyConfig::Scaffold { .. } => Err(Error::arg("server_lr must be positive")),
        }
    }
}

fn check_lengths<'a>(expected: usize, vs: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
    for v in vs {
        if v.len() != expected {
            return Err(Error::arg(format!(
                "vector length {} does not match parameter length {expected}",
                v.len()
            )));
        }
    }
    Ok(())
}

/// `sum_i weights[i] * vectors[i]`, computed as `v_0 + sum_i weights[i] * (v_i - v_0)`
/// in the given order. The weights must sum to one. Identical inputs come back
/// bit-for-bit unchanged.
pub(crate) fn weighted_mean(vectors: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let mut out = vectors[0].to_vec();
    for (v, &w) in vectors.iter().zip(weights).skip(1) {
        for ((o, &x), &x0) in out.iter_mut().zip(v.iter()).zip(vectors[0]) {
            *o += w * (x - x0);
        }
    }
    out
}

fn uniform_mean(vectors: &[&[f64]]) -> Vec<f64> {
    let w = 1.0 / vectors.len() as f64;
    weighted_mean(vectors, &vec![w; vectors.len()])
}

/// FedAvg server rule: sample-count weighted average of client models,
/// reduced in the order given (client id order in the simulator).
pub fn fedavg_aggregate(updates: &[(&[f64], usize)]) -> Result<Vec<f64>> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::arg("aggregation over zero clients"))?;
    check_lengths(first.len(), updates.iter().map(|(p, _)| *p))?;
    if updates.iter().any(|&(_, n)| n == 0) {
        return Err(Error::arg("every client must hold at least one sample"));
    }
    let total: usize = updates.iter().map(|&(_, n)| n).sum();
    let vectors: Vec<&[f64]> = updates.iter().map(|&(p, _)| p).collect();
    let weights: Vec<f64> = updates
        .iter()
        .map(|&(_, n)| n as f64 / total as f64)
        .collect();
    Ok(weighted_mean(&vectors, &weights))
}

/// Adds the SCAFFOLD drift correction `c - c_i` to another oracle's gradient.
pub struct ScaffoldGradient<'a, G> {
    pub inner: G,
    pub correction: &'a [f64],
}

impl<G: BatchGradient> BatchGradient for ScaffoldGradient<'_, G> {
    fn eval(&mut self, theta: &[f64], rows: &[usize], grad: &mut [f64]) -> Result<(f64, f64)> {
        let out = self.inner.eval(theta, rows, grad)?;
        grad.iter_mut()
            .zip(self.correction)
            .for_each(|(g, c)| *g += c);
        Ok(out)
    }
}

/// Outcome of one SCAFFOLD client round.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldUpdate {
    /// Local model after `K` steps.
    pub y: Vec<f64>,
    pub delta_y: Vec<f64>,
    pub delta_c: Vec<f64>,
    pub new_c_i: Vec<f64>,
    /// Local steps `K`.
    pub steps: usize,
    pub cost_units: f64,
}

/// SCAFFOLD client step with an arbitrary data-gradient oracle.
///
/// Every local step moves along `g(y) - c_i + c`; afterwards
/// `c_i+ = c_i - c + (x - y) / (K * lr)`.
pub fn scaffold_client_update_with<G: BatchGradient>(
    global: &[f64],
    c_i: &[f64],
    c: &[f64],
    n_rows: usize,
    cfg: &SgdConfig,
    seed: u64,
    oracle: G,
) -> Result<ScaffoldUpdate> {
    check_lengths(global.len(), [c_i, c])?;
    if cfg.learning_rate <= 0.0 {
        return Err(Error::arg("SCAFFOLD needs a positive local learning rate"));
    }
    let correction: Vec<f64> = c.iter().zip(c_i).map(|(s, l)| s - l).collect();
    let mut oracle = ScaffoldGradient {
        inner: oracle,
        correction: &correction,
    };
    let run = local_sgd(global, n_rows, cfg, seed, &mut oracle)?;
    let denom = run.steps as f64 * cfg.learning_rate;
    let new_c_i: Vec<f64> = c_i
        .iter()
        .zip(c)
        .zip(global.iter().zip(&run.values))
        .map(|((ci, cs), (x, y))| ci - cs + (x - y) / denom)
        .collect();
    let delta_y = run.values.iter().zip(global).map(|(y, x)| y - x).collect();
    let delta_c = new_c_i.iter().zip(c_i).map(|(n, o)| n - o).collect();
    Ok(ScaffoldUpdate {
        y: run.values,
        delta_y,
        delta_c,
        new_c_i,
        steps: run.steps,
        cost_units: run.cost_units,
    })
}

/// SCAFFOLD client step on plain cross-entropy.
pub fn scaffold_client_update(
    global: &ModelParams,
    c_i: &[f64],
    c: &[f64],
    spec: &ModelSpec,
    train: &LabeledDataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<ScaffoldUpdate> {
    let oracle = PlainGradient {
        spec,
        data: train,
        weight_decay: cfg.weight_decay,
    };
    scaffold_client_update_with(&global.values, c_i, c, train.len(), cfg, seed, oracle)
}

/// SCAFFOLD server rule on the participants' local models `ys` and the
/// control variates of all `N` clients (participants already updated).
///
/// `x+ = m + (1 - lr_g)(x - m)` with `m` the mean of `ys`, which equals
/// `x + lr_g * mean(dy)`. `c+` is the mean of every client's control variate,
/// which equals `c + sum(dc) / N` while `c` is that mean, as it is from the
/// all-zero start. Both forms reduce exactly to FedAvg when the variates agree.
pub fn scaffold_server_update(
    x: &[f64],
    ys: &[&[f64]],
    control_variates: &[&[f64]],
    server_lr: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if ys.is_empty() {
        return Err(Error::arg("SCAFFOLD server update with no participants"));
    }
    if control_variates.len() < ys.len() {
        return Err(Error::arg("more participants than clients"));
    }
    check_lengths(x.len(), ys.iter().chain(control_variates).copied())?;
    let m = uniform_mean(ys);
    let keep = 1.0 - server_lr;
    let x_next = m
        .iter()
        .zip(x)
        .map(|(mv, xv)| mv + keep * (xv - mv))
        .collect();
    Ok((x_next, uniform_mean(control_variates)))
}

/// Wraps a data-gradient oracle with the FedDyn linear and proximal terms:
/// `f(theta) - <g_i, theta> + alpha/2 ||theta - w||^2`.
pub struct FedDynGradient<'a, G> {
    pub inner: G,
    pub global: &'a [f64],
    pub g_i: &'a [f64],
    pub alpha: f64,
}

impl<G: BatchGradient> BatchGradient for FedDynGradient<'_, G> {
    fn eval(&mut self, theta: &[f64], rows: &[usize], grad: &mut [f64]) -> Result<(f64, f64)> {
        let (mut loss, cost) = self.inner.eval(theta, rows, grad)?;
        for (((g, &t), &w), &gi) in grad
            .iter_mut()
            .zip(theta)
            .zip(self.global)
            .zip(self.g_i)
        {
            let diff = t - w;
            loss += -gi * t + 0.5 * self.alpha * diff * diff;
            *g += -gi + self.alpha * diff;
        }
        Ok((loss, cost))
    }
}

/// The FedDyn client objective and its gradient over the whole batch.
pub fn feddyn_objective(
    theta: &[f64],
    spec: &ModelSpec,
    batch: &LabeledDataset,
    global: &[f64],
    g_i: &[f64],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(spec.param_len(), [theta, global, g_i])?;
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; theta.len()];
    let mut oracle = FedDynGradient {
        inner: CrossEntropy { spec, data: batch },
        global,
        g_i,
        alpha,
    };
    let (loss, _) = oracle.eval(theta, &rows, &mut grad)?;
    Ok((loss, grad))
}

struct CrossEntropy<'a> {
    spec: &'a ModelSpec,
    data: &'a LabeledDataset,
}

impl BatchGradient for CrossEntropy<'_> {
    fn eval(&mut self, theta: &[f64], rows: &[usize], grad: &mut [f64]) -> Result<(f64, f64)> {
        let loss = cross_entropy_rows(theta, self.spec, self.data, rows, grad);
        Ok((loss, rows.len() as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedDynUpdate {
    pub theta: Vec<f64>,
    pub new_g_i: Vec<f64>,
    pub cost_units: f64,
}

/// FedDyn client step with an arbitrary data-gradient oracle: SGD on the
/// regularized objective from `w`, then `g_i+ = g_i - alpha * (theta - w)`.
pub fn feddyn_client_update_with<G: BatchGradient>(
    global: &[f64],
    g_i: &[f64],
    alpha: f64,
    n_rows: usize,
    cfg: &SgdConfig,
    seed: u64,
    oracle: G,
) -> Result<FedDynUpdate> {
    check_lengths(global.len(), [g_i])?;
    if !(alpha > 0.0) {
        return Err(Error::arg("feddyn_alpha must be positive"));
    }
    let mut oracle = FedDynGradient {
        inner: oracle,
        global,
        g_i,
        alpha,
    };
    let run = local_sgd(global, n_rows, cfg, seed, &mut oracle)?;
    let new_g_i = g_i
        .iter()
        .zip(run.values.iter().zip(global))
        .map(|(g, (t, w))| g - alpha * (t - w))
        .collect();
    Ok(FedDynUpdate {
        theta: run.values,
        new_g_i,
        cost_units: run.cost_units,
    })
}

/// FedDyn client step on plain cross-entropy.
pub fn feddyn_client_update(
    global: &ModelParams,
    g_i: &[f64],
    spec: &ModelSpec,
    train: &LabeledDataset,
    alpha: f64,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<FedDynUpdate> {
    let oracle = PlainGradient {
        spec,
        data: train,
        weight_decay: cfg.weight_decay,
    };
    feddyn_client_update_with(&global.values, g_i, alpha, train.len(), cfg, seed, oracle)
}

/// FedDyn server rule:
/// `h+ = h - alpha / N * sum_S(theta_i - w)`, `w+ = mean_S(theta_i) - h+ / alpha`.
pub fn feddyn_server_update(
    h: &[f64],
    thetas: &[&[f64]],
    w_prev: &[f64],
    alpha: f64,
    n_total: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if thetas.is_empty() {
        return Err(Error::arg("FedDyn server update with no participants"));
    }
    if !(alpha > 0.0) {
        return Err(Error::arg("feddyn_alpha must be positive"));
    }
    if n_total < thetas.len() {
        return Err(Error::arg("more participants than clients"));
    }
    check_lengths(w_prev.len(), std::iter::once(h).chain(thetas.iter().copied()))?;
    // sum_S(theta_i - w) / N = |S| / N * (mean_S(theta_i) - w)
    let mean_theta = uniform_mean(thetas);
    let scale = alpha * thetas.len() as f64 / n_total as f64;
    let h_next: Vec<f64> = h
        .iter()
        .zip(mean_theta.iter().zip(w_prev))
        .map(|(hv, (m, w))| hv - scale * (m - w))
        .collect();
    let w_next = mean_theta
        .iter()
        .zip(&h_next)
        .map(|(m, hv)| m - hv / alpha)
        .collect();
    Ok((w_next, h_next))
}
