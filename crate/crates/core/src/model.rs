//! Differentiable classifiers with hand-written backpropagation.
//!
//! Two architectures share one flat parameter layout convention:
//!
//! * `Linear`: `[W (C x d), b (C)]`
//! * `Mlp`: `[W1 (h x d), b1 (h), W2 (C x h), b2 (C)]` with a ReLU hidden layer
//!
//! All matrices are row-major. The loss is mean softmax cross-entropy over
//! the batch, so gradients do not scale with batch size.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_features: usize,
    pub num_classes: usize,
    pub hidden_units: Option<usize>,
    pub init_seed: u64,
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl LayerShape {
    fn new(name: &str, dims: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            dims: dims.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.num_classes == 0 {
            return Err(Error::arg("model dimensions must be positive"));
        }
        match (self.kind, self.hidden_units) {
            (ModelKind::Linear, None) => {}
            (ModelKind::Linear, Some(_)) => {
                return Err(Error::arg("hidden_units is only valid for the mlp model"))
            }
            (ModelKind::Mlp, Some(h)) if h > 0 => {}
            (ModelKind::Mlp, _) => {
                return Err(Error::arg("the mlp model needs a positive hidden_units"))
            }
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::arg("init_scale must be finite and non-negative"));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.hidden_units.unwrap_or(0)
    }

    pub fn shape(&self) -> Vec<LayerShape> {
        let (d, c) = (self.n_features, self.num_classes);
        match self.kind {
            ModelKind::Linear => vec![LayerShape::new("w", &[c, d]), LayerShape::new("b", &[c])],
            ModelKind::Mlp => {
                let h = self.hidden();
                vec![
                    LayerShape::new("w1", &[h, d]),
                    LayerShape::new("b1", &[h]),
                    LayerShape::new("w2", &[c, h]),
                    LayerShape::new("b2", &[c]),
                ]
            }
        }
    }

    pub fn param_len(&self) -> usize {
        self.shape().iter().map(LayerShape::size).sum()
    }

    /// Width of the representation feeding the output layer.
    pub fn embed_dim(&self) -> usize {
        match self.kind {
            ModelKind::Linear => self.n_features,
            ModelKind::Mlp => self.hidden(),
        }
    }

    fn check_data(&self, data: &LabeledDataset) -> Result<()> {
        if data.n_features() != self.n_features || data.num_classes() != self.num_classes {
            return Err(Error::arg(format!(
                "dataset is {}x{} classes, model expects {}x{} classes",
                data.n_features(),
                data.num_classes(),
                self.n_features,
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Flat parameter vector plus its layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub shape: Vec<LayerShape>,
}

impl ModelParams {
    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_len() {
            return Err(Error::arg(format!(
                "parameter vector has length {}, model needs {}",
                values.len(),
                spec.param_len()
            )));
        }
        Ok(Self {
            values,
            shape: spec.shape(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            local_epochs: 1,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::arg("batch_size and local_epochs must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::arg("weight_decay must be finite and non-negative"));
        }
        Ok(())
    }

    /// Number of optimizer steps for a shard of `n` rows.
    pub fn steps_for(&self, n: usize) -> usize {
        self.local_epochs * n.div_ceil(self.batch_size)
    }
}

/// Weights uniform in `[-init_scale, init_scale]`, biases zero.
pub fn init_params(spec: &ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = seed::rng(spec.init_seed);
    let mut values = Vec::with_capacity(spec.param_len());
    for layer in spec.shape() {
        let is_bias = layer.dims.len() == 1;
        for _ in 0..layer.size() {
            if is_bias {
                values.push(0.0);
            } else {
                let u: f64 = rng.random();
                values.push((2.0 * u - 1.0) * spec.init_scale);
            }
        }
    }
    ModelParams::from_values(spec, values)
}

/// Forward pass scratch space, reused across rows.
struct Workspace {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    d_hidden: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        let h = spec.hidden();
        let c = spec.num_classes;
        Self {
            hidden_pre: vec![0.0; h],
            hidden: vec![0.0; h],
            logits: vec![0.0; c],
            probs: vec![0.0; c],
            d_hidden: vec![0.0; h],
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(d).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

fn forward(values: &[f64], spec: &ModelSpec, x: &[f64], ws: &mut Workspace) {
    let (d, c) = (spec.n_features, spec.num_classes);
    match spec.kind {
        ModelKind::Linear => {
            let (w, b) = values.split_at(c * d);
            affine(w, b, x, &mut ws.logits);
        }
        ModelKind::Mlp => {
            let h = spec.hidden();
            let (w1, rest) = values.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            affine(w1, b1, x, &mut ws.hidden_pre);
            for (a, &p) in ws.hidden.iter_mut().zip(&ws.hidden_pre) {
                *a = p.max(0.0);
            }
            affine(w2, b2, &ws.hidden, &mut ws.logits);
        }
    }
}

/// Writes softmax(logits) into `probs` and returns log-sum-exp.
fn softmax(logits: &[f64], probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    max + sum.ln()
}

/// Mean cross-entropy over `rows` of `data`; the gradient is written into
/// `grad` (overwritten, not accumulated).
pub(crate) fn cross_entropy_rows(
    values: &[f64],
    spec: &ModelSpec,
    data: &LabeledDataset,
    rows: &[usize],
    grad: &mut [f64],
) -> f64 {
    let (d, c) = (spec.n_features, spec.num_classes);
    let h = spec.hidden();
    let scale = 1.0 / rows.len() as f64;
    let mut ws = Workspace::new(spec);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;

    for &i in rows {
        let x = data.row(i);
        let y = data.labels()[i];
        forward(values, spec, x, &mut ws);
        let lse = softmax(&ws.logits, &mut ws.probs);
        loss += lse - ws.logits[y];
        // dL/dz = (p - onehot(y)) / n
        ws.probs[y] -= 1.0;
        ws.probs.iter_mut().for_each(|p| *p *= scale);
        let dz = &ws.probs;

        match spec.kind {
            ModelKind::Linear => {
                let (gw, gb) = grad.split_at_mut(c * d);
                for (k, &dzk) in dz.iter().enumerate() {
                    gw[k * d..(k + 1) * d]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, &xv)| *g += dzk * xv);
                    gb[k] += dzk;
                }
            }
            ModelKind::Mlp => {
                let w2 = &values[h * d + h..h * d + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                ws.d_hidden.iter_mut().for_each(|v| *v = 0.0);
                for (k, &dzk) in dz.iter().enumerate() {
                    let row = &w2[k * h..(k + 1) * h];
                    gw2[k * h..(k + 1) * h]
                        .iter_mut()
                        .zip(&ws.hidden)
                        .for_each(|(g, &a)| *g += dzk * a);
                    gb2[k] += dzk;
                    ws.d_hidden
                        .iter_mut()
                        .zip(row)
                        .for_each(|(dh, &wv)| *dh += dzk * wv);
                }
                for j in 0..h {
                    if ws.hidden_pre[j] <= 0.0 {
                        continue;
                    }
                    let dp = ws.d_hidden[j];
                    gw1[j * d..(j + 1) * d]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, &xv)| *g += dp * xv);
                    gb1[j] += dp;
                }
            }
        }
    }
    loss * scale
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("parameters contain non-finite values".into()))
    }
}

/// Mean softmax cross-entropy and its gradient over the whole batch.
pub fn loss_and_grad(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &LabeledDataset,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::arg("loss over an empty batch"));
    }
    spec.check_data(batch)?;
    if params.len() != spec.param_len() {
        return Err(Error::arg("parameter length does not match the model"));
    }
    check_finite(&params.values)?;
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; params.len()];
    let loss = cross_entropy_rows(&params.values, spec, batch, &rows, &mut grad);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {loss}")));
    }
    Ok((loss, grad))
}

/// `loss_and_grad` plus `weight_decay * ||theta||^2 / 2` over every parameter.
pub fn regularized_loss_and_grad(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &LabeledDataset,
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    let (mut loss, mut grad) = loss_and_grad(params, spec, batch)?;
    if weight_decay > 0.0 {
        add_weight_decay(&params.values, weight_decay, &mut loss, &mut grad);
    }
    Ok((loss, grad))
}

fn add_weight_decay(values: &[f64], weight_decay: f64, loss: &mut f64, grad: &mut [f64]) {
    let sq: f64 = values.iter().map(|v| v * v).sum();
    *loss += 0.5 * weight_decay * sq;
    grad.iter_mut()
        .zip(values)
        .for_each(|(g, v)| *g += weight_decay * v);
}

/// Logits for one feature row.
pub fn logits(params: &ModelParams, spec: &ModelSpec, x: &[f64]) -> Vec<f64> {
    let mut ws = Workspace::new(spec);
    forward(&params.values, spec, x, &mut ws);
    ws.logits
}

/// Representation feeding the output layer: the raw features for the linear
/// model, the post-ReLU hidden activations for the MLP.
pub fn embed(values: &[f64], spec: &ModelSpec, x: &[f64]) -> Vec<f64> {
    match spec.kind {
        ModelKind::Linear => x.to_vec(),
        ModelKind::Mlp => {
            let mut ws = Workspace::new(spec);
            forward(values, spec, x, &mut ws);
            ws.hidden
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate(params: &ModelParams, spec: &ModelSpec, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::arg("evaluation on an empty test set"));
    }
    spec.check_data(test)?;
    let mut ws = Workspace::new(spec);
    let correct = (0..test.len())
        .filter(|&i| {
            forward(&params.values, spec, test.row(i), &mut ws);
            argmax(&ws.logits) == test.labels()[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Result of a local optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun {
    pub values: Vec<f64>,
    /// Per-example gradient evaluations spent.
    pub cost_units: f64,
    /// Optimizer steps taken.
    pub steps: usize,
}

/// Gradient oracle for one mini-batch: given the current point and the batch
/// rows, writes the search direction into `grad` and returns
/// `(loss, cost_units)`.
pub trait BatchGradient {
    fn eval(&mut self, theta: &[f64], rows: &[usize], grad: &mut [f64]) -> Result<(f64, f64)>;
}

/// Plain (optionally weight-decayed) cross-entropy on the shard.
pub struct PlainGradient<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a LabeledDataset,
    pub weight_decay: f64,
}

impl BatchGradient for PlainGradient<'_> {
    fn eval(&mut self, theta: &[f64], rows: &[usize], grad: &mut [f64]) -> Result<(f64, f64)> {
        let mut loss = cross_entropy_rows(theta, self.spec, self.data, rows, grad);
        if self.weight_decay > 0.0 {
            add_weight_decay(theta, self.weight_decay, &mut loss, grad);
        }
        Ok((loss, rows.len() as f64))
    }
}

/// Epoch-wise shuffled mini-batch SGD driven by an arbitrary gradient oracle.
///
/// Each epoch permutes the shard rows with a generator seeded from
/// `(seed, epoch)` and walks them in `batch_size` chunks (the last chunk may be
/// short).
pub fn local_sgd<G: BatchGradient>(
    start: &[f64],
    n_rows: usize,
    cfg: &SgdConfig,
    seed: u64,
    oracle: &mut G,
) -> Result<LocalRun> {
    cfg.validate()?;
    if n_rows == 0 {
        return Err(Error::arg("local training on an empty shard"));
    }
    let mut theta = start.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut cost = 0.0;
    let mut steps = 0;
    for epoch in 0..cfg.local_epochs {
        order.sort_unstable();
        let mut rng = seed::rng(seed::derive_seed(seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, spent) = oracle.eval(&theta, batch, &mut grad)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "local training diverged at epoch {epoch}, step {steps} (loss {loss})"
                )));
            }
            theta
                .iter_mut()
                .zip(&grad)
                .for_each(|(t, g)| *t -= cfg.learning_rate * g);
            cost += spent;
            steps += 1;
        }
    }
    check_finite(&theta)?;
    Ok(LocalRun {
        values: theta,
        cost_units: cost,
        steps,
    })
}

/// Mini-batch SGD on cross-entropy. Returns the trained parameters and the
/// number of per-example gradient evaluations spent.
pub fn sgd_train(
    params: &ModelParams,
    spec: &ModelSpec,
    train: &LabeledDataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<(ModelParams, f64)> {
    spec.check_data(train)?;
    check_finite(&params.values)?;
    let mut oracle = PlainGradient {
        spec,
        data: train,
        weight_decay: cfg.weight_decay,
    };
    let run = local_sgd(&params.values, train.len(), cfg, seed, &mut oracle)?;
    Ok((
        ModelParams {
            values: run.values,
            shape: params.shape.clone(),
        },
        run.cost_units,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn linear_spec(d: usize, c: usize) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Linear,
            n_features: d,
            num_classes: c,
            hidden_units: None,
            init_seed: 3,
            init_scale: 0.1,
        }
    }

    #[test]
    fn init_shape_and_determinism() {
        let spec = linear_spec(3, 2);
        let a = init_params(&spec).unwrap();
        assert_eq!(a.len(), 3 * 2 + 2);
        assert_eq!(a, init_params(&spec).unwrap());
        assert_eq!(&a.values[6..], &[0.0, 0.0]);
        let zero = init_params(&ModelSpec {
            init_scale: 0.0,
            ..spec
        })
        .unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_validation() {
        let mut spec = linear_spec(2, 2);
        spec.hidden_units = Some(4);
        assert!(spec.validate().is_err());
        spec.kind = ModelKind::Mlp;
        assert!(spec.validate().is_ok());
        assert_eq!(spec.param_len(), 4 * 2 + 4 + 2 * 4 + 2);
        spec.hidden_units = None;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_params_give_log_c_loss() {
        let ds = generate_synthetic(4, 3, 5, 2.0, 1).unwrap();
        let spec = linear_spec(3, 4);
        let params = ModelParams::from_values(&spec, vec![0.0; spec.param_len()]).unwrap();
        let (loss, _) = loss_and_grad(&params, &spec, &ds).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_empty_and_non_finite() {
        let spec = linear_spec(2, 2);
        let empty = LabeledDataset::new(vec![], vec![], 2, 2).unwrap();
        let params = init_params(&spec).unwrap();
        assert!(matches!(
            loss_and_grad(&params, &spec, &empty),
            Err(Error::Argument(_))
        ));
        let ds = generate_synthetic(2, 2, 2, 2.0, 1).unwrap();
        let mut bad = params.clone();
        bad.values[0] = f64::NAN;
        assert!(matches!(
            loss_and_grad(&bad, &spec, &ds),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn duplicated_rows_leave_mean_loss_unchanged() {
        let ds = generate_synthetic(3, 4, 3, 2.0, 5).unwrap();
        let doubled = LabeledDataset::concat(&[ds.clone(), ds.clone()]).unwrap();
        let spec = linear_spec(4, 3);
        let params = init_params(&spec).unwrap();
        let (l1, g1) = loss_and_grad(&params, &spec, &ds).unwrap();
        let (l2, g2) = loss_and_grad(&params, &spec, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn evaluate_counts_and_ties() {
        let spec = ModelSpec {
            init_scale: 0.0,
            ..linear_spec(2, 2)
        };
        let zero = init_params(&spec).unwrap();
        let ds = LabeledDataset::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]], vec![0, 0], 2)
            .unwrap();
        assert_eq!(evaluate(&zero, &spec, &ds).unwrap(), 1.0);

        // w = identity, b = 0: predicts the larger coordinate.
        let ident = ModelParams::from_values(&spec, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let rows = [
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 1.0],
            vec![0.0, 3.0],
        ];
        let ds = LabeledDataset::from_rows(&rows, vec![0, 1, 0, 0], 2).unwrap();
        assert_eq!(evaluate(&ident, &spec, &ds).unwrap(), 0.75);

        let empty = LabeledDataset::new(vec![], vec![], 2, 2).unwrap();
        assert!(evaluate(&ident, &spec, &empty).is_err());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let ds = generate_synthetic(3, 2, 7, 2.0, 2).unwrap();
        let spec = linear_spec(2, 3);
        let p = init_params(&spec).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.0,
            batch_size: 4,
            local_epochs: 3,
            weight_decay: 0.0,
        };
        let (q, cost) = sgd_train(&p, &spec, &ds, &cfg, 11).unwrap();
        assert_eq!(p, q);
        assert_eq!(cost, 3.0 * ds.len() as f64);
    }

    #[test]
    fn full_batch_epoch_is_one_gradient_step() {
        let ds = generate_synthetic(3, 4, 5, 2.0, 8).unwrap();
        let spec = linear_spec(4, 3);
        let p = init_params(&spec).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.3,
            batch_size: ds.len(),
            local_epochs: 1,
            weight_decay: 0.0,
        };
        let (q, _) = sgd_train(&p, &spec, &ds, &cfg, 1).unwrap();
        let (_, g) = loss_and_grad(&p, &spec, &ds).unwrap();
        for ((a, b), gi) in q.values.iter().zip(&p.values).zip(&g) {
            assert!((a - (b - 0.3 * gi)).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_adds_l2_term() {
        let ds = generate_synthetic(2, 3, 4, 2.0, 4).unwrap();
        let spec = linear_spec(3, 2);
        let p = init_params(&spec).unwrap();
        let (l0, g0) = loss_and_grad(&p, &spec, &ds).unwrap();
        let (l1, g1) = regularized_loss_and_grad(&p, &spec, &ds, 0.5).unwrap();
        let sq: f64 = p.values.iter().map(|v| v * v).sum();
        assert!((l1 - l0 - 0.25 * sq).abs() < 1e-14);
        for ((a, b), v) in g1.iter().zip(&g0).zip(&p.values) {
            assert!((a - b - 0.5 * v).abs() < 1e-14);
        }
    }
}
