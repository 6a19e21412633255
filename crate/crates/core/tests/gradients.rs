mod common;

use common::*;
use hemfl_core::algorithms::feddyn_objective;
use hemfl_core::model::{loss_and_grad, regularized_loss_and_grad, ModelParams, ModelSpec};
use hemfl_core::LabeledDataset;
use rand::Rng;

const DRAWS: usize = 60;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn loss_at(spec: &ModelSpec, values: &[f64], batch: &LabeledDataset) -> f64 {
    let p = ModelParams::from_values(spec, values.to_vec()).unwrap();
    loss_and_grad(&p, spec, batch).unwrap().0
}

/// True when some hidden pre-activation is close enough to zero that a
/// finite-difference probe could cross the ReLU kink.
fn near_kink(spec: &ModelSpec, values: &[f64], batch: &LabeledDataset) -> bool {
    let (d, h) = (spec.n_features, spec.hidden_units.unwrap());
    let (w1, b1) = (&values[..h * d], &values[h * d..h * d + h]);
    (0..batch.len()).any(|r| {
        let x = batch.row(r);
        (0..h).any(|j| {
            let z: f64 = b1[j] + (0..d).map(|k| w1[j * d + k] * x[k]).sum::<f64>();
            z.abs() < 1e-3
        })
    })
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let mut r = rng(11);
    for draw in 0..DRAWS {
        let (d, c) = (r.random_range(1..6), r.random_range(2..6));
        let spec = linear_spec(d, c);
        let p = random_params(&spec, 1.0, &mut r);
        let batch = random_batch(d, c, r.random_range(1..9), &mut r);
        let (_, g) = loss_and_grad(&p, &spec, &batch).unwrap();
        let n = numeric_grad(&p.values, H, |v| loss_at(&spec, v, &batch));
        let e = max_rel_err(&g, &n);
        assert!(e < TOL, "draw {draw}: relative error {e}");
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut r = rng(12);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < DRAWS {
        attempts += 1;
        assert!(attempts < 20 * DRAWS, "too many draws land on the ReLU kink");
        let (d, c, h) = (r.random_range(1..5), r.random_range(2..5), r.random_range(1..6));
        let spec = mlp_spec(d, c, h);
        let p = random_params(&spec, 1.0, &mut r);
        let batch = random_batch(d, c, r.random_range(1..6), &mut r);
        if near_kink(&spec, &p.values, &batch) {
            continue;
        }
        let (_, g) = loss_and_grad(&p, &spec, &batch).unwrap();
        let n = numeric_grad(&p.values, H, |v| loss_at(&spec, v, &batch));
        let e = max_rel_err(&g, &n);
        assert!(e < TOL, "draw {checked}: relative error {e}");
        checked += 1;
    }
}

#[test]
fn weight_decay_gradient_matches_finite_differences() {
    let mut r = rng(13);
    for draw in 0..DRAWS {
        let spec = linear_spec(3, 4);
        let p = random_params(&spec, 1.0, &mut r);
        let batch = random_batch(3, 4, 5, &mut r);
        let wd = r.random::<f64>();
        let (_, g) = regularized_loss_and_grad(&p, &spec, &batch, wd).unwrap();
        let n = numeric_grad(&p.values, H, |v| {
            let q = ModelParams::from_values(&spec, v.to_vec()).unwrap();
            regularized_loss_and_grad(&q, &spec, &batch, wd).unwrap().0
        });
        let e = max_rel_err(&g, &n);
        assert!(e < TOL, "draw {draw}: relative error {e}");
    }
}

#[test]
fn feddyn_objective_gradient_matches_finite_differences() {
    let mut r = rng(14);
    let mut checked = 0;
    while checked < DRAWS {
        let mlp = checked % 2 == 1;
        let spec = if mlp { mlp_spec(3, 3, 4) } else { linear_spec(4, 3) };
        let theta = random_params(&spec, 1.0, &mut r).values;
        let global = random_params(&spec, 1.0, &mut r).values;
        let g_i = random_params(&spec, 0.5, &mut r).values;
        let alpha = 0.01 + r.random::<f64>();
        let batch = random_batch(spec.n_features, 3, 4, &mut r);
        if mlp && near_kink(&spec, &theta, &batch) {
            continue;
        }
        let (_, g) = feddyn_objective(&theta, &spec, &batch, &global, &g_i, alpha).unwrap();
        let n = numeric_grad(&theta, H, |v| {
            feddyn_objective(v, &spec, &batch, &global, &g_i, alpha).unwrap().0
        });
        let e = max_rel_err(&g, &n);
        assert!(e < TOL, "draw {checked}: relative error {e}");
        checked += 1;
    }
}

#[test]
fn feddyn_objective_matches_its_closed_form() {
    let mut r = rng(15);
    let spec = linear_spec(2, 3);
    let theta = random_params(&spec, 1.0, &mut r).values;
    let global = random_params(&spec, 1.0, &mut r).values;
    let g_i = random_params(&spec, 1.0, &mut r).values;
    let batch = random_batch(2, 3, 3, &mut r);
    let alpha = 0.7;
    let (loss, _) = feddyn_objective(&theta, &spec, &batch, &global, &g_i, alpha).unwrap();
    let ce = loss_at(&spec, &theta, &batch);
    let lin: f64 = g_i.iter().zip(&theta).map(|(g, t)| g * t).sum();
    let prox: f64 = theta.iter().zip(&global).map(|(t, w)| (t - w) * (t - w)).sum();
    let expected = ce - lin + 0.5 * alpha * prox;
    assert!((loss - expected).abs() < 1e-12 * expected.abs().max(1.0));
}
