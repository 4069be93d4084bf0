//! Shared test oracles: central finite differences and small helpers.
//! Everything here is independent of the analytic gradient paths it checks.

#![allow(dead_code)]

use fedunlearn::nn::{Model, ModelParams};
use ndarray::{Array1, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite-difference gradient of `loss` with respect to the model
/// parameters.
pub fn fd_param_grad(
    model: &mut Model<f64>,
    loss: &mut dyn FnMut(&mut Model<f64>) -> f64,
    h: f64,
) -> Array1<f64> {
    let p0 = model.params();
    let n = p0.len();
    let mut grad = Array1::zeros(n);
    for i in 0..n {
        let mut plus = p0.clone();
        plus.flat[i] += h;
        model.set_params(&plus).unwrap();
        let fp = loss(model);
        let mut minus = p0.clone();
        minus.flat[i] -= h;
        model.set_params(&minus).unwrap();
        let fm = loss(model);
        grad[i] = (fp - fm) / (2.0 * h);
    }
    model.set_params(&p0).unwrap();
    grad
}

/// Central finite-difference gradient of `loss` with respect to an input
/// tensor.
pub fn fd_input_grad(
    x: &Array4<f64>,
    loss: &mut dyn FnMut(&Array4<f64>) -> f64,
    h: f64,
) -> Array4<f64> {
    let mut grad = Array4::zeros(x.dim());
    let mut work = x.clone();
    let n = x.len();
    for i in 0..n {
        let orig = work.as_slice().unwrap()[i];
        work.as_slice_mut().unwrap()[i] = orig + h;
        let fp = loss(&work);
        work.as_slice_mut().unwrap()[i] = orig - h;
        let fm = loss(&work);
        work.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradient vectors:
/// `||a - b|| / max(||a||, ||b||, 1e-12)`.
pub fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nb = b.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn rel_err4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nb = b.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Random batch sized for a model, values in (-1, 1).
pub fn random_batch(model: &Model<f64>, n: usize, seed: u64) -> Array4<f64> {
    let (c, h, w) = model.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n, c, h, w), || rng.random_range(-1.0..1.0))
}

/// Perturb model parameters randomly (keeps the architecture).
pub fn jitter_params(model: &mut Model<f64>, scale: f64, seed: u64) {
    let mut p = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.flat.iter_mut() {
        *v += rng.random_range(-scale..scale);
    }
    model.set_params(&p).unwrap();
}

pub fn params_close(a: &ModelParams<f64>, b: &ModelParams<f64>, tol: f64) -> bool {
    a.flat
        .iter()
        .zip(b.flat.iter())
        .all(|(x, y)| (x - y).abs() <= tol)
}
