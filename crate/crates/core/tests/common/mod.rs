//! Test-only oracles. Nothing here calls into the code paths it checks.
#![allow(dead_code)]

use lossearch::losses::LogitsBatch;
use lossearch::piecewise::{LossParams, PiecewiseLinearFn};
use lossearch::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

// Denominator floor for relative gradient errors; FD rounding noise is ~1e-10.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Sup-norm error of the per-interval least-squares line fit of `target`
/// on `n` evenly spaced points of `[lo, hi]`, solved by SVD.
pub fn dense_grid_sup_error(
    target: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    m: usize,
    n: usize,
) -> f64 {
    let width = (hi - lo) / m as f64;
    let xs: Vec<f64> = (0..n)
        .map(|k| {
            if k + 1 == n {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        })
        .collect();
    let owner = |x: f64| -> usize {
        // right-closed search over explicit boundaries
        (0..m)
            .rev()
            .find(|&i| x >= lo + i as f64 * width)
            .unwrap_or(0)
    };
    let mut worst: f64 = 0.0;
    for i in 0..m {
        let pts: Vec<f64> = xs.iter().copied().filter(|&x| owner(x) == i).collect();
        let a = DMatrix::from_fn(pts.len(), 2, |r, c| if c == 0 { pts[r] } else { 1.0 });
        let b = DVector::from_iterator(pts.len(), pts.iter().map(|&x| target(x)));
        let coef = a
            .clone()
            .svd(true, true)
            .solve(&b, 1e-14)
            .expect("svd solve");
        for (r, &x) in pts.iter().enumerate() {
            let resid = (coef[0] * x + coef[1] - b[r]).abs();
            worst = worst.max(resid);
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cosine activations scaled by `s`: every `f/s` is uniform in `[-lim, lim]`.
pub fn random_cosine_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
    s: f64,
    lim: f64,
) -> LogitsBatch {
    let values = (0..n * c)
        .map(|_| s * rng.random_range(-lim..lim))
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    LogitsBatch::new(values, labels, c).unwrap()
}

/// Central differences of the mean loss with respect to every activation.
pub fn finite_difference_grad<F>(batch: &LogitsBatch, loss: F) -> Vec<f64>
where
    F: Fn(&LogitsBatch) -> Result<f64>,
{
    let c = batch.num_classes();
    let mut out = Vec::with_capacity(batch.values().len());
    for i in 0..batch.len() {
        for j in 0..c {
            let v = batch.row(i)[j];
            let up = loss(&batch.with_value(i, j, v + FD_STEP)).unwrap();
            let down = loss(&batch.with_value(i, j, v - FD_STEP)).unwrap();
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

/// Largest relative error, with a floor on the denominator so entries that
/// are numerically zero compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Random θ with slopes in [0.2, 2] and τ biases keeping τ > 0 on [0, 1].
pub fn random_params(rng: &mut ChaCha8Rng, m: usize) -> LossParams {
    let mut theta = Vec::with_capacity(4 * m);
    theta.extend((0..m).map(|_| rng.random_range(0.2..2.0)));
    theta.extend((0..m).map(|_| rng.random_range(-0.3..0.3)));
    theta.extend((0..m).map(|_| rng.random_range(0.2..2.0)));
    theta.extend((0..m).map(|_| rng.random_range(0.01..0.3)));
    LossParams::from_theta(&theta, m).unwrap()
}

/// Target probability after the target-logit transform, computed directly.
pub fn transformed_target_probability(row: &[f64], y: usize, t: &PiecewiseLinearFn, s: f64) -> f64 {
    let zy = s * t.eval(row[y] / s).unwrap();
    let denom: f64 = row
        .iter()
        .enumerate()
        .map(|(k, &v)| if k == y { zy.exp() } else { v.exp() })
        .sum();
    zy.exp() / denom
}

/// A batch whose target cosines and transformed target probabilities all sit
/// at least 1e-4 from any piecewise boundary.
pub fn batch_away_from_boundaries(
    rng: &mut ChaCha8Rng,
    params: &LossParams,
    n: usize,
    c: usize,
    s: f64,
) -> LogitsBatch {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    while labels.len() < n {
        let row: Vec<f64> = (0..c)
            .map(|_| s * rng.random_range(-0.999..0.999))
            .collect();
        let y = rng.random_range(0..c);
        let cosine = row[y] / s;
        if params.t_fn.distance_to_interior_boundary(cosine) < 1e-4 {
            continue;
        }
        let q = transformed_target_probability(&row, y, &params.t_fn, s);
        if params.tau_fn.distance_to_interior_boundary(q) < 1e-4 {
            continue;
        }
        values.extend(row);
        labels.push(y);
    }
    LogitsBatch::new(values, labels, c).unwrap()
}
