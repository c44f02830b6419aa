//! Piecewise-linear transforms over evenly divided domains.
//!
//! A [`PiecewiseLinearFn`] splits `[lo, hi]` into `M` equal intervals and
//! carries an independent slope and bias for each one. Intervals are
//! half-open `[ζ_i, ζ_{i+1})` except the last, which is closed, so every
//! interior boundary belongs to the interval on its right. Neighbouring
//! pieces are not required to meet.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to sampled slopes before they are used in a loss.
pub const MIN_SLOPE: f64 = 1e-3;

/// Domain of the target-logit transform `t` (the range of a cosine).
pub const T_DOMAIN: (f64, f64) = (-1.0, 1.0);

/// Domain of the probability transform `τ`.
pub const TAU_DOMAIN: (f64, f64) = (0.0, 1.0);

/// A scalar function with a derivative, defined on a closed domain.
pub trait Transform: Send + Sync {
    fn value(&self, x: f64) -> Result<f64>;
    fn derivative(&self, x: f64) -> Result<f64>;
}

/// `x ↦ x`, defined everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Transform for Identity {
    fn value(&self, x: f64) -> Result<f64> {
        Ok(x)
    }

    fn derivative(&self, _x: f64) -> Result<f64> {
        Ok(1.0)
    }
}

/// `x ↦ slope·x + bias`, defined everywhere.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub slope: f64,
    pub bias: f64,
}

impl Transform for Affine {
    fn value(&self, x: f64) -> Result<f64> {
        Ok(self.slope * x + self.bias)
    }

    fn derivative(&self, _x: f64) -> Result<f64> {
        Ok(self.slope)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearFn {
    lo: f64,
    hi: f64,
    slopes: Vec<f64>,
    biases: Vec<f64>,
}

impl PiecewiseLinearFn {
    pub fn new(lo: f64, hi: f64, slopes: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::Precondition(format!(
                "piecewise domain must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        if slopes.is_empty() {
            return Err(Error::Precondition(
                "at least one interval is required".into(),
            ));
        }
        if biases.len() != slopes.len() {
            return Err(Error::Shape {
                what: "piecewise biases",
                expected: slopes.len(),
                actual: biases.len(),
            });
        }
        Ok(Self {
            lo,
            hi,
            slopes,
            biases,
        })
    }

    /// `a = 1, b = 0` on every interval.
    pub fn identity(lo: f64, hi: f64, num_intervals: usize) -> Result<Self> {
        Self::new(lo, hi, vec![1.0; num_intervals], vec![0.0; num_intervals])
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn num_intervals(&self) -> usize {
        self.slopes.len()
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Endpoint `ζ_i` for `i ∈ [0, M]`.
    pub fn boundary(&self, i: usize) -> f64 {
        let m = self.num_intervals();
        if i == m {
            return self.hi;
        }
        self.lo + i as f64 * (self.hi - self.lo) / m as f64
    }

    /// All `M + 1` endpoints.
    pub fn boundaries(&self) -> Vec<f64> {
        (0..=self.num_intervals())
            .map(|i| self.boundary(i))
            .collect()
    }

    /// Distance from `x` to the nearest interior boundary, or infinity when `M = 1`.
    pub fn distance_to_interior_boundary(&self, x: f64) -> f64 {
        (1..self.num_intervals())
            .map(|i| (x - self.boundary(i)).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the interval containing `x`.
    pub fn interval_of(&self, x: f64) -> Result<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return Err(Error::Domain {
                x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let m = self.num_intervals();
        let guess = ((x - self.lo) / (self.hi - self.lo) * m as f64).floor();
        let mut i = (guess.max(0.0) as usize).min(m - 1);
        // The guess can be off by one near a boundary; settle it against the
        // stored endpoints so membership always agrees with `boundary`.
        while i > 0 && x < self.boundary(i) {
            i -= 1;
        }
        while i + 1 < m && x >= self.boundary(i + 1) {
            i += 1;
        }
        Ok(i)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let i = self.interval_of(x)?;
        Ok(self.slopes[i] * x + self.biases[i])
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        let i = self.interval_of(x)?;
        Ok(self.slopes[i])
    }
}

impl Transform for PiecewiseLinearFn {
    fn value(&self, x: f64) -> Result<f64> {
        self.eval(x)
    }

    fn derivative(&self, x: f64) -> Result<f64> {
        PiecewiseLinearFn::derivative(self, x)
    }
}

/// Least-squares fit of a reference function, with its sup-norm error on the grid.
#[derive(Debug, Clone)]
pub struct Fit {
    pub function: PiecewiseLinearFn,
    pub sup_error: f64,
}

/// Fits `target` on `grid_size` evenly spaced points covering `[lo, hi]`
/// (both ends included). Each interval gets its own least-squares line from
/// the grid points it owns, so the fit may jump at boundaries.
pub fn fit_to_reference<F>(
    target: F,
    domain: (f64, f64),
    num_intervals: usize,
    grid_size: usize,
) -> Result<Fit>
where
    F: Fn(f64) -> f64,
{
    let (lo, hi) = domain;
    let template = PiecewiseLinearFn::identity(lo, hi, num_intervals)?;
    if grid_size < 2 {
        return Err(Error::Precondition(
            "fit grid needs at least two points".into(),
        ));
    }

    let grid: Vec<(f64, f64)> = (0..grid_size)
        .map(|k| {
            let x = if k + 1 == grid_size {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (grid_size - 1) as f64
            };
            (x, target(x))
        })
        .collect();

    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); num_intervals];
    for &(x, y) in &grid {
        buckets[template.interval_of(x)?].push((x, y));
    }

    let mut slopes = Vec::with_capacity(num_intervals);
    let mut biases = Vec::with_capacity(num_intervals);
    for (i, points) in buckets.iter().enumerate() {
        if points.len() < 2 {
            return Err(Error::Precondition(format!(
                "interval {i} received {} grid points; need at least 2",
                points.len()
            )));
        }
        let n = points.len() as f64;
        let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
        let (sxx, sxy) = points.iter().fold((0.0, 0.0), |(sxx, sxy), &(x, y)| {
            let dx = x - mean_x;
            (sxx + dx * dx, sxy + dx * (y - mean_y))
        });
        let slope = sxy / sxx;
        slopes.push(slope);
        biases.push(mean_y - slope * mean_x);
    }

    let function = PiecewiseLinearFn::new(lo, hi, slopes, biases)?;
    let mut sup_error: f64 = 0.0;
    for &(x, y) in &grid {
        sup_error = sup_error.max((function.eval(x)? - y).abs());
    }
    Ok(Fit {
        function,
        sup_error,
    })
}

/// The pair of transforms that determines one candidate loss.
///
/// Flattened as `θ = [a^t | b^t | a^τ | b^τ]`, `4M` values in total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParams {
    pub t_fn: PiecewiseLinearFn,
    pub tau_fn: PiecewiseLinearFn,
}

impl LossParams {
    pub fn new(t_fn: PiecewiseLinearFn, tau_fn: PiecewiseLinearFn) -> Result<Self> {
        if t_fn.num_intervals() != tau_fn.num_intervals() {
            return Err(Error::Shape {
                what: "tau intervals",
                expected: t_fn.num_intervals(),
                actual: tau_fn.num_intervals(),
            });
        }
        Ok(Self { t_fn, tau_fn })
    }

    /// Both transforms are the identity; the unified loss is then plain softmax.
    pub fn identity(num_intervals: usize) -> Result<Self> {
        Self::new(
            PiecewiseLinearFn::identity(T_DOMAIN.0, T_DOMAIN.1, num_intervals)?,
            PiecewiseLinearFn::identity(TAU_DOMAIN.0, TAU_DOMAIN.1, num_intervals)?,
        )
    }

    pub fn num_intervals(&self) -> usize {
        self.t_fn.num_intervals()
    }

    /// Unpacks a raw (possibly sampled) parameter vector, lifting every slope
    /// to at least [`MIN_SLOPE`].
    pub fn from_theta(theta: &[f64], num_intervals: usize) -> Result<Self> {
        if num_intervals == 0 {
            return Err(Error::Precondition("M must be at least 1".into()));
        }
        let m = num_intervals;
        if theta.len() != 4 * m {
            return Err(Error::Shape {
                what: "theta",
                expected: 4 * m,
                actual: theta.len(),
            });
        }
        let project = |s: &[f64]| s.iter().map(|&a| a.max(MIN_SLOPE)).collect::<Vec<_>>();
        Self::new(
            PiecewiseLinearFn::new(
                T_DOMAIN.0,
                T_DOMAIN.1,
                project(&theta[..m]),
                theta[m..2 * m].to_vec(),
            )?,
            PiecewiseLinearFn::new(
                TAU_DOMAIN.0,
                TAU_DOMAIN.1,
                project(&theta[2 * m..3 * m]),
                theta[3 * m..].to_vec(),
            )?,
        )
    }

    pub fn to_theta(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(4 * self.num_intervals());
        theta.extend_from_slice(self.t_fn.slopes());
        theta.extend_from_slice(self.t_fn.biases());
        theta.extend_from_slice(self.tau_fn.slopes());
        theta.extend_from_slice(self.tau_fn.biases());
        theta
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = LossParamsDoc {
            theta: self.to_theta(),
            m: self.num_intervals(),
            t_domain: self.t_fn.domain().into(),
            tau_domain: self.tau_fn.domain().into(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses the JSON written by [`LossParams::to_json`]. Values are taken
    /// verbatim; no slope projection is applied.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LossParamsDoc = serde_json::from_str(text)?;
        let m = doc.m;
        if m == 0 || doc.theta.len() != 4 * m {
            return Err(Error::Shape {
                what: "theta",
                expected: 4 * m,
                actual: doc.theta.len(),
            });
        }
        let [tlo, thi] = doc.t_domain;
        let [ulo, uhi] = doc.tau_domain;
        Self::new(
            PiecewiseLinearFn::new(
                tlo,
                thi,
                doc.theta[..m].to_vec(),
                doc.theta[m..2 * m].to_vec(),
            )?,
            PiecewiseLinearFn::new(
                ulo,
                uhi,
                doc.theta[2 * m..3 * m].to_vec(),
                doc.theta[3 * m..].to_vec(),
            )?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct LossParamsDoc {
    theta: Vec<f64>,
    #[serde(rename = "M")]
    m: usize,
    t_domain: [f64; 2],
    tau_domain: [f64; 2],
}
