//! Softmax-family losses over an activation batch and their gradients.
//!
//! Every loss here returns the batch mean together with `∂L/∂f`, the
//! gradient with respect to the activations (already divided by the batch
//! size). Margin-style losses and the unified searched loss expect cosine
//! activations scaled by `s`, so `f_j / s` must lie in `[-1, 1]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::piecewise::{Identity, LossParams, Transform};

/// Floor applied to `τ(p)` before taking its logarithm.
pub const MIN_TAU_OUTPUT: f64 = 1e-12;

/// Below this, a non-target probability is treated as zero when forming
/// gradient ratios.
pub const MIN_RATIO_PROBABILITY: f64 = 1e-300;

/// Row-major activations for a batch, one row of `C` scores per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    values: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LogitsBatch {
    pub fn new(values: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Precondition(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if values.len() != labels.len() * num_classes {
            return Err(Error::Shape {
                what: "logits",
                expected: labels.len() * num_classes,
                actual: values.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Precondition(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            values,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Same batch with activation `(i, j)` replaced.
    pub fn with_value(&self, i: usize, j: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.values[i * self.num_classes + j] = value;
        out
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("logits".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean over the batch.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// `∂loss/∂f`, same layout as the input logits.
    pub grad: Vec<f64>,
    /// Samples whose `τ(p)` fell below [`MIN_TAU_OUTPUT`] and were clamped.
    pub clamp_events: usize,
}

impl LossOutput {
    fn from_parts(per_sample: Vec<f64>, grad: Vec<f64>, clamp_events: usize) -> Result<Self> {
        let n = per_sample.len().max(1) as f64;
        let loss = per_sample.iter().sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::Numeric("loss".into()));
        }
        Ok(Self {
            loss,
            per_sample,
            grad,
            clamp_events,
        })
    }
}

/// Log-probabilities and probabilities of a score row, via a max shift.
fn log_softmax(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let log_p: Vec<f64> = z.iter().map(|&v| v - lse).collect();
    let p = log_p.iter().map(|&l| l.exp()).collect();
    (log_p, p)
}

/// `1 - p_y` as the sum of the other probabilities, which keeps precision
/// when `p_y` is close to one.
fn complement(p: &[f64], y: usize) -> f64 {
    p.iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| v)
        .sum()
}

/// Plain cross-entropy over `softmax(f)`.
pub fn softmax_loss(batch: &LogitsBatch) -> Result<LossOutput> {
    batch.check_finite()?;
    let n = batch.len() as f64;
    let c = batch.num_classes();
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut grad = vec![0.0; batch.values.len()];
    for (i, &y) in batch.labels.iter().enumerate() {
        let (log_p, p) = log_softmax(batch.row(i));
        per_sample.push(-log_p[y]);
        let g = &mut grad[i * c..(i + 1) * c];
        for k in 0..c {
            g[k] = if k == y { -complement(&p, y) } else { p[k] } / n;
        }
    }
    LossOutput::from_parts(per_sample, grad, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
}

/// `-log(p_y)·(1 - p_y)^α`.
pub fn focal_loss(batch: &LogitsBatch, params: FocalParams) -> Result<LossOutput> {
    let alpha = params.alpha;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Precondition(format!(
            "focal alpha must be finite and ≥ 0, got {alpha}"
        )));
    }
    batch.check_finite()?;
    let n = batch.len() as f64;
    let c = batch.num_classes();
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut grad = vec![0.0; batch.values.len()];
    for (i, &y) in batch.labels.iter().enumerate() {
        let (log_p, p) = log_softmax(batch.row(i));
        let ell = log_p[y];
        let q = complement(&p, y);
        let weight = q.powf(alpha);
        per_sample.push(-ell * weight);
        // d/dℓ of -ℓ(1-e^ℓ)^α
        let mut d_ell = -weight;
        if alpha != 0.0 && q > 0.0 {
            d_ell += alpha * ell * p[y] * q.powf(alpha - 1.0);
        }
        let g = &mut grad[i * c..(i + 1) * c];
        for k in 0..c {
            let d_log_p = if k == y { q } else { -p[k] };
            g[k] = d_ell * d_log_p / n;
        }
    }
    LossOutput::from_parts(per_sample, grad, 0)
}

/// `τ(p) = p^((1-p)^α)`, the focal transform expressed on probabilities
/// rather than log-probabilities. `-log τ(p)` equals the focal loss.
pub fn focal_tau_probability(p: f64, alpha: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    (p.ln() * (1.0 - p).powf(alpha)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    /// `cos(m·arccos x)`, integer `m`.
    LSoftmax,
    /// `x + m`.
    ASoftmax,
    /// `cos(arccos x + m)`.
    ArcFace,
}

/// A target-logit transform from the margin-softmax family, defined on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginTransform {
    pub kind: MarginKind,
    pub m: f64,
}

// Keeps the ArcFace derivative finite at cos θ = ±1.
const MIN_SINE_SQUARED: f64 = 1e-12;

impl MarginTransform {
    pub fn new(kind: MarginKind, m: f64) -> Result<Self> {
        if !m.is_finite() || m < 0.0 {
            return Err(Error::Precondition(format!(
                "margin must be finite and ≥ 0, got {m}"
            )));
        }
        if kind == MarginKind::LSoftmax && (m < 1.0 || m.fract() != 0.0) {
            return Err(Error::Precondition(format!(
                "L-softmax margin must be a positive integer, got {m}"
            )));
        }
        Ok(Self { kind, m })
    }

    pub fn l_softmax(m: u32) -> Result<Self> {
        Self::new(MarginKind::LSoftmax, m as f64)
    }

    pub fn a_softmax(m: f64) -> Result<Self> {
        Self::new(MarginKind::ASoftmax, m)
    }

    pub fn arcface(m: f64) -> Result<Self> {
        Self::new(MarginKind::ArcFace, m)
    }

    fn check(x: f64) -> Result<()> {
        if (-1.0..=1.0).contains(&x) {
            Ok(())
        } else {
            Err(Error::Domain {
                x,
                lo: -1.0,
                hi: 1.0,
            })
        }
    }
}

/// Chebyshev polynomials `(T_n(x), U_{n-1}(x))`; `cos(n·arccos x) = T_n(x)`
/// and its derivative is `n·U_{n-1}(x)`.
fn chebyshev(n: u32, x: f64) -> (f64, f64) {
    let (mut t_prev, mut t) = (1.0, x);
    let (mut u_prev, mut u) = (0.0, 1.0);
    if n == 0 {
        return (1.0, 0.0);
    }
    for _ in 1..n {
        (t_prev, t) = (t, 2.0 * x * t - t_prev);
        (u_prev, u) = (u, 2.0 * x * u - u_prev);
    }
    (t, u)
}

impl Transform for MarginTransform {
    fn value(&self, x: f64) -> Result<f64> {
        Self::check(x)?;
        Ok(match self.kind {
            MarginKind::LSoftmax => chebyshev(self.m as u32, x).0,
            MarginKind::ASoftmax => x + self.m,
            MarginKind::ArcFace => x * self.m.cos() - (1.0 - x * x).max(0.0).sqrt() * self.m.sin(),
        })
    }

    fn derivative(&self, x: f64) -> Result<f64> {
        Self::check(x)?;
        Ok(match self.kind {
            MarginKind::LSoftmax => self.m * chebyshev(self.m as u32, x).1,
            MarginKind::ASoftmax => 1.0,
            MarginKind::ArcFace => {
                let sine = (1.0 - x * x).max(MIN_SINE_SQUARED).sqrt();
                self.m.cos() + x * self.m.sin() / sine
            }
        })
    }
}

/// `-log τ(p^t_y)`, where `p^t` is the softmax after replacing the target
/// activation `f_y` with `s·t(f_y / s)`.
///
/// `τ(p)` values below [`MIN_TAU_OUTPUT`] are clamped; such samples
/// contribute a constant loss with zero gradient and are counted in
/// `clamp_events`.
pub fn unified_loss_with(
    batch: &LogitsBatch,
    t: &dyn Transform,
    tau: &dyn Transform,
    s: f64,
) -> Result<LossOutput> {
    check_scale(s)?;
    batch.check_finite()?;
    let n = batch.len() as f64;
    let c = batch.num_classes();
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut grad = vec![0.0; batch.values.len()];
    let mut clamp_events = 0;
    let mut z = vec![0.0; c];
    for (i, &y) in batch.labels.iter().enumerate() {
        let f = batch.row(i);
        let cosine = f[y] / s;
        z.copy_from_slice(f);
        z[y] = s * t.value(cosine)?;
        let t_slope = t.derivative(cosine)?;
        let (_, p) = log_softmax(&z);

        let q = p[y];
        let tau_q = tau.value(q)?;
        let g = &mut grad[i * c..(i + 1) * c];
        if tau_q.is_nan() || tau_q < MIN_TAU_OUTPUT {
            clamp_events += 1;
            per_sample.push(-MIN_TAU_OUTPUT.ln());
            g.fill(0.0);
            continue;
        }
        per_sample.push(-tau_q.ln());
        // ∂L/∂z_k = -(τ'(q)/τ(q))·q·(δ_ky - p_k)
        let coef = -tau.derivative(q)? * q / tau_q;
        for k in 0..c {
            g[k] = if k == y {
                coef * complement(&p, y) * t_slope
            } else {
                -coef * p[k]
            } / n;
        }
    }
    LossOutput::from_parts(per_sample, grad, clamp_events)
}

/// The searched loss for one parameter vector.
pub fn unified_loss(batch: &LogitsBatch, params: &LossParams, s: f64) -> Result<LossOutput> {
    unified_loss_with(batch, &params.t_fn, &params.tau_fn, s)
}

/// Margin-softmax loss: the target activation becomes `s·t(f_y / s)`.
pub fn margin_loss(batch: &LogitsBatch, t: &dyn Transform, s: f64) -> Result<LossOutput> {
    unified_loss_with(batch, t, &Identity, s)
}

/// `-τ₁(log p^t_y)`: the same family written with the transform applied to the
/// log-probability. No clamping happens here.
pub fn log_domain_loss(
    batch: &LogitsBatch,
    t: &dyn Transform,
    tau_log: &dyn Transform,
    s: f64,
) -> Result<LossOutput> {
    check_scale(s)?;
    batch.check_finite()?;
    let n = batch.len() as f64;
    let c = batch.num_classes();
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut grad = vec![0.0; batch.values.len()];
    let mut z = vec![0.0; c];
    for (i, &y) in batch.labels.iter().enumerate() {
        let f = batch.row(i);
        let cosine = f[y] / s;
        z.copy_from_slice(f);
        z[y] = s * t.value(cosine)?;
        let t_slope = t.derivative(cosine)?;
        let (log_p, p) = log_softmax(&z);
        per_sample.push(-tau_log.value(log_p[y])?);
        let d_ell = -tau_log.derivative(log_p[y])?;
        let g = &mut grad[i * c..(i + 1) * c];
        for k in 0..c {
            g[k] = if k == y {
                d_ell * complement(&p, y) * t_slope
            } else {
                -d_ell * p[k]
            } / n;
        }
    }
    LossOutput::from_parts(per_sample, grad, 0)
}

fn check_scale(s: f64) -> Result<()> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "scale must be positive, got {s}"
        )))
    }
}

/// Ratio of target to non-target gradients under `t`, divided by the same
/// ratio under plain softmax, measured against non-target class
/// `other[i]` for sample `i`.
///
/// Samples whose softmax probability for the chosen non-target class is
/// below [`MIN_RATIO_PROBABILITY`] are reported as `None`.
pub fn significance_ratio_against(
    batch: &LogitsBatch,
    t: &dyn Transform,
    s: f64,
    other: &[usize],
) -> Result<Vec<Option<f64>>> {
    if other.len() != batch.len() {
        return Err(Error::Shape {
            what: "non-target indices",
            expected: batch.len(),
            actual: other.len(),
        });
    }
    let with_t = margin_loss(batch, t, s)?;
    let plain = softmax_loss(batch)?;
    let n = batch.len() as f64;
    let c = batch.num_classes();
    let mut out = Vec::with_capacity(batch.len());
    for (i, (&y, &j)) in batch.labels.iter().zip(other).enumerate() {
        if j == y || j >= c {
            return Err(Error::Precondition(format!(
                "sample {i}: non-target index {j} is invalid for label {y}"
            )));
        }
        let gt = &with_t.grad[i * c..(i + 1) * c];
        let go = &plain.grad[i * c..(i + 1) * c];
        if go[j].abs() * n < MIN_RATIO_PROBABILITY || gt[j] == 0.0 || go[y] == 0.0 {
            out.push(None);
            continue;
        }
        // signed, so a decreasing `t` shows up as a negative ratio
        let r_t = gt[y] / gt[j];
        let r_o = go[y] / go[j];
        out.push(Some(r_t / r_o));
    }
    Ok(out)
}

/// [`significance_ratio_against`] using the largest non-target activation of
/// each sample (lowest index on ties).
pub fn significance_ratio(
    batch: &LogitsBatch,
    t: &dyn Transform,
    s: f64,
) -> Result<Vec<Option<f64>>> {
    let other: Vec<usize> = (0..batch.len())
        .map(|i| {
            let y = batch.labels[i];
            let row = batch.row(i);
            let mut best = if y == 0 { 1 } else { 0 };
            for k in 0..row.len() {
                if k != y && row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    significance_ratio_against(batch, t, s, &other)
}

/// `d = sqrt(2 - 2f)`: distance between unit vectors whose cosine is `f`.
pub fn distance_from_activation(f: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&f) {
        return Err(Error::Domain {
            x: f,
            lo: -1.0,
            hi: 1.0,
        });
    }
    Ok((2.0 - 2.0 * f).sqrt())
}

/// A loss selectable for training.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    Softmax,
    Focal(FocalParams),
    Margin(MarginTransform),
    Unified(LossParams),
}

impl LossSpec {
    pub fn compute(&self, batch: &LogitsBatch, s: f64) -> Result<LossOutput> {
        match self {
            LossSpec::Softmax => softmax_loss(batch),
            LossSpec::Focal(p) => focal_loss(batch, *p),
            LossSpec::Margin(t) => margin_loss(batch, t, s),
            LossSpec::Unified(p) => unified_loss(batch, p, s),
        }
    }

    /// Margin and searched losses read cosines out of the activations.
    pub fn needs_cosine_head(&self) -> bool {
        matches!(self, LossSpec::Margin(_) | LossSpec::Unified(_))
    }

    pub fn name(&self) -> String {
        match self {
            LossSpec::Softmax => "softmax".into(),
            LossSpec::Focal(p) => format!("focal(alpha={})", p.alpha),
            LossSpec::Margin(t) => {
                let kind = match t.kind {
                    MarginKind::LSoftmax => "lsoftmax",
                    MarginKind::ASoftmax => "asoftmax",
                    MarginKind::ArcFace => "arcface",
                };
                format!("{kind}(m={})", t.m)
            }
            LossSpec::Unified(_) => "searched".into(),
        }
    }
}

/// One row of the target-gradient export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    /// Target-class cosine, `f_y / s`.
    pub f_target: f64,
    /// `|∂L_i/∂f_y|` for the sample on its own (not batch-averaged).
    pub grad_norm_target: f64,
    pub loss_name: String,
}

pub fn target_gradient_rows(
    batch: &LogitsBatch,
    spec: &LossSpec,
    s: f64,
    loss_name: &str,
) -> Result<Vec<GradientRow>> {
    let out = spec.compute(batch, s)?;
    let n = batch.len() as f64;
    let c = batch.num_classes();
    Ok(batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| GradientRow {
            f_target: batch.row(i)[y] / s,
            grad_norm_target: out.grad[i * c + y].abs() * n,
            loss_name: loss_name.to_string(),
        })
        .collect())
}

pub fn write_gradient_csv<W: Write>(writer: W, rows: &[GradientRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::piecewise::{Affine, PiecewiseLinearFn};

    fn single(f: &[f64], y: usize) -> LogitsBatch {
        LogitsBatch::new(f.to_vec(), vec![y], f.len()).unwrap()
    }

    #[test]
    fn softmax_equal_logits() {
        let out = softmax_loss(&single(&[0.0, 0.0], 0)).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
        // p − onehot(y) with N = 1
        assert!((out.grad[0] + 0.5).abs() < 1e-15);
        assert!((out.grad[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_two_class_value() {
        let out = softmax_loss(&single(&[0.6, 0.2], 0)).unwrap();
        let expected = (1.0 + (-0.4f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 0.513015).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax_loss(&single(&[0.3, -1.2, 2.5, 0.0], 2)).unwrap();
        let b = softmax_loss(&single(&[100.3, 98.8, 102.5, 100.0], 2)).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_loss(&single(&[f64::NAN, 0.0], 0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn focal_values() {
        let dominant = focal_loss(&single(&[50.0, 0.0], 0), FocalParams { alpha: 2.0 }).unwrap();
        assert!(dominant.loss.abs() < 1e-40);
        let half = focal_loss(&single(&[0.1, 0.1], 1), FocalParams { alpha: 2.0 }).unwrap();
        assert!((half.loss - 2f64.ln() * 0.25).abs() < 1e-15);
        assert!((half.loss - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn focal_with_zero_alpha_is_softmax() {
        let b = single(&[0.4, -0.3, 1.1], 1);
        let a = focal_loss(&b, FocalParams { alpha: 0.0 }).unwrap();
        let s = softmax_loss(&b).unwrap();
        assert!((a.loss - s.loss).abs() < 1e-12);
        for (x, y) in a.grad.iter().zip(&s.grad) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_tau_probability_matches_focal_loss() {
        for p in [0.05_f64, 0.3, 0.5, 0.9] {
            let logit = (p / (1.0 - p)).ln();
            let out = focal_loss(&single(&[logit, 0.0], 0), FocalParams { alpha: 2.0 }).unwrap();
            assert!((out.loss + focal_tau_probability(p, 2.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn arcface_transform_value() {
        let t = MarginTransform::arcface(0.5).unwrap();
        let expected = (std::f64::consts::FRAC_PI_3 + 0.5).cos();
        assert!((t.value(0.5).unwrap() - expected).abs() < 1e-15);
        assert!((t.value(0.5).unwrap() - 0.0235966).abs() < 1e-6);
    }

    #[test]
    fn lsoftmax_is_chebyshev() {
        for m in 1..=4u32 {
            let t = MarginTransform::l_softmax(m).unwrap();
            for &x in &[-0.9, -0.3, 0.0, 0.45, 0.99] {
                let direct = (m as f64 * f64::acos(x)).cos();
                assert!((t.value(x).unwrap() - direct).abs() < 1e-13);
            }
        }
        assert!(MarginTransform::l_softmax(0).is_err());
        assert!(MarginTransform::new(MarginKind::LSoftmax, 1.5).is_err());
    }

    #[test]
    fn margin_transforms_reject_out_of_domain() {
        let t = MarginTransform::arcface(0.5).unwrap();
        assert!(matches!(t.value(1.5), Err(Error::Domain { .. })));
        let b = single(&[0.9, 0.1], 0);
        assert!(margin_loss(&b, &t, 0.5).is_err());
    }

    #[test]
    fn margin_identity_is_softmax() {
        let b = LogitsBatch::new(vec![0.2, -0.7, 0.9, 0.5, 0.1, -0.4], vec![2, 0], 3).unwrap();
        let a = margin_loss(&b, &Identity, 1.0).unwrap();
        let s = softmax_loss(&b).unwrap();
        assert!((a.loss - s.loss).abs() < 1e-12);
        for (x, y) in a.grad.iter().zip(&s.grad) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_ratio_is_two() {
        let b = LogitsBatch::new(vec![0.1, 0.3, -0.2, 0.05, 0.4, 0.2], vec![0, 2], 3).unwrap();
        let ratios = significance_ratio(
            &b,
            &Affine {
                slope: 2.0,
                bias: -0.5,
            },
            1.0,
        )
        .unwrap();
        for r in ratios {
            assert!((r.unwrap() - 2.0).abs() < 1e-12);
        }
        let ident = significance_ratio(&b, &Identity, 1.0).unwrap();
        assert!(ident.iter().all(|r| (r.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ratio_skips_vanishing_probability() {
        let b = single(&[0.0, -800.0], 0);
        assert_eq!(significance_ratio(&b, &Identity, 1.0).unwrap(), vec![None]);
    }

    #[test]
    fn ratio_rejects_target_as_other() {
        let b = single(&[0.0, 0.5], 0);
        assert!(significance_ratio_against(&b, &Identity, 1.0, &[0]).is_err());
    }

    #[test]
    fn distances() {
        assert_eq!(distance_from_activation(1.0).unwrap(), 0.0);
        assert_eq!(distance_from_activation(-1.0).unwrap(), 2.0);
        assert_eq!(distance_from_activation(0.5).unwrap(), 1.0);
        assert!(distance_from_activation(1.01).is_err());
    }

    #[test]
    fn clamped_tau_contributes_no_gradient() {
        // τ ≡ 1e-3·p - 0.5 is negative everywhere on [0, 1].
        let tau = PiecewiseLinearFn::new(0.0, 1.0, vec![1e-3], vec![-0.5]).unwrap();
        let b = single(&[0.3, 0.1], 0);
        let out = unified_loss_with(&b, &Identity, &tau, 1.0).unwrap();
        assert_eq!(out.clamp_events, 1);
        assert!((out.loss + MIN_TAU_OUTPUT.ln()).abs() < 1e-12);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_rows_for_softmax() {
        let b = LogitsBatch::new(vec![0.5, 0.5, 0.2, -0.2], vec![0, 1], 2).unwrap();
        let rows = target_gradient_rows(&b, &LossSpec::Softmax, 1.0, "softmax").unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].grad_norm_target - 0.5).abs() < 1e-15);
        assert_eq!(rows[1].f_target, -0.2);
        let mut buf = Vec::new();
        write_gradient_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("f_target,grad_norm_target,loss_name\n"));
    }

    #[test]
    fn batch_validation() {
        assert!(LogitsBatch::new(vec![0.0; 3], vec![0], 3).is_ok());
        assert!(LogitsBatch::new(vec![0.0; 3], vec![3], 3).is_err());
        assert!(LogitsBatch::new(vec![0.0; 4], vec![0], 3).is_err());
        assert!(LogitsBatch::new(vec![0.0], vec![0], 1).is_err());
    }
}
