//! Bilevel loss search.
//!
//! Each epoch draws `B` parameter vectors from `N(μ, σ²I)`, trains a copy of
//! the current model for one epoch under each sampled loss, scores every copy
//! on the validation split, and then
//!
//! 1. nudges `μ` along the REINFORCE estimate built from normalized rewards,
//! 2. keeps the best-scoring copy as the model for the next epoch.
//!
//! Candidates train independently and in parallel. Each one draws from its
//! own RNG stream derived from `(seed, epoch, index)`, so the records do not
//! depend on the worker count.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::nnet::{HeadKind, ModelConfig, ModelState, TrainConfig};
use crate::piecewise::LossParams;
use crate::rng::{stream, Purpose};

/// Rewards whose population standard deviation is below this normalize to zero.
pub const MIN_REWARD_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuOptimizer {
    Adam,
    /// `μ ← μ + η·g`, the bare REINFORCE step.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Factorized Gaussian over loss parameters with a fixed `σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDistribution {
    mu: Vec<f64>,
    sigma: f64,
    eta: f64,
    optimizer: MuOptimizer,
    adam: AdamState,
}

impl SearchDistribution {
    pub fn new(mu: Vec<f64>, sigma: f64, eta: f64, optimizer: MuOptimizer) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Precondition(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Precondition(format!(
                "eta must be positive, got {eta}"
            )));
        }
        if mu.is_empty() || mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(
                "mu must be non-empty and finite".into(),
            ));
        }
        let n = mu.len();
        Ok(Self {
            mu,
            sigma,
            eta,
            optimizer,
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Draws `b` raw samples. No slope projection happens here; the
    /// log-density gradient is taken at the raw sample.
    pub fn sample_population(&self, b: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..b)
            .map(|_| {
                self.mu
                    .iter()
                    .map(|&m| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + self.sigma * z
                    })
                    .collect()
            })
            .collect()
    }

    /// `(1/B) Σ_i R_i (θ_i − μ)/σ²`, the score-function estimate of `∇_μ E[R]`.
    pub fn score_gradient(&self, thetas: &[Vec<f64>], rewards: &[f64]) -> Result<Vec<f64>> {
        if thetas.len() != rewards.len() || thetas.is_empty() {
            return Err(Error::Shape {
                what: "rewards",
                expected: thetas.len(),
                actual: rewards.len(),
            });
        }
        let var = self.sigma * self.sigma;
        let mut grad = vec![0.0; self.mu.len()];
        for (theta, &r) in thetas.iter().zip(rewards) {
            if theta.len() != self.mu.len() {
                return Err(Error::Shape {
                    what: "theta",
                    expected: self.mu.len(),
                    actual: theta.len(),
                });
            }
            for ((g, &t), &m) in grad.iter_mut().zip(theta).zip(&self.mu) {
                *g += r * (t - m) / var;
            }
        }
        let b = thetas.len() as f64;
        grad.iter_mut().for_each(|g| *g /= b);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("REINFORCE gradient".into()));
        }
        Ok(grad)
    }

    /// Gradient-ascent step on `μ`. A zero gradient leaves `μ` in place; Adam
    /// moments still decay.
    pub fn reinforce_update(&mut self, thetas: &[Vec<f64>], rewards_norm: &[f64]) -> Result<()> {
        let grad = self.score_gradient(thetas, rewards_norm)?;
        self.ascend(&grad);
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("mu after update".into()));
        }
        Ok(())
    }

    fn ascend(&mut self, grad: &[f64]) {
        let zero = grad.iter().all(|&g| g == 0.0);
        match self.optimizer {
            MuOptimizer::Sgd => {
                for (m, g) in self.mu.iter_mut().zip(grad) {
                    *m += self.eta * g;
                }
            }
            MuOptimizer::Adam => {
                let a = &mut self.adam;
                a.step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(a.step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(a.step as i32);
                for (k, &g) in grad.iter().enumerate() {
                    a.m[k] = ADAM_BETA1 * a.m[k] + (1.0 - ADAM_BETA1) * g;
                    a.v[k] = ADAM_BETA2 * a.v[k] + (1.0 - ADAM_BETA2) * g * g;
                    if !zero {
                        let m_hat = a.m[k] / bc1;
                        let v_hat = a.v[k] / bc2;
                        self.mu[k] += self.eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Zero-mean, unit-variance rewards (population standard deviation).
/// Degenerate inputs map to all zeros.
pub fn normalize_rewards(raw: &[f64]) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_nan() || std < MIN_REWARD_STD {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| (r - mean) / std).collect()
}

/// Normalizes the finite rewards among `raw`; failed (non-finite) entries get 0.
fn normalize_with_failures(raw: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = raw.iter().copied().filter(|r| r.is_finite()).collect();
    let mut normalized = normalize_rewards(&finite).into_iter();
    raw.iter()
        .map(|r| {
            if r.is_finite() {
                normalized.next().unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// `n` independent copies of `winner`.
pub fn broadcast(winner: &ModelState, n: usize) -> Vec<ModelState> {
    vec![winner.clone(); n]
}

/// Index of the highest reward, lowest index on ties.
pub fn select_winner(rewards: &[f64]) -> usize {
    let mut best = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuInit {
    /// Both transforms start at the identity: `a = 1, b = 0`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Population size `B`.
    pub population: usize,
    /// Intervals per transform `M`.
    pub intervals: usize,
    /// Epochs `T`.
    pub epochs: usize,
    pub sigma: f64,
    pub eta: f64,
    pub mu_init: MuInit,
    pub optimizer: MuOptimizer,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Inner training; its `epochs` field is ignored.
    pub train: TrainConfig,
    pub workers: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 32,
            intervals: 6,
            epochs: 20,
            sigma: 0.2,
            eta: 0.05,
            mu_init: MuInit::Identity,
            optimizer: MuOptimizer::Adam,
            hidden_dims: vec![32],
            feature_dim: 16,
            train: TrainConfig::default(),
            workers: 1,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.intervals == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::Precondition(
                "population, intervals, epochs and workers must all be positive".into(),
            ));
        }
        self.train.validate()
    }

    pub fn initial_mu(&self) -> Vec<f64> {
        match self.mu_init {
            MuInit::Identity => LossParams::identity(self.intervals)
                .expect("positive interval count")
                .to_theta(),
        }
    }
}

pub fn model_config(
    data: &DatasetSplit,
    hidden_dims: &[usize],
    feature_dim: usize,
    head: HeadKind,
) -> ModelConfig {
    ModelConfig {
        input_dim: data.dim(),
        hidden_dims: hidden_dims.to_vec(),
        feature_dim,
        num_classes: data.num_classes,
        head,
    }
}

/// What happened in one search epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub thetas: Vec<Vec<f64>>,
    /// Validation accuracy per candidate; failed candidates are `-inf`
    /// (written as `null` in JSON).
    pub raw_rewards: Vec<f64>,
    pub normalized_rewards: Vec<f64>,
    pub winner: usize,
    pub mu_before: Vec<f64>,
    pub mu_after: Vec<f64>,
    /// Mean training loss per candidate (`null` when it failed).
    pub train_losses: Vec<Option<f64>>,
    /// Samples whose `τ(p)` had to be clamped, per candidate.
    pub clamp_events: Vec<usize>,
    /// Error text for failed candidates.
    pub failures: Vec<Option<String>>,
    /// Wall-clock time; kept out of the JSONL so records are reproducible.
    #[serde(skip)]
    pub duration_ms: u128,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub model: ModelState,
    pub records: Vec<EpochRecord>,
    pub distribution: SearchDistribution,
}

impl SearchOutcome {
    /// `μ` at the start and after every epoch.
    pub fn mu_trajectory(&self) -> Vec<Vec<f64>> {
        mu_trajectory(&self.records)
    }
}

struct CandidateResult {
    model: ModelState,
    reward: f64,
    train_loss: Option<f64>,
    clamp_events: usize,
    failure: Option<String>,
}

fn train_candidate(
    mut model: ModelState,
    theta: &[f64],
    cfg: &SearchConfig,
    data: &DatasetSplit,
    epoch: usize,
    index: usize,
) -> CandidateResult {
    let mut rng = stream(cfg.seed, Purpose::CandidateTraining, epoch, index);
    let attempt = LossParams::from_theta(theta, cfg.intervals).and_then(|params| {
        let stats = model.train_epoch(
            &data.train,
            &LossSpec::Unified(params),
            &cfg.train,
            &mut rng,
        )?;
        if !stats.mean_loss.is_finite() {
            return Err(Error::Numeric("training loss".into()));
        }
        let reward = model.evaluate(&data.val)?;
        Ok((stats, reward))
    });
    match attempt {
        Ok((stats, reward)) => CandidateResult {
            model,
            reward,
            train_loss: Some(stats.mean_loss),
            clamp_events: stats.clamp_events,
            failure: None,
        },
        Err(e) => CandidateResult {
            model,
            reward: f64::NEG_INFINITY,
            train_loss: None,
            clamp_events: 0,
            failure: Some(e.to_string()),
        },
    }
}

/// Runs the full search and returns the final winner.
pub fn run_search(cfg: &SearchConfig, data: &DatasetSplit) -> Result<SearchOutcome> {
    run_search_with(cfg, data, |_| {})
}

/// [`run_search`], calling `on_epoch` after every epoch.
pub fn run_search_with<F>(
    cfg: &SearchConfig,
    data: &DatasetSplit,
    mut on_epoch: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if data.val.is_empty() {
        return Err(Error::Precondition(
            "search needs a non-empty validation split".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Precondition(format!("cannot start worker pool: {e}")))?;

    let mut model = ModelState::new(
        model_config(data, &cfg.hidden_dims, cfg.feature_dim, HeadKind::Cosine),
        cfg.seed,
    )?;
    let mut dist = SearchDistribution::new(cfg.initial_mu(), cfg.sigma, cfg.eta, cfg.optimizer)?;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut sampler = stream(cfg.seed, Purpose::Population, epoch, 0);
        let thetas = dist.sample_population(cfg.population, &mut sampler);
        let replicas = broadcast(&model, cfg.population);

        let results: Vec<CandidateResult> = pool.install(|| {
            replicas
                .into_par_iter()
                .zip(thetas.par_iter())
                .enumerate()
                .map(|(i, (replica, theta))| train_candidate(replica, theta, cfg, data, epoch, i))
                .collect()
        });

        let raw: Vec<f64> = results.iter().map(|r| r.reward).collect();
        if raw.iter().all(|r| !r.is_finite()) {
            let reasons: Vec<String> = results
                .iter()
                .enumerate()
                .map(|(i, r)| format!("#{i}: {}", r.failure.as_deref().unwrap_or("?")))
                .collect();
            return Err(Error::Aborted(format!(
                "every candidate failed in epoch {epoch}: {}",
                reasons.join("; ")
            )));
        }
        let normalized = normalize_with_failures(&raw);
        let winner = select_winner(&raw);
        let mu_before = dist.mu().to_vec();
        dist.reinforce_update(&thetas, &normalized)?;

        let mut train_losses = Vec::with_capacity(results.len());
        let mut clamp_events = Vec::with_capacity(results.len());
        let mut failures = Vec::with_capacity(results.len());
        let mut winner_model = None;
        for (i, r) in results.into_iter().enumerate() {
            train_losses.push(r.train_loss);
            clamp_events.push(r.clamp_events);
            failures.push(r.failure);
            if i == winner {
                winner_model = Some(r.model);
            }
        }
        model = winner_model.expect("winner index in range");

        let record = EpochRecord {
            epoch,
            thetas,
            raw_rewards: raw,
            normalized_rewards: normalized,
            winner,
            mu_before,
            mu_after: dist.mu().to_vec(),
            train_losses,
            clamp_events,
            failures,
            duration_ms: started.elapsed().as_millis(),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(SearchOutcome {
        model,
        records,
        distribution: dist,
    })
}

/// Per-epoch metrics of a fixed-loss run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub clamp_events: usize,
}

/// Trains one model with a fixed loss. Uses the same initialization and the
/// same per-epoch shuffling stream as candidate 0 of [`run_search`].
pub fn train_baseline(
    spec: &LossSpec,
    train: &TrainConfig,
    hidden_dims: &[usize],
    feature_dim: usize,
    head: HeadKind,
    data: &DatasetSplit,
) -> Result<(ModelState, Vec<BaselineEpoch>)> {
    train.validate()?;
    let head = if spec.needs_cosine_head() {
        HeadKind::Cosine
    } else {
        head
    };
    let mut model = ModelState::new(
        model_config(data, hidden_dims, feature_dim, head),
        train.seed,
    )?;
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut rng = stream(train.seed, Purpose::CandidateTraining, epoch, 0);
        let stats = model.train_epoch(&data.train, spec, train, &mut rng)?;
        history.push(BaselineEpoch {
            epoch,
            train_loss: stats.mean_loss,
            val_accuracy: model.evaluate(&data.val)?,
            clamp_events: stats.clamp_events,
        });
    }
    Ok((model, history))
}

/// `μ` before the first epoch followed by `μ` after each epoch.
pub fn mu_trajectory(records: &[EpochRecord]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len() + 1);
    if let Some(first) = records.first() {
        out.push(first.mu_before.clone());
    }
    out.extend(records.iter().map(|r| r.mu_after.clone()));
    out
}

/// Population standard deviation of each coordinate over `rows`.
pub fn coordinate_std(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let n = rows.len() as f64;
    (0..first.len())
        .map(|k| {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut writer: W, records: &[EpochRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// CSV with header `epoch,coordinate,value`; epoch 0 is the initial `μ`.
pub fn write_mu_trajectory<W: Write>(writer: W, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "coordinate", "value"])?;
    for (epoch, mu) in mu_trajectory(records).iter().enumerate() {
        for (k, v) in mu.iter().enumerate() {
            w.write_record([epoch.to_string(), k.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normalize_examples() {
        let n = normalize_rewards(&[0.8, 0.9, 1.0]);
        let expected = [-1.224745, 0.0, 1.224745];
        for (a, b) in n.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(normalize_rewards(&[0.5, 0.5, 0.5]), vec![0.0; 3]);
        assert_eq!(normalize_rewards(&[0.7]), vec![0.0]);
    }

    #[test]
    fn failures_are_excluded_from_normalization() {
        let n = normalize_with_failures(&[0.8, f64::NEG_INFINITY, 1.0]);
        assert_eq!(n, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_computed_reinforce_step() {
        let mut d = SearchDistribution::new(vec![0.0], 1.0, 0.05, MuOptimizer::Sgd).unwrap();
        let thetas = vec![vec![1.0], vec![-1.0]];
        assert_eq!(d.score_gradient(&thetas, &[1.0, -1.0]).unwrap(), vec![1.0]);
        d.reinforce_update(&thetas, &[1.0, -1.0]).unwrap();
        assert_eq!(d.mu(), &[0.05]);
    }

    #[test]
    fn adam_first_step_has_magnitude_eta() {
        let mut d = SearchDistribution::new(vec![0.0, 0.0], 1.0, 0.05, MuOptimizer::Adam).unwrap();
        d.reinforce_update(&[vec![1.0, -3.0], vec![-1.0, 3.0]], &[1.0, -1.0])
            .unwrap();
        assert!((d.mu()[0] - 0.05).abs() < 1e-9);
        assert!((d.mu()[1] + 0.05).abs() < 1e-9);
    }

    #[test]
    fn zero_rewards_leave_mu() {
        let mut d = SearchDistribution::new(vec![0.3, -0.2], 0.2, 0.05, MuOptimizer::Adam).unwrap();
        d.reinforce_update(&[vec![1.0, 1.0], vec![0.0, 0.0]], &[1.0, -1.0])
            .unwrap();
        let moved = d.mu().to_vec();
        d.reinforce_update(&[vec![1.0, 1.0], vec![0.0, 0.0]], &[0.0, 0.0])
            .unwrap();
        assert_eq!(d.mu(), &moved[..]);
        assert_eq!(d.adam.step, 2);
    }

    #[test]
    fn degenerate_sigma_samples_mu() {
        let d =
            SearchDistribution::new(vec![1.0, -2.0, 0.5], 1e-12, 0.05, MuOptimizer::Adam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for row in d.sample_population(16, &mut rng) {
            for (a, b) in row.iter().zip(d.mu()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn population_shape() {
        let cfg = SearchConfig::default();
        let d =
            SearchDistribution::new(cfg.initial_mu(), cfg.sigma, cfg.eta, cfg.optimizer).unwrap();
        let pop = d.sample_population(cfg.population, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pop.len(), 32);
        assert!(pop.iter().all(|r| r.len() == 24));
    }

    #[test]
    fn sample_mean_concentrates() {
        let d = SearchDistribution::new(vec![0.5, -1.5], 0.2, 0.05, MuOptimizer::Adam).unwrap();
        let n = 100_000;
        let pop = d.sample_population(n, &mut ChaCha8Rng::seed_from_u64(2));
        for k in 0..2 {
            let mean = pop.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            assert!((mean - d.mu()[k]).abs() < 4.0 * 0.2 / (n as f64).sqrt());
        }
    }

    #[test]
    fn broadcast_copies() {
        let cfg = ModelConfig {
            input_dim: 2,
            hidden_dims: vec![3],
            feature_dim: 2,
            num_classes: 2,
            head: HeadKind::Cosine,
        };
        let winner = ModelState::new(cfg, 5).unwrap();
        assert!(broadcast(&winner, 0).is_empty());
        let mut copies = broadcast(&winner, 3);
        assert!(copies.iter().all(|c| c.to_bytes() == winner.to_bytes()));
        copies[0].params_mut()[0].data[0] += 1.0;
        assert_eq!(copies[1], winner);
        assert_ne!(copies[0], winner);
    }

    #[test]
    fn winner_is_first_maximum() {
        assert_eq!(select_winner(&[0.2, 0.9, 0.9, f64::NEG_INFINITY]), 1);
        assert_eq!(select_winner(&[f64::NEG_INFINITY, 0.1]), 1);
    }

    #[test]
    fn validate_rejects_zero_population() {
        let cfg = SearchConfig {
            population: 0,
            ..SearchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
