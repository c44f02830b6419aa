//! A small MLP with a cosine classification head and hand-written backprop.
//!
//! Layout: `input → hidden (ReLU) … → feature (linear) → head`. The cosine
//! head L2-normalizes the feature and each class weight row before taking dot
//! products, so logits are `s·cos θ_j ∈ [-s, s]`. The linear head emits plain
//! dot products and is only meant for unnormalized softmax baselines.
//!
//! Parameters are stored as named tensors, which is also the checkpoint layout.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::losses::{LogitsBatch, LossSpec};
use crate::rng::{stream, Purpose};

/// Norms at or below this are treated as zero by the cosine head.
pub const MIN_NORM: f64 = 1e-12;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMLF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.feature_dim))
        {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Logit scale `s` for the cosine head.
    pub scale_s: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            scale_s: 10.0,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.scale_s > 0.0
            && self.scale_s.is_finite()
            && self.epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "invalid training config {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }
}

/// Weights, optimizer state and provenance of one model.
///
/// Tensor order: `layer.{k}.weight` (`[out, in]`) and `layer.{k}.bias` for each
/// dense layer, then `head.weight` (`[C, feature]`, one row per class).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
    seed: u64,
}

/// Per-tensor gradients, aligned with the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

struct ForwardCache {
    batch: usize,
    /// Input to each dense layer, then the feature matrix as the last entry.
    activations: Vec<Vec<f64>>,
    /// Pre-activation of each dense layer.
    pre: Vec<Vec<f64>>,
    feature_norms: Vec<f64>,
    unit_features: Vec<f64>,
    weight_norms: Vec<f64>,
    unit_weights: Vec<f64>,
    logits: Vec<f64>,
}

impl ModelState {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization for every tensor.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.feature_dim == 0 || config.num_classes < 2 {
            return Err(Error::Precondition(format!(
                "invalid model config {config:?}"
            )));
        }
        if config.hidden_dims.contains(&0) {
            return Err(Error::Precondition(
                "hidden layers must be non-empty".into(),
            ));
        }
        let mut rng = stream(seed, Purpose::ModelInit, 0, 0);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let mut params = Vec::new();
        for (k, (out_dim, in_dim)) in config.layer_dims().into_iter().enumerate() {
            params.push(Tensor {
                name: format!("layer.{k}.weight"),
                dims: vec![out_dim, in_dim],
                data: uniform(out_dim * in_dim, in_dim),
            });
            params.push(Tensor {
                name: format!("layer.{k}.bias"),
                dims: vec![out_dim],
                data: uniform(out_dim, in_dim),
            });
        }
        params.push(Tensor {
            name: "head.weight".into(),
            dims: vec![config.num_classes, config.feature_dim],
            data: uniform(config.num_classes * config.feature_dim, config.feature_dim),
        });
        let velocity = params.iter().map(Tensor::zeros_like).collect();
        Ok(Self {
            config,
            params,
            velocity,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.config.hidden_dims.len() + 1
    }

    fn head(&self) -> &Tensor {
        self.params.last().expect("head tensor")
    }

    fn run_forward(&self, inputs: &[f64], scale_s: f64) -> Result<ForwardCache> {
        let d = self.config.input_dim;
        if !inputs.len().is_multiple_of(d) {
            return Err(Error::Shape {
                what: "input row width",
                expected: d,
                actual: inputs.len(),
            });
        }
        let batch = inputs.len() / d;
        let mut activations = vec![inputs.to_vec()];
        let mut pre = Vec::with_capacity(self.num_layers());
        for k in 0..self.num_layers() {
            let w = &self.params[2 * k];
            let b = &self.params[2 * k + 1];
            let (out_dim, in_dim) = (w.dims[0], w.dims[1]);
            let input = activations.last().expect("layer input");
            let mut z = vec![0.0; batch * out_dim];
            for i in 0..batch {
                let x = &input[i * in_dim..(i + 1) * in_dim];
                for o in 0..out_dim {
                    let row = &w.data[o * in_dim..(o + 1) * in_dim];
                    z[i * out_dim + o] = b.data[o] + dot(row, x);
                }
            }
            let last = k + 1 == self.num_layers();
            let a = if last {
                z.clone()
            } else {
                z.iter().map(|&v| v.max(0.0)).collect()
            };
            pre.push(z);
            activations.push(a);
        }

        let fd = self.config.feature_dim;
        let c = self.config.num_classes;
        let feature = activations.last().expect("feature");
        let head = &self.head().data;
        let mut logits = vec![0.0; batch * c];
        let (feature_norms, unit_features, weight_norms, unit_weights) = match self.config.head {
            HeadKind::Cosine => {
                let (fnorm, ufeat) = normalize_rows(feature, fd);
                let (wnorm, uw) = normalize_rows(head, fd);
                for i in 0..batch {
                    let x = &ufeat[i * fd..(i + 1) * fd];
                    for j in 0..c {
                        // clamp only repairs rounding past ±1
                        let cos = dot(x, &uw[j * fd..(j + 1) * fd]).clamp(-1.0, 1.0);
                        logits[i * c + j] = scale_s * cos;
                    }
                }
                (fnorm, ufeat, wnorm, uw)
            }
            HeadKind::Linear => {
                for i in 0..batch {
                    let x = &feature[i * fd..(i + 1) * fd];
                    for j in 0..c {
                        logits[i * c + j] = dot(x, &head[j * fd..(j + 1) * fd]);
                    }
                }
                Default::default()
            }
        };
        Ok(ForwardCache {
            batch,
            activations,
            pre,
            feature_norms,
            unit_features,
            weight_norms,
            unit_weights,
            logits,
        })
    }

    /// Logits for a row-major batch of inputs.
    pub fn forward(&self, inputs: &[f64], scale_s: f64) -> Result<Vec<f64>> {
        Ok(self.run_forward(inputs, scale_s)?.logits)
    }

    /// Number of rows in `inputs` whose feature vector is numerically zero.
    pub fn degenerate_features(&self, inputs: &[f64]) -> Result<usize> {
        let cache = self.run_forward(inputs, 1.0)?;
        Ok(match self.config.head {
            HeadKind::Cosine => cache
                .feature_norms
                .iter()
                .filter(|&&n| n <= MIN_NORM)
                .count(),
            HeadKind::Linear => 0,
        })
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the logits.
    pub fn gradients(
        &self,
        inputs: &[f64],
        grad_logits: &[f64],
        scale_s: f64,
    ) -> Result<Gradients> {
        let cache = self.run_forward(inputs, scale_s)?;
        let batch = cache.batch;
        let c = self.config.num_classes;
        let fd = self.config.feature_dim;
        if grad_logits.len() != batch * c {
            return Err(Error::Shape {
                what: "logit gradient",
                expected: batch * c,
                actual: grad_logits.len(),
            });
        }
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(Tensor::zeros_like).collect();
        let feature = cache.activations.last().expect("feature");
        let mut d_feature = vec![0.0; batch * fd];
        let head_idx = self.params.len() - 1;

        match self.config.head {
            HeadKind::Cosine => {
                let mut d_unit_w = vec![0.0; c * fd];
                let mut d_unit_x = vec![0.0; fd];
                for i in 0..batch {
                    let ux = &cache.unit_features[i * fd..(i + 1) * fd];
                    d_unit_x.fill(0.0);
                    for j in 0..c {
                        let g = scale_s * grad_logits[i * c + j];
                        if g == 0.0 {
                            continue;
                        }
                        let uw = &cache.unit_weights[j * fd..(j + 1) * fd];
                        for k in 0..fd {
                            d_unit_x[k] += g * uw[k];
                            d_unit_w[j * fd + k] += g * ux[k];
                        }
                    }
                    normalize_backward(
                        ux,
                        cache.feature_norms[i],
                        &d_unit_x,
                        &mut d_feature[i * fd..(i + 1) * fd],
                    );
                }
                let gw = &mut grads[head_idx];
                for j in 0..c {
                    normalize_backward(
                        &cache.unit_weights[j * fd..(j + 1) * fd],
                        cache.weight_norms[j],
                        &d_unit_w[j * fd..(j + 1) * fd],
                        &mut gw[j * fd..(j + 1) * fd],
                    );
                }
            }
            HeadKind::Linear => {
                let head = &self.head().data;
                let gw = &mut grads[head_idx];
                for i in 0..batch {
                    let x = &feature[i * fd..(i + 1) * fd];
                    for j in 0..c {
                        let g = grad_logits[i * c + j];
                        for k in 0..fd {
                            d_feature[i * fd + k] += g * head[j * fd + k];
                            gw[j * fd + k] += g * x[k];
                        }
                    }
                }
            }
        }

        // Dense layers, last to first. `d_out` is the gradient w.r.t. the
        // layer's pre-activation.
        let mut d_out = d_feature;
        for k in (0..self.num_layers()).rev() {
            let w = &self.params[2 * k];
            let (out_dim, in_dim) = (w.dims[0], w.dims[1]);
            let input = &cache.activations[k];
            {
                let (gw, rest) = grads[2 * k..].split_at_mut(1);
                let gw = &mut gw[0];
                let gb = &mut rest[0];
                for i in 0..batch {
                    let x = &input[i * in_dim..(i + 1) * in_dim];
                    for o in 0..out_dim {
                        let g = d_out[i * out_dim + o];
                        if g == 0.0 {
                            continue;
                        }
                        gb[o] += g;
                        for (acc, &xv) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(x) {
                            *acc += g * xv;
                        }
                    }
                }
            }
            if k == 0 {
                break;
            }
            let prev_pre = &cache.pre[k - 1];
            let mut d_in = vec![0.0; batch * in_dim];
            for i in 0..batch {
                for o in 0..out_dim {
                    let g = d_out[i * out_dim + o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &w.data[o * in_dim..(o + 1) * in_dim];
                    for (acc, &wv) in d_in[i * in_dim..(i + 1) * in_dim].iter_mut().zip(row) {
                        *acc += g * wv;
                    }
                }
            }
            for (d, &z) in d_in.iter_mut().zip(prev_pre) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            d_out = d_in;
        }
        Ok(Gradients(grads))
    }

    /// SGD with momentum: `v ← μ·v + g`, `w ← w − lr·v`.
    pub fn apply(&mut self, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
        if grads.0.len() != self.params.len() {
            return Err(Error::Shape {
                what: "gradient tensors",
                expected: self.params.len(),
                actual: grads.0.len(),
            });
        }
        for (tensor, g) in self.params.iter().zip(&grads.0) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {}", tensor.name)));
            }
        }
        for ((tensor, v), g) in self.params.iter_mut().zip(&mut self.velocity).zip(&grads.0) {
            for ((w, vel), &gk) in tensor.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = cfg.momentum * *vel + gk;
                *w -= cfg.learning_rate * *vel;
            }
        }
        Ok(())
    }

    pub fn backward_and_step(
        &mut self,
        inputs: &[f64],
        grad_logits: &[f64],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let grads = self.gradients(inputs, grad_logits, cfg.scale_s)?;
        self.apply(&grads, cfg)
    }

    /// Mean loss of `spec` over a batch, without updating anything.
    pub fn batch_loss(&self, samples: &Samples, spec: &LossSpec, scale_s: f64) -> Result<f64> {
        let logits = self.forward(samples.features(), scale_s)?;
        let batch = LogitsBatch::new(logits, samples.labels().to_vec(), self.config.num_classes)?;
        Ok(spec.compute(&batch, scale_s)?.loss)
    }

    /// One shuffled pass over `data` in mini-batches of `cfg.batch_size`.
    pub fn train_epoch(
        &mut self,
        data: &Samples,
        spec: &LossSpec,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<EpochStats> {
        if spec.needs_cosine_head() && self.config.head != HeadKind::Cosine {
            return Err(Error::Precondition(format!(
                "{} needs a cosine head",
                spec.name()
            )));
        }
        if data.is_empty() {
            return Err(Error::Precondition("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut clamp_events = 0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = data.select(rows);
            let logits = self.forward(batch.features(), cfg.scale_s)?;
            let lb = LogitsBatch::new(logits, batch.labels().to_vec(), self.config.num_classes)?;
            let out = spec.compute(&lb, cfg.scale_s)?;
            total += out.loss * rows.len() as f64;
            clamp_events += out.clamp_events;
            self.backward_and_step(batch.features(), &out.grad, cfg)?;
        }
        Ok(EpochStats {
            mean_loss: total / data.len() as f64,
            clamp_events,
        })
    }

    /// Top-1 accuracy; ties go to the lowest class index.
    pub fn evaluate(&self, samples: &Samples) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Precondition(
                "cannot evaluate on an empty split".into(),
            ));
        }
        let logits = self.forward(samples.features(), 1.0)?;
        let c = self.config.num_classes;
        let correct = samples
            .labels()
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(&logits[i * c..(i + 1) * c]) == y)
            .count();
        Ok(correct as f64 / samples.len() as f64)
    }

    /// Serializes to the checkpoint format (see [`ModelState::from_bytes`]).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
            (
                "meta.seed".into(),
                vec![2],
                vec![(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64],
            ),
            (
                "meta.head".into(),
                vec![1],
                vec![match self.config.head {
                    HeadKind::Cosine => 0.0,
                    HeadKind::Linear => 1.0,
                }],
            ),
        ];
        for t in &self.params {
            records.push((format!("param.{}", t.name), t.dims.clone(), t.data.clone()));
        }
        for (t, v) in self.params.iter().zip(&self.velocity) {
            records.push((format!("momentum.{}", t.name), t.dims.clone(), v.clone()));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        out.write_u32::<LittleEndian>(records.len() as u32).unwrap();
        for (name, dims, data) in records {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(dims.len() as u32).unwrap();
            for d in dims {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for v in data {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    /// Parses a checkpoint:
    ///
    /// ```text
    /// "AMLF" | version: u32 | record count: u32 | records…
    /// record = name_len: u32 | name: utf-8 | rank: u32 | dims: u64 × rank | values: f64 × Π dims
    /// ```
    ///
    /// All integers and floats are little-endian.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let fail = |offset: u64, message: String| Error::Format { offset, message };
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| fail(0, "truncated magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fail(0, format!("bad checkpoint magic {magic:?}")));
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fail(4, "truncated version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported checkpoint version {version}")));
        }
        let count = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fail(8, "truncated record count".into()))?;

        let mut records = Vec::with_capacity(count as usize);
        for r in 0..count {
            let start = cur.position();
            let trunc = |what: &str| fail(start, format!("record #{r}: truncated {what}"));
            let name_len = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| trunc("name length"))? as usize;
            if name_len > bytes.len() {
                return Err(trunc("name"));
            }
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(|_| trunc("name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| fail(start, format!("record #{r}: name is not UTF-8")))?;
            let named = |what: &str| fail(start, format!("record '{name}': truncated {what}"));
            let rank = cur.read_u32::<LittleEndian>().map_err(|_| named("rank"))? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(cur.read_u64::<LittleEndian>().map_err(|_| named("dims"))? as usize);
            }
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = match n {
                Some(n) if n.saturating_mul(8) <= bytes.len() => n,
                _ => return Err(named("values")),
            };
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(
                    cur.read_f64::<LittleEndian>()
                        .map_err(|_| named("values"))?,
                );
            }
            records.push((start, Tensor { name, dims, data }));
        }
        if (cur.position() as usize) < bytes.len() {
            return Err(fail(
                cur.position(),
                "trailing bytes after last record".into(),
            ));
        }
        Self::from_records(records)
    }

    fn from_records(records: Vec<(u64, Tensor)>) -> Result<Self> {
        let bad = |offset: u64, name: &str, msg: &str| Error::Format {
            offset,
            message: format!("record '{name}': {msg}"),
        };
        let find = |name: &str| records.iter().find(|(_, t)| t.name == name);
        let (off, seed_t) = find("meta.seed").ok_or_else(|| bad(0, "meta.seed", "missing"))?;
        if seed_t.data.len() != 2 {
            return Err(bad(*off, "meta.seed", "expected 2 values"));
        }
        let seed = ((seed_t.data[0] as u64) << 32) | seed_t.data[1] as u64;
        let (off, head_t) = find("meta.head").ok_or_else(|| bad(0, "meta.head", "missing"))?;
        let head = match head_t.data.as_slice() {
            [v] if *v == 0.0 => HeadKind::Cosine,
            [v] if *v == 1.0 => HeadKind::Linear,
            _ => return Err(bad(*off, "meta.head", "unknown head kind")),
        };

        let params: Vec<(u64, Tensor)> = records
            .iter()
            .filter_map(|(o, t)| {
                t.name.strip_prefix("param.").map(|n| {
                    (
                        *o,
                        Tensor {
                            name: n.to_string(),
                            dims: t.dims.clone(),
                            data: t.data.clone(),
                        },
                    )
                })
            })
            .collect();
        let num_layers = params
            .iter()
            .filter(|(_, t)| t.name.ends_with(".weight"))
            .count()
            - 1;
        if num_layers == 0 || params.len() != 2 * num_layers + 1 {
            return Err(bad(0, "param.*", "unexpected parameter set"));
        }
        let mut layer_shapes = Vec::with_capacity(num_layers);
        for k in 0..num_layers {
            let (wo, w) = &params[2 * k];
            let (bo, b) = &params[2 * k + 1];
            if w.name != format!("layer.{k}.weight") || w.dims.len() != 2 {
                return Err(bad(
                    *wo,
                    &w.name,
                    &format!("expected layer.{k}.weight of rank 2"),
                ));
            }
            if b.name != format!("layer.{k}.bias") || b.dims != [w.dims[0]] {
                return Err(bad(
                    *bo,
                    &b.name,
                    &format!("expected layer.{k}.bias of len {}", w.dims[0]),
                ));
            }
            layer_shapes.push((w.dims[0], w.dims[1]));
        }
        for pair in layer_shapes.windows(2) {
            if pair[1].1 != pair[0].0 {
                return Err(bad(0, "param.layer.*", "layer dimensions do not chain"));
            }
        }
        let (ho, h) = &params[2 * num_layers];
        let feature_dim = layer_shapes[num_layers - 1].0;
        if h.name != "head.weight" || h.dims.len() != 2 || h.dims[1] != feature_dim {
            return Err(bad(
                *ho,
                &h.name,
                "expected head.weight of shape [C, feature]",
            ));
        }
        let config = ModelConfig {
            input_dim: layer_shapes[0].1,
            hidden_dims: layer_shapes[..num_layers - 1].iter().map(|s| s.0).collect(),
            feature_dim,
            num_classes: h.dims[0],
            head,
        };
        if config.num_classes < 2 {
            return Err(bad(*ho, &h.name, "need at least two classes"));
        }

        let mut velocity = Vec::with_capacity(params.len());
        for (_, t) in &params {
            let name = format!("momentum.{}", t.name);
            let (o, v) = find(&name).ok_or_else(|| bad(0, &name, "missing"))?;
            if v.dims != t.dims {
                return Err(bad(*o, &name, "shape differs from parameter"));
            }
            velocity.push(v.data.clone());
        }
        Ok(Self {
            config,
            params: params.into_iter().map(|(_, t)| t).collect(),
            velocity,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub clamp_events: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row norms and unit rows; rows with norm ≤ [`MIN_NORM`] map to zero.
fn normalize_rows(data: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut norms = Vec::with_capacity(data.len() / width);
    let mut unit = vec![0.0; data.len()];
    for (row, out) in data.chunks(width).zip(unit.chunks_mut(width)) {
        let norm = dot(row, row).sqrt();
        norms.push(norm);
        if norm > MIN_NORM {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v / norm;
            }
        }
    }
    (norms, unit)
}

/// Pulls `d_unit` back through `u = v/‖v‖`: `(d_unit − (d_unit·u)u)/‖v‖`.
/// Degenerate rows get no gradient.
fn normalize_backward(unit: &[f64], norm: f64, d_unit: &[f64], out: &mut [f64]) {
    if norm <= MIN_NORM {
        return;
    }
    let proj = dot(d_unit, unit);
    for ((o, &d), &u) in out.iter_mut().zip(d_unit).zip(unit) {
        *o += (d - proj * u) / norm;
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(head: HeadKind) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            hidden_dims: vec![5],
            feature_dim: 4,
            num_classes: 3,
            head,
        }
    }

    #[test]
    fn same_seed_same_model() {
        let a = ModelState::new(config(HeadKind::Cosine), 11).unwrap();
        let b = ModelState::new(config(HeadKind::Cosine), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelState::new(config(HeadKind::Cosine), 12).unwrap());
    }

    #[test]
    fn init_bounds() {
        let m = ModelState::new(config(HeadKind::Cosine), 1).unwrap();
        for t in m.params().iter().filter(|t| t.name.ends_with("weight")) {
            let bound = 1.0 / (t.dims[1] as f64).sqrt();
            assert!(t.data.iter().all(|v| v.abs() <= bound), "{}", t.name);
        }
    }

    #[test]
    fn parallel_feature_gives_scale() {
        let mut m = ModelState::new(
            ModelConfig {
                input_dim: 2,
                hidden_dims: vec![],
                feature_dim: 2,
                num_classes: 2,
                head: HeadKind::Cosine,
            },
            0,
        )
        .unwrap();
        // feature = identity map of the input
        m.params_mut()[0].data = vec![1.0, 0.0, 0.0, 1.0];
        m.params_mut()[1].data = vec![0.0, 0.0];
        m.params_mut()[2].data = vec![3.0, 4.0, -4.0, 3.0];
        let logits = m.forward(&[0.6, 0.8], 7.5).unwrap();
        assert!((logits[0] - 7.5).abs() < 1e-12);
        assert!(logits[1].abs() < 1e-12);
    }

    #[test]
    fn zero_feature_yields_zero_logits() {
        let mut m = ModelState::new(config(HeadKind::Cosine), 3).unwrap();
        for t in m
            .params_mut()
            .iter_mut()
            .filter(|t| t.name.starts_with("layer."))
        {
            t.data.fill(0.0);
        }
        let inputs = [0.3, -1.0, 2.0, 1.0, 1.0, 1.0];
        assert_eq!(m.forward(&inputs, 10.0).unwrap(), vec![0.0; 6]);
        assert_eq!(m.degenerate_features(&inputs).unwrap(), 2);
        let g = m.gradients(&inputs, &[0.1; 6], 10.0).unwrap();
        assert!(g.0.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = ModelState::new(config(HeadKind::Cosine), 4).unwrap();
        let before = m.clone();
        m.backward_and_step(&[0.1, 0.2, 0.3], &[0.0; 3], &TrainConfig::default())
            .unwrap();
        assert_eq!(m.params(), before.params());
    }

    #[test]
    fn shape_errors() {
        let m = ModelState::new(config(HeadKind::Cosine), 4).unwrap();
        assert!(matches!(
            m.forward(&[0.1, 0.2], 1.0),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            m.gradients(&[0.1, 0.2, 0.3], &[0.0; 2], 1.0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut m = ModelState::new(config(HeadKind::Linear), 4).unwrap();
        let mut g = Gradients(m.params().iter().map(|t| vec![0.0; t.data.len()]).collect());
        g.0[2][0] = f64::NAN;
        match m.apply(&g, &TrainConfig::default()) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer.1.weight"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scale_invariance_of_feature_magnitude() {
        let m = ModelState::new(config(HeadKind::Cosine), 9).unwrap();
        let mut scaled = m.clone();
        // scaling the last dense layer (weights and bias) scales the feature
        for t in scaled
            .params_mut()
            .iter_mut()
            .filter(|t| t.name.starts_with("layer.1"))
        {
            t.data.iter_mut().for_each(|v| *v *= 37.0);
        }
        let x = [0.4, -0.1, 0.9];
        let a = m.forward(&x, 5.0).unwrap();
        let b = scaled.forward(&x, 5.0).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluate_rejects_empty() {
        let m = ModelState::new(config(HeadKind::Cosine), 0).unwrap();
        let empty = Samples::new(vec![], 3, vec![]).unwrap();
        assert!(matches!(m.evaluate(&empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for head in [HeadKind::Cosine, HeadKind::Linear] {
            let mut m = ModelState::new(config(head), u64::MAX - 5).unwrap();
            let cfg = TrainConfig::default();
            m.backward_and_step(&[0.1, 0.2, 0.3], &[0.1, -0.3, 0.2], &cfg)
                .unwrap();
            let bytes = m.to_bytes();
            let back = ModelState::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(&bytes[..4], b"AMLF");
        }
    }

    #[test]
    fn corrupt_checkpoints() {
        let m = ModelState::new(config(HeadKind::Cosine), 2).unwrap();
        let bytes = m.to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            ModelState::from_bytes(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));
        match ModelState::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("momentum.head.weight"), "{message}")
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            ModelState::from_bytes(&bad_version),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}
