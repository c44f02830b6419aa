//! Resolved run configuration and the manifest written next to every run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lossearch::data::{corrupt_labels, load_csv, load_idx, make_blobs, DatasetSplit};
use lossearch::losses::{FocalParams, LossSpec, MarginTransform};
use lossearch::nnet::{HeadKind, TrainConfig};
use lossearch::search::{MuInit, MuOptimizer, SearchConfig};
use serde::{Deserialize, Serialize};

use crate::args::{DataArgs, DataKind, Head, LossName, Optimizer, TrainArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub csv_path: Option<PathBuf>,
    pub label_column: String,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub val_fraction: f64,
    pub noise_ratio: f64,
    pub seed: u64,
}

impl DataConfig {
    pub fn from_args(a: &DataArgs, seed: u64) -> Self {
        Self {
            kind: a.data,
            classes: a.classes as usize,
            per_class: a.per_class as usize,
            dim: a.dim as usize,
            spread: a.spread,
            csv_path: a.csv_path.clone(),
            label_column: a.label_column.clone(),
            idx_images: a.idx_images.clone(),
            idx_labels: a.idx_labels.clone(),
            val_fraction: a.val_fraction,
            noise_ratio: a.noise_ratio,
            seed,
        }
    }

    /// Builds the split and applies label noise when requested.
    pub fn load(&self) -> lossearch::Result<DatasetSplit> {
        let missing = |flag: &str| lossearch::Error::Precondition(format!("--{flag} is required"));
        let split = match self.kind {
            DataKind::Blobs => make_blobs(
                self.classes,
                self.per_class,
                self.dim,
                self.spread,
                self.seed,
            )?,
            DataKind::Csv => {
                let path = self.csv_path.as_ref().ok_or_else(|| missing("csv-path"))?;
                load_csv(path, &self.label_column, self.val_fraction, self.seed)?
            }
            DataKind::Idx => {
                let images = self
                    .idx_images
                    .as_ref()
                    .ok_or_else(|| missing("idx-images"))?;
                let labels = self
                    .idx_labels
                    .as_ref()
                    .ok_or_else(|| missing("idx-labels"))?;
                load_idx(images, labels, self.val_fraction, self.seed)?
            }
        };
        if self.noise_ratio > 0.0 {
            corrupt_labels(&split, self.noise_ratio, self.seed)
        } else {
            Ok(split)
        }
    }
}

/// A reference loss with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossChoice {
    pub name: LossName,
    pub margin: Option<f64>,
    pub alpha: Option<f64>,
}

impl LossChoice {
    pub fn resolve(name: LossName, margin: Option<f64>, alpha: f64) -> Self {
        let margin = match name {
            LossName::Arcface => Some(margin.unwrap_or(0.5)),
            LossName::Lsoftmax => Some(margin.unwrap_or(2.0)),
            LossName::Asoftmax => Some(margin.unwrap_or(0.35)),
            LossName::Softmax | LossName::Focal => None,
        };
        let alpha = (name == LossName::Focal).then_some(alpha);
        Self {
            name,
            margin,
            alpha,
        }
    }

    pub fn spec(&self) -> lossearch::Result<LossSpec> {
        let m = self.margin.unwrap_or_default();
        Ok(match self.name {
            LossName::Softmax => LossSpec::Softmax,
            LossName::Focal => LossSpec::Focal(FocalParams {
                alpha: self.alpha.unwrap_or(2.0),
            }),
            LossName::Arcface => LossSpec::Margin(MarginTransform::arcface(m)?),
            LossName::Asoftmax => LossSpec::Margin(MarginTransform::a_softmax(m)?),
            LossName::Lsoftmax => LossSpec::Margin(MarginTransform::new(
                lossearch::losses::MarginKind::LSoftmax,
                m,
            )?),
        })
    }
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size as usize,
        scale_s: a.scale,
        epochs: a.epochs as usize,
        seed: a.seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub loss: LossChoice,
    pub head: HeadKind,
    /// Set when the requested head was replaced by the cosine head.
    pub head_forced: bool,
}

impl BaselineConfig {
    pub fn new(
        data: DataConfig,
        train: TrainConfig,
        hidden_dims: Vec<usize>,
        feature_dim: usize,
        loss: LossChoice,
        head: Head,
    ) -> lossearch::Result<Self> {
        let requested = match head {
            Head::Cosine => HeadKind::Cosine,
            Head::Linear => HeadKind::Linear,
        };
        let needs_cosine = loss.spec()?.needs_cosine_head();
        let head = if needs_cosine {
            HeadKind::Cosine
        } else {
            requested
        };
        Ok(Self {
            data,
            train,
            hidden_dims,
            feature_dim,
            loss,
            head,
            head_forced: head != requested,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRunConfig {
    pub data: DataConfig,
    pub search: SearchConfig,
}

pub fn search_config(
    train: &TrainArgs,
    population: u64,
    intervals: u64,
    sigma: f64,
    eta: f64,
    optimizer: Optimizer,
    workers: usize,
) -> SearchConfig {
    SearchConfig {
        population: population as usize,
        intervals: intervals as usize,
        epochs: train.epochs as usize,
        sigma,
        eta,
        mu_init: MuInit::Identity,
        optimizer: match optimizer {
            Optimizer::Adam => MuOptimizer::Adam,
            Optimizer::Sgd => MuOptimizer::Sgd,
        },
        hidden_dims: train.hidden.iter().map(|&h| h as usize).collect(),
        feature_dim: train.feature_dim as usize,
        train: train_config(train),
        workers,
        seed: train.seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Baseline(BaselineConfig),
    Search(SearchRunConfig),
}

impl RunConfig {
    pub fn data(&self) -> &DataConfig {
        match self {
            RunConfig::Baseline(c) => &c.data,
            RunConfig::Search(c) => &c.data,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub run: RunConfig,
    pub dataset_provenance: String,
    pub started_at_unix: f64,
    pub finished_at_unix: Option<f64>,
    /// Output name to path, relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(run: RunConfig, dataset_provenance: String, outputs: &[(&str, &str)]) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            run,
            dataset_provenance,
            started_at_unix: now(),
            finished_at_unix: None,
            outputs: outputs
                .iter()
                .map(|&(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> lossearch::Result<()> {
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    pub fn read(path: &Path) -> lossearch::Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn finish(&mut self, dir: &Path) -> lossearch::Result<()> {
        self.finished_at_unix = Some(now());
        self.write(dir)
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}
