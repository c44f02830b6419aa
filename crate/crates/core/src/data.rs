//! Datasets: synthetic blobs, CSV tables, IDX image files, and label noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl Samples {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(Error::Shape {
                what: "features",
                expected: dim * labels.len(),
                actual: features.len(),
            });
        }
        Ok(Self {
            features,
            dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Samples {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Samples {
            features,
            dim: self.dim,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// Disjoint train and validation samples over `num_classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Samples,
    pub val: Samples,
    pub num_classes: usize,
    pub provenance: String,
}

impl DatasetSplit {
    pub fn new(
        train: Samples,
        val: Samples,
        num_classes: usize,
        provenance: String,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Precondition(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if train.dim != val.dim {
            return Err(Error::Shape {
                what: "validation dim",
                expected: train.dim,
                actual: val.dim,
            });
        }
        for part in [&train, &val] {
            if let Some(&y) = part.labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Consistency(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            if part.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Consistency("non-finite feature value".into()));
            }
        }
        Ok(Self {
            train,
            val,
            num_classes,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.train.dim
    }
}

/// Splits `samples` class by class after a seeded shuffle, sending
/// `floor(n_c · val_fraction)` rows of each class to validation.
pub fn stratified_split(
    samples: &Samples,
    num_classes: usize,
    val_fraction: f64,
    seed: u64,
    provenance: String,
) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Precondition(format!(
            "validation fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let mut rng = stream(seed, Purpose::Split, 0, 0);
    let mut train_rows = Vec::new();
    let mut val_rows = Vec::new();
    for class in 0..num_classes {
        let mut rows: Vec<usize> = (0..samples.len())
            .filter(|&i| samples.labels[i] == class)
            .collect();
        rows.shuffle(&mut rng);
        let n_val = (rows.len() as f64 * val_fraction).floor() as usize;
        val_rows.extend_from_slice(&rows[..n_val]);
        train_rows.extend_from_slice(&rows[n_val..]);
    }
    DatasetSplit::new(
        samples.select(&train_rows),
        samples.select(&val_rows),
        num_classes,
        provenance,
    )
}

/// Gaussian blobs around class centers drawn uniformly on the unit sphere.
///
/// Each class gets `per_class` samples; 80% of each class (rounded down) go to
/// training, the rest to validation.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if num_classes < 2 || per_class < 4 || dim == 0 {
        return Err(Error::Precondition(format!(
            "blobs need C ≥ 2, per_class ≥ 4 and D ≥ 1 (got C={num_classes}, per_class={per_class}, D={dim})"
        )));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::Precondition(format!(
            "spread must be ≥ 0, got {spread}"
        )));
    }
    let mut rng = stream(seed, Purpose::Dataset, 0, 0);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let n_train = per_class * 4 / 5;
    let mut train = (Vec::new(), Vec::new());
    let mut val = (Vec::new(), Vec::new());
    for (class, center) in centers.iter().enumerate() {
        let mut points: Vec<Vec<f64>> = (0..per_class)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| {
                        let z: f64 = rng.sample(StandardNormal);
                        c + spread * z
                    })
                    .collect()
            })
            .collect();
        points.shuffle(&mut rng);
        for (k, p) in points.into_iter().enumerate() {
            let dest = if k < n_train { &mut train } else { &mut val };
            dest.0.extend(p);
            dest.1.push(class);
        }
    }
    DatasetSplit::new(
        Samples::new(train.0, dim, train.1)?,
        Samples::new(val.0, dim, val.1)?,
        num_classes,
        format!(
            "blobs(C={num_classes}, per_class={per_class}, D={dim}, spread={spread}, seed={seed})"
        ),
    )
}

/// Reads a headed CSV. The column named `label_column` holds class names,
/// which are mapped to dense indices in lexicographic order; every other
/// column must be numeric.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Consistency(format!(
                "label column {label_column:?} not found in CSV header"
            ))
        })?;
    let dim = headers.len() - 1;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte());
        if record.len() != headers.len() {
            return Err(Error::Format {
                offset,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (k, field) in record.iter().enumerate() {
            if k == label_idx {
                raw_labels.push(field.to_string());
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                offset,
                message: format!("column {:?}: {field:?} is not a number", &headers[k]),
            })?;
            features.push(v);
        }
    }

    let classes: BTreeMap<&str, usize> = raw_labels
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, name)| (name, i))
        .collect();
    let labels = raw_labels.iter().map(|l| classes[l.as_str()]).collect();
    let samples = Samples::new(features, dim, labels)?;
    stratified_split(
        &samples,
        classes.len(),
        val_fraction,
        seed,
        format!("csv({}, label={label_column}, seed={seed})", path.display()),
    )
}

/// Images from an IDX file: `count` samples of `shape` pixels each, scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub shape: Vec<usize>,
    pub pixels: Vec<f64>,
}

impl IdxImages {
    pub fn sample_dim(&self) -> usize {
        self.shape.iter().product()
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    let offset = cur.position();
    cur.read_u32::<BigEndian>().map_err(|_| Error::Format {
        offset,
        message: format!("truncated header while reading {what}"),
    })
}

fn read_payload(cur: &mut Cursor<&[u8]>, len: usize) -> Result<Vec<u8>> {
    let offset = cur.position();
    let available = cur.get_ref().len() - offset as usize;
    if available < len {
        return Err(Error::Format {
            offset,
            message: format!("expected {len} payload bytes, found {available}"),
        });
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf)?;
    if available > len {
        return Err(Error::Format {
            offset: cur.position(),
            message: format!("{} trailing bytes after payload", available - len),
        });
    }
    Ok(buf)
}

/// Parses an unsigned-byte IDX image file (magic `0x00000803`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor::new(bytes);
    let magic = read_u32(&mut cur, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(&mut cur, "item count")? as usize;
    let rows = read_u32(&mut cur, "row count")? as usize;
    let cols = read_u32(&mut cur, "column count")? as usize;
    let payload = read_payload(&mut cur, count * rows * cols)?;
    Ok(IdxImages {
        count,
        shape: vec![rows, cols],
        pixels: payload.into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

/// Parses an unsigned-byte IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor::new(bytes);
    let magic = read_u32(&mut cur, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32(&mut cur, "item count")? as usize;
    Ok(read_payload(&mut cur, count)?
        .into_iter()
        .map(usize::from)
        .collect())
}

/// Loads an IDX image/label pair. The class count is one more than the
/// largest label present.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let images = parse_idx_images(&fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&fs::read(labels_path.as_ref())?)?;
    if labels.len() != images.count {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let dim = images.sample_dim();
    let samples = Samples::new(images.pixels, dim, labels)?;
    stratified_split(
        &samples,
        num_classes,
        val_fraction,
        seed,
        format!("idx({}, seed={seed})", images_path.as_ref().display()),
    )
}

/// Flips each training label with probability `noise_ratio` to a uniformly
/// chosen different class. Validation labels and all features are untouched.
pub fn corrupt_labels(split: &DatasetSplit, noise_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&noise_ratio) {
        return Err(Error::Precondition(format!(
            "noise ratio must be in [0, 1], got {noise_ratio}"
        )));
    }
    let c = split.num_classes;
    let mut rng = stream(seed, Purpose::LabelNoise, 0, 0);
    let mut out = split.clone();
    for label in out.train.labels.iter_mut() {
        if rng.random::<f64>() < noise_ratio {
            let other = rng.random_range(0..c - 1);
            *label = if other >= *label { other + 1 } else { other };
        }
    }
    out.provenance = format!(
        "{} + label_noise(ratio={noise_ratio}, seed={seed})",
        split.provenance
    );
    Ok(out)
}
