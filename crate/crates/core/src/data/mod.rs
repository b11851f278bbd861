//! Datasets: synthetic Gaussian blobs, IDX ingestion, resampling regimes
//! (few-shot and long-tailed), and seeded batch iteration.
//!
//! Feature storage is a plain row-major buffer so datasets are `Send` and
//! can back parallel sweep runs; [`Dataset::batches`] lifts rows into
//! [`Tensor`] batches at iteration time.

mod idx;

pub use idx::{load_idx, IdxError, IMAGES_MAGIC, LABELS_MAGIC};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid sampler spec: {0}")]
    InvalidSampler(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
}

/// In-memory labeled dataset with per-class bookkeeping.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    class_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Invalid(
                "dataset must contain at least one sample".into(),
            ));
        }
        if dim == 0 {
            return Err(DataError::Invalid(
                "feature dimension must be positive".into(),
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} samples of dim {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut class_counts = vec![0; num_classes];
        for &y in &labels {
            class_counts[y] += 1;
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
            class_counts,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// The whole feature matrix as a constant `N × dim` tensor.
    pub fn features_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.features.clone())
            .expect("dataset dimensions are validated")
    }

    /// New dataset keeping only the given rows, in the given order.
    /// Feature values are copied verbatim.
    pub fn select(&self, indices: &[usize]) -> Result<Self, DataError> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Invalid(format!(
                    "row {i} out of range for {} samples",
                    self.len()
                )));
            }
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.dim, labels, self.num_classes)
    }

    /// Seeded per-epoch shuffled batches. The final partial batch is
    /// kept, and the union of the batches is the dataset exactly once.
    pub fn batches(
        &self,
        batch_size: usize,
        shuffle_seed: u64,
        epoch: usize,
    ) -> Result<BatchIter<'_>, DataError> {
        if batch_size == 0 {
            return Err(DataError::Invalid("batch_size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        Ok(BatchIter {
            ds: self,
            order,
            batch_size,
            pos: 0,
        })
    }

    /// Writes `feature_0..feature_{d-1},label` rows with a header.
    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim)
            .map(|d| format!("feature_{d}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .feature_row(i)
                .iter()
                .map(|v| format!("{v}"))
                .chain(std::iter::once(self.labels[i].to_string()))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Iterator over `(features, labels)` batches of one epoch.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut features = Vec::with_capacity(idx.len() * self.ds.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.ds.feature_row(i));
            labels.push(self.ds.labels[i]);
        }
        let x = Tensor::matrix(idx.len(), self.ds.dim, features)
            .expect("batch dimensions are consistent");
        Some((x, labels))
    }
}

/// Distance between adjacent class centers in generated blob datasets.
pub const BLOB_CENTER_SPACING: f64 = 4.0;

/// Deterministic center of class `c`, always [`BLOB_CENTER_SPACING`]
/// away from the nearest other center. With `dim >= num_classes` the
/// centers sit on a scaled simplex (class `c` on coordinate axis `c`,
/// all pairs equidistant); otherwise they sit on a circle in the first
/// two feature dimensions (a line for `dim == 1`). Remaining dimensions
/// are zero.
pub fn blob_center(class: usize, num_classes: usize, dim: usize) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    if num_classes == 1 {
        return center;
    }
    if dim >= num_classes {
        center[class] = BLOB_CENTER_SPACING / std::f64::consts::SQRT_2;
        return center;
    }
    if dim == 1 {
        center[0] = BLOB_CENTER_SPACING * class as f64;
        return center;
    }
    let radius = BLOB_CENTER_SPACING / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
    let theta = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
    center[0] = radius * theta.cos();
    center[1] = radius * theta.sin();
    center
}

/// Synthetic classification task: class `c` is an isotropic Gaussian of
/// scale `spread` around [`blob_center`]. Fully determined by `seed`;
/// `spread = 0` collapses every sample onto its center.
pub fn make_gaussian_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes == 0 || dim == 0 || n_per_class == 0 {
        return Err(DataError::Invalid(
            "num_classes, dim and n_per_class must be positive".into(),
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(DataError::Invalid(format!(
            "spread must be a non-negative real, got {spread}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut features = Vec::with_capacity(num_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for c in 0..num_classes {
        let center = blob_center(c, num_classes, dim);
        for _ in 0..n_per_class {
            for &cd in center.iter() {
                let noise: f64 = normal.sample(&mut rng);
                features.push(cd + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, dim, labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Full,
    FewShot,
    LongTail,
}

/// Declarative resampling of a dataset: `few_shot` keeps exactly
/// `k_per_class` samples of every class (a transfer volume of `k·C`
/// samples total); `long_tail` keeps `n_c = round(n_max · ρ^(−c/(C−1)))`
/// samples of class `c` (the standard exponential long-tail profile),
/// never fewer than one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    #[serde(default)]
    pub k_per_class: Option<usize>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerSpec {
    pub fn full() -> Self {
        Self {
            kind: SamplerKind::Full,
            k_per_class: None,
            rho: None,
            seed: 0,
        }
    }

    pub fn few_shot(k_per_class: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::FewShot,
            k_per_class: Some(k_per_class),
            rho: None,
            seed,
        }
    }

    pub fn long_tail(rho: f64, seed: u64) -> Self {
        Self {
            kind: SamplerKind::LongTail,
            k_per_class: None,
            rho: Some(rho),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        match self.kind {
            SamplerKind::Full => Ok(()),
            SamplerKind::FewShot => match self.k_per_class {
                Some(k) if k >= 1 => Ok(()),
                _ => Err(DataError::InvalidSampler(
                    "few_shot requires a positive k_per_class".into(),
                )),
            },
            SamplerKind::LongTail => match self.rho {
                Some(rho) if rho.is_finite() && rho >= 1.0 => Ok(()),
                _ => Err(DataError::InvalidSampler(
                    "long_tail requires an imbalance factor rho >= 1".into(),
                )),
            },
        }
    }
}

/// Target per-class counts of the exponential long-tail profile, with
/// `n_max` taken from class 0.
pub fn long_tail_counts(n_max: usize, num_classes: usize, rho: f64) -> Vec<usize> {
    (0..num_classes)
        .map(|c| {
            let exponent = if num_classes == 1 {
                0.0
            } else {
                -(c as f64) / (num_classes as f64 - 1.0)
            };
            let n = (n_max as f64 * rho.powf(exponent)).round() as usize;
            n.max(1)
        })
        .collect()
}

/// Applies a [`SamplerSpec`] to a dataset. Sampling is without
/// replacement, seeded, and only selects rows — feature values are never
/// altered. The resampled dataset is ordered by ascending class index.
pub fn subsample(ds: &Dataset, spec: &SamplerSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let by_class = ds.indices_by_class();
    let targets: Vec<usize> = match spec.kind {
        SamplerKind::Full => return Ok(ds.clone()),
        SamplerKind::FewShot => {
            let k = spec.k_per_class.expect("validated");
            vec![k; ds.num_classes()]
        }
        SamplerKind::LongTail => {
            let rho = spec.rho.expect("validated");
            let n_max = by_class[0].len();
            long_tail_counts(n_max, ds.num_classes(), rho)
        }
    };
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut keep = Vec::new();
    for (c, target) in targets.iter().enumerate() {
        let available = by_class[c].len();
        if *target > available {
            return Err(DataError::Sampling(format!(
                "class {c} has {available} samples, {target} requested"
            )));
        }
        let mut idx = by_class[c].clone();
        idx.shuffle(&mut rng);
        idx.truncate(*target);
        idx.sort_unstable();
        keep.extend(idx);
    }
    ds.select(&keep)
}

/// Declarative dataset source used by configs and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Seeded synthetic blobs; the evaluation split (when
    /// `eval_per_class > 0`) is drawn with `seed + 1`.
    GaussianBlobs {
        num_classes: usize,
        dim: usize,
        train_per_class: usize,
        #[serde(default)]
        eval_per_class: usize,
        spread: f64,
        seed: u64,
    },
    /// MNIST-style IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        eval_images: Option<PathBuf>,
        #[serde(default)]
        eval_labels: Option<PathBuf>,
    },
}

impl DatasetSpec {
    /// Materializes `(train, eval)` datasets.
    pub fn load(&self) -> Result<(Dataset, Option<Dataset>), DataError> {
        match self {
            DatasetSpec::GaussianBlobs {
                num_classes,
                dim,
                train_per_class,
                eval_per_class,
                spread,
                seed,
            } => {
                let train =
                    make_gaussian_blobs(*num_classes, *dim, *train_per_class, *spread, *seed)?;
                let eval = if *eval_per_class > 0 {
                    Some(make_gaussian_blobs(
                        *num_classes,
                        *dim,
                        *eval_per_class,
                        *spread,
                        seed.wrapping_add(1),
                    )?)
                } else {
                    None
                };
                Ok((train, eval))
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let eval = match (eval_images, eval_labels) {
                    (Some(img), Some(lbl)) => Some(load_idx(img, lbl)?),
                    (None, None) => None,
                    _ => {
                        return Err(DataError::Invalid(
                            "eval_images and eval_labels must be given together".into(),
                        ))
                    }
                };
                Ok((train, eval))
            }
        }
    }
}
