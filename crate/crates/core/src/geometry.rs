//! Probability-space geometry statistics and accuracy metrics.
//!
//! The central report quantifies how close the per-class mean prediction
//! vectors are to mutual orthogonality: `offdiag_cos_mean = 0` is the
//! ideal geometry where distinct classes occupy perpendicular directions,
//! while `within_class_cos_mean = 1` means every sample prediction sits
//! on its class mean. Cosine *similarity* is reported (not distance) so
//! that zero reads directly as "orthogonal".

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::PredictionBatch;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid metric input: {0}")]
    Invalid(String),
}

/// Geometry and per-class accuracy statistics of a prediction batch.
/// Classes absent from the batch are flagged with `None` entries and
/// excluded from the pairwise statistics; `offdiag_*` is `None` when
/// fewer than two classes are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryStats {
    /// Mean prediction vector of each true class (`None` if absent).
    pub class_mean_vectors: Vec<Option<Vec<f64>>>,
    /// Mean cosine similarity over ordered pairs of distinct class means.
    pub offdiag_cos_mean: Option<f64>,
    /// Largest cosine similarity between two distinct class means.
    pub offdiag_cos_max: Option<f64>,
    /// Mean cosine similarity between each sample and its class mean.
    pub within_class_cos_mean: f64,
    /// Top-1 accuracy restricted to each true class (`None` if absent).
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Population standard deviation of the per-class accuracies,
    /// computed over present classes.
    pub accuracy_std: f64,
}

fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv).max(crate::tensor::EPS)
}

/// Mean prediction row per true class; absent classes yield `None`.
pub fn class_means(preds: &PredictionBatch) -> Vec<Option<Vec<f64>>> {
    let (b, c) = (preds.batch_size(), preds.num_classes());
    let data = preds.probs().data();
    let mut sums = vec![vec![0.0; c]; c];
    let mut counts = vec![0usize; c];
    for i in 0..b {
        let y = preds.labels()[i];
        counts[y] += 1;
        for j in 0..c {
            sums[y][j] += data[i * c + j];
        }
    }
    sums.into_iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n == 0 {
                None
            } else {
                Some(s.into_iter().map(|v| v / n as f64).collect())
            }
        })
        .collect()
}

/// Full geometry report of a prediction batch: class means, their
/// pairwise orthogonality, within-class concentration, and per-class
/// accuracy with its spread.
pub fn orthogonality_report(preds: &PredictionBatch) -> GeometryStats {
    let (b, c) = (preds.batch_size(), preds.num_classes());
    let means = class_means(preds);
    let present: Vec<usize> = (0..c).filter(|&j| means[j].is_some()).collect();

    let (offdiag_cos_mean, offdiag_cos_max) = if present.len() >= 2 {
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        let mut n = 0usize;
        for &j in &present {
            for &k in &present {
                if j == k {
                    continue;
                }
                let cos = cosine_similarity(means[j].as_ref().unwrap(), means[k].as_ref().unwrap());
                sum += cos;
                max = max.max(cos);
                n += 1;
            }
        }
        (Some(sum / n as f64), Some(max))
    } else {
        (None, None)
    };

    let data = preds.probs().data();
    let mut within = 0.0;
    for i in 0..b {
        let y = preds.labels()[i];
        let mean = means[y].as_ref().expect("sample's own class is present");
        within += cosine_similarity(&data[i * c..(i + 1) * c], mean);
    }
    drop(data);
    let within_class_cos_mean = within / b as f64;

    let (per_class_accuracy, accuracy_std) =
        per_class_accuracy_impl(&preds.probs().argmax_rows(), preds.labels(), c);

    GeometryStats {
        class_mean_vectors: means,
        offdiag_cos_mean,
        offdiag_cos_max,
        within_class_cos_mean,
        per_class_accuracy,
        accuracy_std,
    }
}

/// Fraction of rows whose true label is among the `k` largest logits;
/// ties are broken toward the lower class index.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64, MetricError> {
    if !logits.is_matrix() {
        return Err(MetricError::Invalid(format!(
            "logits must be a matrix, got shape {:?}",
            logits.shape()
        )));
    }
    if labels.len() != logits.rows() {
        return Err(MetricError::Invalid(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let top = logits.topk_rows(k)?;
    let hits = top
        .iter()
        .zip(labels)
        .filter(|(row, y)| row.contains(y))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy per true class plus the population standard deviation
/// across present classes; classes with no samples are `None`.
pub fn per_class_accuracy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(Vec<Option<f64>>, f64), MetricError> {
    if !logits.is_matrix() {
        return Err(MetricError::Invalid(format!(
            "logits must be a matrix, got shape {:?}",
            logits.shape()
        )));
    }
    if labels.len() != logits.rows() {
        return Err(MetricError::Invalid(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    Ok(per_class_accuracy_impl(
        &logits.argmax_rows(),
        labels,
        logits.cols(),
    ))
}

fn per_class_accuracy_impl(
    predicted: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> (Vec<Option<f64>>, f64) {
    let mut correct = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        counts[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| {
            if n == 0 {
                None
            } else {
                Some(c as f64 / n as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let std = if present.is_empty() {
        0.0
    } else {
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        (present.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / present.len() as f64).sqrt()
    };
    (per_class, std)
}
