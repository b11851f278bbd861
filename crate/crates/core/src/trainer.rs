//! The distillation loop: per-batch forward of both models, the selected
//! objective, backprop through the student only, and a Nesterov-momentum
//! SGD step with weight decay and stepwise learning-rate decay.
//!
//! The teacher is frozen throughout — its logits are detached before the
//! loss is assembled, so no gradient ever reaches teacher parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::geometry::{orthogonality_report, topk_accuracy, MetricError};
use crate::losses::{method_loss, LossBreakdown, LossError, LossWeights, Method, PredictionBatch};
use crate::models::{MlpSpec, ModelError, ModelParams};
use crate::report::{EpochRecord, EvalRecord, TrainReport};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("epoch {epoch} out of range for a {epochs}-epoch schedule")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch} ({breakdown:?})")]
    Diverged {
        epoch: usize,
        batch: usize,
        breakdown: LossBreakdown,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimizer and learning-rate protocol of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate η₀.
    pub lr_init: f64,
    /// Epochs (0-based) at which the rate is multiplied by the factor.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Seed of the per-epoch batch shuffles.
    pub seed: u64,
}

impl TrainSchedule {
    /// Desk-scale shrink of the full protocol: 60 epochs with decays at
    /// 30/45/55 and batch size 64.
    pub fn desk_default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr_init: 0.05,
            lr_decay_epochs: vec![30, 45, 55],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            seed: 0,
        }
    }

    /// The full published protocol: 240 epochs, batch 256, η₀ = 0.05
    /// decayed by 0.1 at epochs 150/180/210, Nesterov momentum 0.9,
    /// weight decay 5e-4.
    pub fn full_scale() -> Self {
        Self {
            epochs: 240,
            batch_size: 256,
            lr_init: 0.05,
            lr_decay_epochs: vec![150, 180, 210],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidSchedule(
                "batch_size must be at least 1".into(),
            ));
        }
        if !self.lr_init.is_finite() || self.lr_init <= 0.0 {
            return Err(TrainError::InvalidSchedule(format!(
                "lr_init must be positive, got {}",
                self.lr_init
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(TrainError::InvalidSchedule(format!(
                "lr_decay_factor must lie in (0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        for w in self.lr_decay_epochs.windows(2) {
            if w[0] >= w[1] {
                return Err(TrainError::InvalidSchedule(
                    "lr_decay_epochs must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs && self.epochs > 0 {
                return Err(TrainError::InvalidSchedule(format!(
                    "decay epoch {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidSchedule(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(TrainError::InvalidSchedule(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk_default()
    }
}

/// Learning rate in force at a (0-based) epoch:
/// `η₀ · factor^(number of decay epochs ≤ epoch)`.
pub fn lr_at(schedule: &TrainSchedule, epoch: usize) -> Result<f64, TrainError> {
    if epoch >= schedule.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: schedule.epochs,
        });
    }
    let decays = schedule
        .lr_decay_epochs
        .iter()
        .filter(|&&d| d <= epoch)
        .count();
    Ok(schedule.lr_init * schedule.lr_decay_factor.powi(decays as i32))
}

/// SGD with (optionally Nesterov) momentum and weight decay folded into
/// the gradient:
///
/// ```text
/// g ← ∇θ + wd·θ
/// v ← μ·v + g
/// θ ← θ − η·(g + μ·v)   (Nesterov)     θ ← θ − η·v   (plain momentum)
/// ```
pub struct SgdOptimizer {
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64, params: &[&Tensor]) -> Self {
        Self {
            momentum,
            nesterov,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn from_schedule(schedule: &TrainSchedule, params: &[&Tensor]) -> Self {
        Self::new(
            schedule.momentum,
            schedule.nesterov,
            schedule.weight_decay,
            params,
        )
    }

    /// One update over the given parameters (the same slice, in the same
    /// order, as at construction). Reads each tensor's accumulated
    /// gradient; missing gradients count as zero.
    pub fn step(&mut self, params: &[&Tensor], lr: f64) -> Result<(), TrainError> {
        assert_eq!(params.len(), self.velocity.len(), "parameter set changed");
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad_or_zeros();
            let mut theta = p.to_vec();
            for i in 0..theta.len() {
                let g = grad[i] + self.weight_decay * theta[i];
                v[i] = self.momentum * v[i] + g;
                let update = if self.nesterov {
                    g + self.momentum * v[i]
                } else {
                    v[i]
                };
                theta[i] -= lr * update;
            }
            p.set_data(&theta)?;
        }
        Ok(())
    }
}

fn evaluate(model: &ModelParams, ds: &Dataset) -> Result<EvalRecord, TrainError> {
    let logits = model.forward(&ds.features_tensor())?.detach();
    let top1 = topk_accuracy(&logits, ds.labels(), 1)?;
    let k5 = 5.min(ds.num_classes());
    let top5 = topk_accuracy(&logits, ds.labels(), k5)?;
    let preds = PredictionBatch::from_logits(&logits, ds.labels(), 1.0)?;
    Ok(EvalRecord {
        top1,
        top5,
        geometry: orthogonality_report(&preds),
    })
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.ce += b.ce;
    acc.kl += b.kl;
    acc.soa += b.soa;
    acc.coa += b.coa;
    acc.ca += b.ca;
    acc.total += b.total;
}

fn scale_breakdown(acc: &mut LossBreakdown, s: f64) {
    acc.ce *= s;
    acc.kl *= s;
    acc.soa *= s;
    acc.coa *= s;
    acc.ca *= s;
    acc.total *= s;
}

fn run_training(
    student: &ModelParams,
    teacher: Option<&ModelParams>,
    method: Method,
    weights: &LossWeights,
    train: &Dataset,
    eval: Option<&Dataset>,
    schedule: &TrainSchedule,
) -> Result<TrainReport, TrainError> {
    schedule.validate()?;
    weights.validate()?;
    let params = student.parameters();
    let mut optimizer = SgdOptimizer::from_schedule(schedule, &params);
    let mut report = TrainReport {
        method: method.to_string(),
        seed: schedule.seed,
        init_eval: eval.map(|e| evaluate(student, e)).transpose()?,
        epochs: Vec::with_capacity(schedule.epochs),
    };

    for epoch in 0..schedule.epochs {
        let lr = lr_at(schedule, epoch)?;
        let mut loss_sum = LossBreakdown::default();
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;

        for (bi, (x, labels)) in train
            .batches(schedule.batch_size, schedule.seed, epoch)?
            .enumerate()
        {
            let student_logits = student.forward(&x)?;
            let teacher_logits = match teacher {
                Some(t) => Some(t.forward(&x)?.detach()),
                None => None,
            };
            let (loss, breakdown) = method_loss(
                method,
                &student_logits,
                teacher_logits.as_ref(),
                &labels,
                weights,
            )?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    breakdown,
                });
            }
            student.zero_grad();
            loss.backward()?;
            optimizer.step(&params, lr)?;

            for (p, y) in student_logits.argmax_rows().iter().zip(&labels) {
                if p == y {
                    correct += 1;
                }
            }
            seen += labels.len();
            add_breakdown(&mut loss_sum, &breakdown);
            batches += 1;
        }

        if batches > 0 {
            scale_breakdown(&mut loss_sum, 1.0 / batches as f64);
        }
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: loss_sum,
            train_top1: if seen > 0 {
                correct as f64 / seen as f64
            } else {
                0.0
            },
            eval: eval.map(|e| evaluate(student, e)).transpose()?,
        });
    }
    Ok(report)
}

/// Pretrains a teacher with cross-entropy only (no distillation terms).
/// Deterministic given the model spec seed and the schedule seed.
pub fn train_teacher(
    spec: &MlpSpec,
    train: &Dataset,
    eval: Option<&Dataset>,
    schedule: &TrainSchedule,
) -> Result<(ModelParams, TrainReport), TrainError> {
    let model = ModelParams::init(spec)?;
    let report = run_training(
        &model,
        None,
        Method::CeOnly,
        &LossWeights::default(),
        train,
        eval,
        schedule,
    )?;
    Ok((model, report))
}

/// Distills a frozen teacher into a freshly initialized student with the
/// given method. Teacher parameters are never touched.
pub fn distill(
    teacher: &ModelParams,
    student_spec: &MlpSpec,
    train: &Dataset,
    eval: Option<&Dataset>,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    method: Method,
) -> Result<(ModelParams, TrainReport), TrainError> {
    let student = ModelParams::init(student_spec)?;
    let teacher_ref = if method.needs_teacher() {
        Some(teacher)
    } else {
        None
    };
    let report = run_training(
        &student,
        teacher_ref,
        method,
        weights,
        train,
        eval,
        schedule,
    )?;
    Ok((student, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_counts_decays() {
        let schedule = TrainSchedule {
            epochs: 240,
            lr_init: 0.05,
            lr_decay_epochs: vec![150, 180, 210],
            lr_decay_factor: 0.1,
            ..TrainSchedule::desk_default()
        };
        assert_eq!(lr_at(&schedule, 0).unwrap(), 0.05);
        assert_eq!(lr_at(&schedule, 149).unwrap(), 0.05);
        let e200 = lr_at(&schedule, 200).unwrap();
        assert!((e200 - 5e-4).abs() < 1e-15, "{e200}");
        let e239 = lr_at(&schedule, 239).unwrap();
        assert!((e239 - 5e-5).abs() < 1e-16, "{e239}");
        assert!(lr_at(&schedule, 240).is_err());
    }

    #[test]
    fn full_scale_schedule_matches_published_protocol() {
        let s = TrainSchedule::full_scale();
        s.validate().unwrap();
        assert_eq!(s.epochs, 240);
        assert_eq!(s.batch_size, 256);
        assert_eq!(s.lr_decay_epochs, vec![150, 180, 210]);
        assert_eq!(s.lr_decay_factor, 0.1);
        assert_eq!(s.momentum, 0.9);
        assert!(s.nesterov);
        assert_eq!(s.weight_decay, 5e-4);
    }

    #[test]
    fn schedule_validation_rejects_bad_decay_epochs() {
        let mut s = TrainSchedule::desk_default();
        s.lr_decay_epochs = vec![10, 10];
        assert!(s.validate().is_err());
        s.lr_decay_epochs = vec![10, 70];
        assert!(s.validate().is_err(), "decay epoch beyond epoch count");
    }

    #[test]
    fn nesterov_single_step_matches_hand_computation() {
        // θ = [1, 2], grad = [0.5, −1], μ = 0.9, wd = 0.1, η = 0.2
        let p = Tensor::param(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap();
        p.mul(&c).unwrap().sum_all().backward().unwrap();
        let params = [&p];
        let mut opt = SgdOptimizer::new(0.9, true, 0.1, &params);
        opt.step(&params, 0.2).unwrap();
        // g = grad + wd·θ = [0.6, −0.8]; v = g; θ ← θ − η(g + μv) = θ − 0.2·1.9·g
        let expected = [1.0 - 0.2 * 1.9 * 0.6, 2.0 + 0.2 * 1.9 * 0.8];
        let got = p.to_vec();
        assert!((got[0] - expected[0]).abs() < 1e-15);
        assert!((got[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_weight_decay_shrinks_parameters() {
        // zero data gradient: loss does not depend on θ
        let p = Tensor::param(vec![1, 2], vec![2.0, -4.0]).unwrap();
        let params = [&p];
        let mut opt = SgdOptimizer::new(0.0, false, 0.01, &params);
        let (lr, wd) = (0.5, 0.01);
        let factor = 1.0 - lr * wd;
        opt.step(&params, lr).unwrap();
        let got = p.to_vec();
        assert!((got[0] - 2.0 * factor).abs() < 1e-15);
        assert!((got[1] - (-4.0) * factor).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // constant gradient 1 (loss = sum θ), μ = 0.5, no decay, η = 1
        let p = Tensor::param(vec![1, 1], vec![0.0]).unwrap();
        let params = [&p];
        let mut opt = SgdOptimizer::new(0.5, false, 0.0, &params);
        let mut expected = 0.0;
        let mut v = 0.0;
        for _ in 0..3 {
            p.zero_grad();
            p.sum_all().backward().unwrap();
            opt.step(&params, 1.0).unwrap();
            v = 0.5 * v + 1.0;
            expected -= v;
            assert!((p.to_vec()[0] - expected).abs() < 1e-15);
        }
    }
}
