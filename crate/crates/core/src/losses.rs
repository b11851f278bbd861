//! Distillation losses over teacher/student prediction matrices.
//!
//! The building blocks are the classic cross-entropy and temperature-KL
//! alignment terms plus two orthogonality-amplification terms:
//!
//! * SOA contrasts *rows*: the student's prediction on one sample against
//!   the teacher's prediction on a differently-labeled sample.
//! * COA contrasts *columns*: the student's per-class confidence profile
//!   against the teacher's profile for a different class.
//!
//! Both push cross-class prediction directions toward orthogonality in
//! probability space, measured by cosine distance. Their alignment
//! counterparts (KL for rows, L1 for columns) keep same-sample and
//! same-class predictions together. The combined training objective is
//! `α·CE + β·(SOA + KL) + γ·(COA + CA)`.
//!
//! Note the KL orientation: the loss is `KL(S‖T)` with the *student* as
//! the reference distribution, i.e. `Σ S·ln(S/T)`, and the gradient flows
//! through the student only. `LossWeights::kl_teacher_ref` flips it to the
//! more common `KL(T‖S)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, EPS};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid prediction batch: {0}")]
    InvalidBatch(String),
}

/// Row-stochastic prediction matrix with its ground-truth labels.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    probs: Tensor,
    labels: Vec<usize>,
}

impl PredictionBatch {
    /// Validates that `probs` is a B×C matrix of probabilities in `[0, 1]`
    /// whose rows sum to 1 within `1e-9`, with in-range labels. Softmax
    /// outputs are strictly inside `(0, 1)`; exact one-hot rows are
    /// accepted so that analytic fixtures sit on the boundary.
    pub fn new(probs: Tensor, labels: Vec<usize>) -> Result<Self, LossError> {
        if !probs.is_matrix() {
            return Err(LossError::InvalidBatch(format!(
                "predictions must be a matrix, got shape {:?}",
                probs.shape()
            )));
        }
        let (b, c) = (probs.rows(), probs.cols());
        if labels.len() != b {
            return Err(LossError::InvalidBatch(format!(
                "{} labels for {} prediction rows",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(LossError::InvalidBatch(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        {
            let data = probs.data();
            for i in 0..b {
                let row = &data[i * c..(i + 1) * c];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(LossError::InvalidBatch(format!(
                        "row {i} sums to {sum}, expected 1"
                    )));
                }
                if row
                    .iter()
                    .any(|&p| !p.is_finite() || !(0.0..=1.0).contains(&p))
                {
                    return Err(LossError::InvalidBatch(format!(
                        "row {i} contains entries outside [0, 1]"
                    )));
                }
            }
        }
        Ok(Self { probs, labels })
    }

    /// Temperature softmax of logits, paired with labels.
    pub fn from_logits(logits: &Tensor, labels: &[usize], tau: f64) -> Result<Self, LossError> {
        let probs = logits.softmax_rows(tau)?;
        Self::new(probs, labels.to_vec())
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch_size(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }
}

/// Scalar knobs of the training objective, with ablation toggles.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Weight of the sample-wise contrastive term (SOA + KL).
    pub beta: f64,
    /// Weight of the class-wise contrastive term (COA + CA).
    pub gamma: f64,
    /// Vanilla-KD mixing weight: `λ·CE + (1−λ)·KL`.
    pub lambda: f64,
    /// Temperature of the KL alignment term (both sides).
    pub tau_kl: f64,
    /// Temperature of the predictions fed to SOA/COA/CA.
    pub tau_contrast: f64,
    /// Multiply the KL term by `τ²` (the usual gradient-scale convention).
    pub kl_tau_squared: bool,
    /// Flip the KL to `KL(T‖S)` instead of `KL(S‖T)`.
    pub kl_teacher_ref: bool,
    /// Divide the CA term by the batch size as well.
    pub ca_batch_mean: bool,
    pub enable_soa: bool,
    pub enable_kl: bool,
    pub enable_coa: bool,
    pub enable_ca: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            gamma: 2.0,
            lambda: 0.1,
            tau_kl: 4.0,
            tau_contrast: 1.0,
            kl_tau_squared: true,
            kl_teacher_ref: false,
            ca_batch_mean: false,
            enable_soa: true,
            enable_kl: true,
            enable_coa: true,
            enable_ca: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidParameter(format!(
                    "{name} must be a non-negative real, got {v}"
                )));
            }
        }
        if !self.lambda.is_finite() || !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidParameter(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        for (name, v) in [("tau_kl", self.tau_kl), ("tau_contrast", self.tau_contrast)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(LossError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered index pairs `(i, j)` within a batch whose labels differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndexSet {
    pairs: Vec<(usize, usize)>,
}

impl PairIndexSet {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// B×B constant indicator matrix of the pair set.
    fn mask(&self, batch_size: usize) -> Result<Tensor, LossError> {
        let mut data = vec![0.0; batch_size * batch_size];
        for &(i, j) in &self.pairs {
            if i >= batch_size || j >= batch_size {
                return Err(LossError::InvalidParameter(format!(
                    "pair ({i}, {j}) out of range for batch size {batch_size}"
                )));
            }
            data[i * batch_size + j] = 1.0;
        }
        Ok(Tensor::matrix(batch_size, batch_size, data)?)
    }
}

/// All ordered pairs `(i, j)` with `y_i ≠ y_j`. The cardinality equals
/// `B² − Σ_c n_c²` where `n_c` counts the samples of class `c`.
pub fn build_pair_set(labels: &[usize]) -> PairIndexSet {
    let mut pairs = Vec::new();
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi != yj {
                pairs.push((i, j));
            }
        }
    }
    PairIndexSet { pairs }
}

/// Cosine distance `1 − uᵀv / (‖u‖₂‖v‖₂)` between two same-shape
/// vectors. For entrywise non-negative inputs the value lies in `[0, 1]`;
/// it is differentiable with respect to both arguments.
pub fn cosine_distance(u: &Tensor, v: &Tensor) -> Result<Tensor, LossError> {
    if u.shape() != v.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_distance",
            lhs: u.shape().to_vec(),
            rhs: v.shape().to_vec(),
        }
        .into());
    }
    let norm_u: f64 = u.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_v: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_u == 0.0 || norm_v == 0.0 {
        return Err(LossError::DegenerateInput(
            "cosine distance of a zero-norm vector".into(),
        ));
    }
    let dot = u.mul(v)?.sum_all();
    let nu = u.mul(u)?.sum_all().sqrt().clamp_min(EPS);
    let nv = v.mul(v)?.sum_all().sqrt().clamp_min(EPS);
    Ok(dot.div(&nu.mul(&nv)?)?.neg().add_scalar(1.0))
}

fn check_same_shape(s: &PredictionBatch, t: &PredictionBatch) -> Result<(usize, usize), LossError> {
    if s.probs.shape() != t.probs.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            lhs: s.probs.shape().to_vec(),
            rhs: t.probs.shape().to_vec(),
        }
        .into());
    }
    Ok((s.batch_size(), s.num_classes()))
}

/// Mean cross-entropy of the batch against hard labels, with the
/// student's τ=1 softmax.
pub fn loss_ce(student_logits: &Tensor, labels: &[usize]) -> Result<Tensor, LossError> {
    if !student_logits.is_matrix() {
        return Err(LossError::InvalidBatch(format!(
            "logits must be a matrix, got shape {:?}",
            student_logits.shape()
        )));
    }
    let (b, c) = (student_logits.rows(), student_logits.cols());
    if labels.len() != b {
        return Err(LossError::InvalidBatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            b
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(LossError::InvalidBatch(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let log_probs = student_logits.log_softmax_rows(1.0)?;
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let onehot = Tensor::matrix(b, c, onehot)?;
    Ok(log_probs.mul(&onehot)?.sum_all().scale(-1.0 / b as f64))
}

/// `KL(S‖T) = (1/B) Σ_i Σ_j S[i,j]·ln(S[i,j]/T[i,j])` — the student is
/// the reference distribution and the teacher is detached.
pub fn loss_kl(student: &PredictionBatch, teacher: &PredictionBatch) -> Result<Tensor, LossError> {
    let (b, _) = check_same_shape(student, teacher)?;
    let s = student.probs();
    let t = teacher.probs().detach();
    let log_ratio = s.ln().sub(&t.ln())?;
    Ok(s.mul(&log_ratio)?.sum_all().scale(1.0 / b as f64))
}

/// `KL(T‖S)` with the teacher detached: the orientation most KD work
/// uses, selectable through `LossWeights::kl_teacher_ref`.
pub fn loss_kl_teacher_ref(
    student: &PredictionBatch,
    teacher: &PredictionBatch,
) -> Result<Tensor, LossError> {
    let (b, _) = check_same_shape(student, teacher)?;
    let s = student.probs();
    let t = teacher.probs().detach();
    let log_ratio = t.ln().sub(&s.ln())?;
    Ok(t.mul(&log_ratio)?.sum_all().scale(1.0 / b as f64))
}

/// Sample-wise orthogonality amplification:
/// `−(1/|Δ_B|) Σ_{(i,j)∈Δ_B} D(S_i,:, T_j,:)`, bounded in `[−1, 0]`.
/// An empty pair set (single-class batch) yields exactly 0.
pub fn loss_soa(
    student: &PredictionBatch,
    teacher: &PredictionBatch,
    pairs: &PairIndexSet,
) -> Result<Tensor, LossError> {
    let (b, _) = check_same_shape(student, teacher)?;
    if pairs.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let s = student.probs();
    let t = teacher.probs().detach();
    let s_hat = s.div(&s.l2_norm_rows()?.clamp_min(EPS))?;
    let t_hat = t.div(&t.l2_norm_rows()?.clamp_min(EPS))?;
    // Gram[i,j] = cos(S_i,:, T_j,:); average D over the pair mask.
    let gram = s_hat.matmul(&t_hat.t()?)?;
    let masked = gram.mul(&pairs.mask(b)?)?;
    Ok(masked
        .sum_all()
        .scale(1.0 / pairs.len() as f64)
        .add_scalar(-1.0))
}

/// Class-wise orthogonality amplification:
/// `−(1/(C(C−1))) Σ_{j≠k} D(S_:,j, T_:,k)`, bounded in `[−1, 0]`.
pub fn loss_coa(student: &PredictionBatch, teacher: &PredictionBatch) -> Result<Tensor, LossError> {
    let (_, c) = check_same_shape(student, teacher)?;
    if c < 2 {
        return Err(LossError::InvalidParameter(format!(
            "class-wise orthogonality needs at least 2 classes, got {c}"
        )));
    }
    let s = student.probs();
    let t = teacher.probs().detach();
    let s_hat = s.div(&s.l2_norm_cols()?.clamp_min(EPS))?;
    let t_hat = t.div(&t.l2_norm_cols()?.clamp_min(EPS))?;
    // Gram[j,k] = cos(S_:,j, T_:,k); average D over ordered pairs j ≠ k.
    let gram = s_hat.t()?.matmul(&t_hat)?;
    let mut offdiag = vec![1.0; c * c];
    for j in 0..c {
        offdiag[j * c + j] = 0.0;
    }
    let mask = Tensor::matrix(c, c, offdiag)?;
    let count = (c * (c - 1)) as f64;
    Ok(gram
        .mul(&mask)?
        .sum_all()
        .scale(1.0 / count)
        .add_scalar(-1.0))
}

/// Class-wise alignment: per-column L1 distance between student and
/// teacher predictions, averaged over columns:
/// `(1/C) Σ_j Σ_i |S[i,j] − T[i,j]|`.
pub fn loss_ca(student: &PredictionBatch, teacher: &PredictionBatch) -> Result<Tensor, LossError> {
    let (_, c) = check_same_shape(student, teacher)?;
    let s = student.probs();
    let t = teacher.probs().detach();
    Ok(s.sub(&t)?.abs().sum_all().scale(1.0 / c as f64))
}

/// Decomposition of an assembled training loss. `kl` carries the τ²
/// factor when `kl_tau_squared` is set and `ca` the batch-mean division
/// when `ca_batch_mean` is set, so that the weighted identity
/// `total = α·ce + β·(soa + kl) + γ·(coa + ca)` (or the vanilla-KD
/// equivalent) reconstructs `total` exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub soa: f64,
    pub coa: f64,
    pub ca: f64,
    pub total: f64,
}

/// Distillation objective selector, covering the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain cross-entropy training (no teacher).
    CeOnly,
    /// `λ·CE + (1−λ)·KL`.
    VanillaKd,
    /// `α·CE + β·(SOA + KL) + γ·(COA + CA)`.
    Bickd,
    /// Sample-wise contrast only: `α·CE + β·(SOA + KL)`.
    ScOnly,
    /// Class-wise contrast only: `α·CE + γ·(COA + CA)`.
    CcOnly,
    /// Vanilla KD plus sample-wise orthogonality: `KD + β·SOA`.
    OaS,
    /// Vanilla KD plus class-wise orthogonality: `KD + γ·COA`.
    OaC,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::CeOnly,
        Method::VanillaKd,
        Method::Bickd,
        Method::ScOnly,
        Method::CcOnly,
        Method::OaS,
        Method::OaC,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::CeOnly => "ce_only",
            Method::VanillaKd => "vanilla_kd",
            Method::Bickd => "bickd",
            Method::ScOnly => "sc_only",
            Method::CcOnly => "cc_only",
            Method::OaS => "oa_s",
            Method::OaC => "oa_c",
        }
    }

    /// Whether the objective reads teacher predictions.
    pub fn needs_teacher(&self) -> bool {
        !matches!(self, Method::CeOnly)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                format!(
                    "unknown method '{s}', expected one of: {}",
                    names.join(", ")
                )
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

struct Terms {
    soa: Option<Tensor>,
    kl: Option<Tensor>,
    coa: Option<Tensor>,
    ca: Option<Tensor>,
}

/// Component selection for [`build_terms`].
#[derive(Clone, Copy, Default)]
struct Want {
    soa: bool,
    kl: bool,
    coa: bool,
    ca: bool,
}

/// Builds the requested component tensors at the configured temperatures.
fn build_terms(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    w: &LossWeights,
    want: Want,
) -> Result<Terms, LossError> {
    let Want {
        soa: want_soa,
        kl: want_kl,
        coa: want_coa,
        ca: want_ca,
    } = want;
    let contrast = if want_soa || want_coa || want_ca {
        Some((
            PredictionBatch::from_logits(student_logits, labels, w.tau_contrast)?,
            PredictionBatch::from_logits(teacher_logits, labels, w.tau_contrast)?,
        ))
    } else {
        None
    };
    let soa = if want_soa {
        let (s, t) = contrast.as_ref().expect("contrast batches built");
        let pairs = build_pair_set(labels);
        Some(loss_soa(s, t, &pairs)?)
    } else {
        None
    };
    let coa = if want_coa {
        let (s, t) = contrast.as_ref().expect("contrast batches built");
        Some(loss_coa(s, t)?)
    } else {
        None
    };
    let ca = if want_ca {
        let (s, t) = contrast.as_ref().expect("contrast batches built");
        let raw = loss_ca(s, t)?;
        Some(if w.ca_batch_mean {
            raw.scale(1.0 / s.batch_size() as f64)
        } else {
            raw
        })
    } else {
        None
    };
    let kl = if want_kl {
        let s = PredictionBatch::from_logits(student_logits, labels, w.tau_kl)?;
        let t = PredictionBatch::from_logits(teacher_logits, labels, w.tau_kl)?;
        let raw = if w.kl_teacher_ref {
            loss_kl_teacher_ref(&s, &t)?
        } else {
            loss_kl(&s, &t)?
        };
        Some(if w.kl_tau_squared {
            raw.scale(w.tau_kl * w.tau_kl)
        } else {
            raw
        })
    } else {
        None
    };
    Ok(Terms { soa, kl, coa, ca })
}

fn item(t: &Option<Tensor>) -> f64 {
    t.as_ref()
        .map(|x| x.item().expect("loss terms are scalars"))
        .unwrap_or(0.0)
}

fn add_opt(
    acc: Option<Tensor>,
    term: &Option<Tensor>,
    weight: f64,
) -> Result<Option<Tensor>, LossError> {
    let Some(term) = term else { return Ok(acc) };
    if weight == 0.0 {
        return Ok(acc);
    }
    let scaled = term.scale(weight);
    Ok(Some(match acc {
        Some(acc) => acc.add(&scaled)?,
        None => scaled,
    }))
}

/// Sample-wise contrastive loss `L_SC = L_soa + L_KL`, with SOA on
/// `tau_contrast` predictions and the KL term at `tau_kl` (τ²-scaled when
/// configured).
pub fn loss_sc(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Tensor, LossError> {
    w.validate()?;
    let terms = build_terms(
        student_logits,
        teacher_logits,
        labels,
        w,
        Want {
            soa: w.enable_soa,
            kl: w.enable_kl,
            ..Want::default()
        },
    )?;
    let total = add_opt(None, &terms.soa, 1.0)?;
    let total = add_opt(total, &terms.kl, 1.0)?;
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Class-wise contrastive loss `L_CC = L_coa + L_ca`.
pub fn loss_cc(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Tensor, LossError> {
    w.validate()?;
    let terms = build_terms(
        student_logits,
        teacher_logits,
        labels,
        w,
        Want {
            coa: w.enable_coa,
            ca: w.enable_ca,
            ..Want::default()
        },
    )?;
    let total = add_opt(None, &terms.coa, 1.0)?;
    let total = add_opt(total, &terms.ca, 1.0)?;
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// The full bilateral objective
/// `α·L_CE + β·(L_soa + L_KL) + γ·(L_coa + L_ca)`, honoring the four
/// component toggles. Teacher logits are treated as constants.
pub fn loss_bickd(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(Tensor, LossBreakdown), LossError> {
    w.validate()?;
    let ce = loss_ce(student_logits, labels)?;
    let terms = build_terms(
        student_logits,
        teacher_logits,
        labels,
        w,
        Want {
            soa: w.enable_soa,
            kl: w.enable_kl,
            coa: w.enable_coa,
            ca: w.enable_ca,
        },
    )?;
    let mut total = add_opt(None, &Some(ce.clone()), w.alpha)?;
    total = add_opt(total, &terms.soa, w.beta)?;
    total = add_opt(total, &terms.kl, w.beta)?;
    total = add_opt(total, &terms.coa, w.gamma)?;
    total = add_opt(total, &terms.ca, w.gamma)?;
    let total = total.unwrap_or_else(|| Tensor::scalar(0.0));
    let breakdown = LossBreakdown {
        ce: ce.item()?,
        kl: item(&terms.kl),
        soa: item(&terms.soa),
        coa: item(&terms.coa),
        ca: item(&terms.ca),
        total: total.item()?,
    };
    Ok((total, breakdown))
}

/// Vanilla knowledge distillation `λ·L_CE + (1−λ)·L_KL`, with the KL at
/// `tau_kl` and τ²-scaled when configured.
pub fn loss_vanilla_kd(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(Tensor, LossBreakdown), LossError> {
    w.validate()?;
    let ce = loss_ce(student_logits, labels)?;
    let terms = build_terms(
        student_logits,
        teacher_logits,
        labels,
        w,
        Want {
            kl: true,
            ..Want::default()
        },
    )?;
    let kl = terms.kl.as_ref().expect("kl term requested");
    let total = ce.scale(w.lambda).add(&kl.scale(1.0 - w.lambda))?;
    let breakdown = LossBreakdown {
        ce: ce.item()?,
        kl: kl.item()?,
        soa: 0.0,
        coa: 0.0,
        ca: 0.0,
        total: total.item()?,
    };
    Ok((total, breakdown))
}

/// Assembles the objective for a training method. Ablation variants are
/// toggle configurations of the bilateral loss (`sc_only`, `cc_only`) or
/// vanilla KD plus a single amplification term (`oa_s`, `oa_c`).
pub fn method_loss(
    method: Method,
    student_logits: &Tensor,
    teacher_logits: Option<&Tensor>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(Tensor, LossBreakdown), LossError> {
    w.validate()?;
    if method.needs_teacher() && teacher_logits.is_none() {
        return Err(LossError::InvalidParameter(format!(
            "method {method} requires teacher logits"
        )));
    }
    match method {
        Method::CeOnly => {
            let ce = loss_ce(student_logits, labels)?;
            let total = ce.item()?;
            Ok((
                ce,
                LossBreakdown {
                    ce: total,
                    total,
                    ..LossBreakdown::default()
                },
            ))
        }
        Method::VanillaKd => loss_vanilla_kd(student_logits, teacher_logits.unwrap(), labels, w),
        Method::Bickd => loss_bickd(student_logits, teacher_logits.unwrap(), labels, w),
        Method::ScOnly => {
            let w = LossWeights {
                enable_coa: false,
                enable_ca: false,
                ..w.clone()
            };
            loss_bickd(student_logits, teacher_logits.unwrap(), labels, &w)
        }
        Method::CcOnly => {
            let w = LossWeights {
                enable_soa: false,
                enable_kl: false,
                ..w.clone()
            };
            loss_bickd(student_logits, teacher_logits.unwrap(), labels, &w)
        }
        Method::OaS => {
            let teacher_logits = teacher_logits.unwrap();
            let (kd, mut breakdown) = loss_vanilla_kd(student_logits, teacher_logits, labels, w)?;
            let terms = build_terms(
                student_logits,
                teacher_logits,
                labels,
                w,
                Want {
                    soa: true,
                    ..Want::default()
                },
            )?;
            let soa = terms.soa.expect("soa term requested");
            let total = kd.add(&soa.scale(w.beta))?;
            breakdown.soa = soa.item()?;
            breakdown.total = total.item()?;
            Ok((total, breakdown))
        }
        Method::OaC => {
            let teacher_logits = teacher_logits.unwrap();
            let (kd, mut breakdown) = loss_vanilla_kd(student_logits, teacher_logits, labels, w)?;
            let terms = build_terms(
                student_logits,
                teacher_logits,
                labels,
                w,
                Want {
                    coa: true,
                    ..Want::default()
                },
            )?;
            let coa = terms.coa.expect("coa term requested");
            let total = kd.add(&coa.scale(w.gamma))?;
            breakdown.coa = coa.item()?;
            breakdown.total = total.item()?;
            Ok((total, breakdown))
        }
    }
}
