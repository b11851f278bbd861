//! Central finite-difference verification of reverse-mode gradients.
//!
//! Every differentiable loss is checked against the two-sided difference
//! quotient `(f(x+h) − f(x−h)) / 2h` with `h = 1e-6`, both with respect
//! to student logits and with respect to all MLP parameters. The error
//! metric is the max absolute deviation normalized by the largest
//! gradient magnitude (floored at 1e-3 so near-zero gradients compare in
//! absolute terms).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{
    build_pair_set, cosine_distance, loss_ca, loss_cc, loss_ce, loss_coa, loss_kl,
    loss_kl_teacher_ref, loss_sc, loss_soa, method_loss, LossWeights, Method, PredictionBatch,
};
use crate::models::{Activation, MlpSpec, ModelParams};
use crate::tensor::Tensor;

/// Step of the central difference quotient.
pub const FD_STEP: f64 = 1e-6;
/// Maximum relative error accepted by the suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Central finite differences of a scalar function at `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Max absolute deviation normalized by the largest gradient magnitude
/// (with a 1e-3 floor).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-3);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0_f64, f64::max)
        / scale
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub checks: Vec<CheckSummary>,
    pub max_rel_err: f64,
    pub worst_check: String,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOLERANCE
    }
}

fn record(worst: &mut BTreeMap<String, f64>, name: &str, err: f64) {
    let entry = worst.entry(name.to_string()).or_insert(0.0);
    if err > *entry {
        *entry = err;
    }
}

/// Compares the autodiff gradient of `build(leaf)` against central
/// finite differences at `x0`.
fn check_input_grad(
    worst: &mut BTreeMap<String, f64>,
    name: &str,
    shape: Vec<usize>,
    x0: &[f64],
    build: impl Fn(&Tensor) -> Tensor,
) {
    let leaf = Tensor::param(shape.clone(), x0.to_vec()).expect("valid shape");
    let loss = build(&leaf);
    loss.backward().expect("scalar loss");
    let analytic = leaf.grad_or_zeros();
    let mut f = |x: &[f64]| {
        let t = Tensor::constant(shape.clone(), x.to_vec()).expect("valid shape");
        build(&t).item().expect("scalar loss")
    };
    let numeric = central_difference(&mut f, x0, FD_STEP);
    record(worst, name, max_rel_error(&analytic, &numeric));
}

fn uniform(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Fixed inputs of one parameter-space check: the training batch, the
/// detached teacher logits, and the loss configuration.
struct ParamCheckCase<'a> {
    method: Method,
    x: &'a Tensor,
    teacher_logits: Option<&'a Tensor>,
    labels: &'a [usize],
    w: &'a LossWeights,
}

impl ParamCheckCase<'_> {
    fn loss_value(&self, student: &ModelParams) -> f64 {
        let logits = student.forward(self.x).expect("forward");
        let (loss, _) = method_loss(
            self.method,
            &logits,
            self.teacher_logits,
            self.labels,
            self.w,
        )
        .expect("loss");
        loss.item().expect("scalar")
    }
}

/// Finite-difference check of every student parameter under one method.
fn check_param_grads(
    worst: &mut BTreeMap<String, f64>,
    name: &str,
    student: &ModelParams,
    case: &ParamCheckCase<'_>,
) {
    student.zero_grad();
    let logits = student.forward(case.x).expect("forward");
    let (loss, _) = method_loss(
        case.method,
        &logits,
        case.teacher_logits,
        case.labels,
        case.w,
    )
    .expect("loss");
    loss.backward().expect("scalar loss");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for p in student.parameters() {
        analytic.extend(p.grad_or_zeros());
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + FD_STEP;
            p.set_data(&probe).unwrap();
            let plus = case.loss_value(student);
            probe[i] = base[i] - FD_STEP;
            p.set_data(&probe).unwrap();
            let minus = case.loss_value(student);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        p.set_data(&base).unwrap();
    }
    record(worst, name, max_rel_error(&analytic, &numeric));
}

/// One composite expression per trial exercising every primitive
/// gradient rule away from its kinks.
fn check_tensor_ops(worst: &mut BTreeMap<String, f64>, rng: &mut ChaCha20Rng) {
    let (b, c) = (3usize, 4usize);
    let x0 = uniform(rng, b * c, -3.0, 3.0);
    let w = Tensor::matrix(c, 2, uniform(rng, c * 2, -1.0, 1.0)).unwrap();
    let mask = Tensor::matrix(b, c, uniform(rng, b * c, -1.0, 1.0)).unwrap();
    check_input_grad(worst, "tensor_ops", vec![b, c], &x0, |x| {
        let lin = x.matmul(&w).unwrap().tanh().sum_all();
        let soft = x.softmax_rows(2.0).unwrap().mul(&mask).unwrap().sum_all();
        let logsoft = x
            .log_softmax_rows(3.0)
            .unwrap()
            .mul(&mask)
            .unwrap()
            .mean_all();
        let smooth = x.mul(x).unwrap().add_scalar(1.0).sqrt().sum_all();
        let logs = x.mul(x).unwrap().add_scalar(0.5).ln().sum_all();
        let kinkless = x
            .add_scalar(-10.0)
            .abs()
            .sum_all()
            .add(&x.add_scalar(10.0).abs().sum_all())
            .unwrap();
        let clamped = x
            .clamp_min(-10.0)
            .sum_all()
            .add(&x.clamp_min(10.0).sum_all())
            .unwrap();
        let ratio = x.div(&x.mul(x).unwrap().add_scalar(2.0)).unwrap().sum_all();
        let trans = x.t().unwrap().row(1).unwrap().sum_all();
        let slices = x
            .row(0)
            .unwrap()
            .sum_all()
            .add(&x.col(1).unwrap().sum_all())
            .unwrap();
        let reduce = x.sum_axis(0).unwrap().exp().mean_all();
        let meanax = x.mean_axis(1).unwrap().neg().scale(0.5).sum_all();
        lin.scale(0.3)
            .add(&soft)
            .unwrap()
            .add(&logsoft.scale(0.2))
            .unwrap()
            .add(&smooth.scale(0.05))
            .unwrap()
            .add(&logs.scale(0.1))
            .unwrap()
            .add(&kinkless.scale(0.02))
            .unwrap()
            .add(&clamped.scale(0.1))
            .unwrap()
            .add(&ratio.scale(0.4))
            .unwrap()
            .add(&trans.scale(0.3))
            .unwrap()
            .add(&slices.scale(0.2))
            .unwrap()
            .add(&reduce.scale(0.05))
            .unwrap()
            .add(&meanax)
            .unwrap()
    });
}

/// Runs the full finite-difference suite: every loss with respect to
/// student logits, every training objective with respect to all MLP
/// parameters, and a composite tensor-op expression. Deterministic in
/// `(trials, seed)`.
pub fn run(trials: usize, seed: u64) -> GradcheckReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let w = LossWeights::default();

    for _ in 0..trials {
        let b = rng.gen_range(2..=5);
        let c = rng.gen_range(2..=5);
        let student0 = uniform(&mut rng, b * c, -3.0, 3.0);
        let teacher_logits = Tensor::matrix(b, c, uniform(&mut rng, b * c, -3.0, 3.0)).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();

        check_input_grad(&mut worst, "ce", vec![b, c], &student0, |x| {
            loss_ce(x, &labels).unwrap()
        });
        check_input_grad(&mut worst, "kl", vec![b, c], &student0, |x| {
            let s = PredictionBatch::from_logits(x, &labels, w.tau_kl).unwrap();
            let t = PredictionBatch::from_logits(&teacher_logits, &labels, w.tau_kl).unwrap();
            loss_kl(&s, &t).unwrap()
        });
        check_input_grad(&mut worst, "kl_teacher_ref", vec![b, c], &student0, |x| {
            let s = PredictionBatch::from_logits(x, &labels, w.tau_kl).unwrap();
            let t = PredictionBatch::from_logits(&teacher_logits, &labels, w.tau_kl).unwrap();
            loss_kl_teacher_ref(&s, &t).unwrap()
        });
        check_input_grad(&mut worst, "soa", vec![b, c], &student0, |x| {
            let s = PredictionBatch::from_logits(x, &labels, 1.0).unwrap();
            let t = PredictionBatch::from_logits(&teacher_logits, &labels, 1.0).unwrap();
            loss_soa(&s, &t, &build_pair_set(&labels)).unwrap()
        });
        check_input_grad(&mut worst, "coa", vec![b, c], &student0, |x| {
            let s = PredictionBatch::from_logits(x, &labels, 1.0).unwrap();
            let t = PredictionBatch::from_logits(&teacher_logits, &labels, 1.0).unwrap();
            loss_coa(&s, &t).unwrap()
        });
        check_input_grad(&mut worst, "ca", vec![b, c], &student0, |x| {
            let s = PredictionBatch::from_logits(x, &labels, 1.0).unwrap();
            let t = PredictionBatch::from_logits(&teacher_logits, &labels, 1.0).unwrap();
            loss_ca(&s, &t).unwrap()
        });
        check_input_grad(&mut worst, "sc", vec![b, c], &student0, |x| {
            loss_sc(x, &teacher_logits, &labels, &w).unwrap()
        });
        check_input_grad(&mut worst, "cc", vec![b, c], &student0, |x| {
            loss_cc(x, &teacher_logits, &labels, &w).unwrap()
        });
        for method in Method::ALL {
            let teacher_arg = method.needs_teacher().then_some(&teacher_logits);
            check_input_grad(
                &mut worst,
                &format!("{method}_logits"),
                vec![b, c],
                &student0,
                |x| method_loss(method, x, teacher_arg, &labels, &w).unwrap().0,
            );
        }

        // cosine distance of strictly positive vectors
        let u0 = uniform(&mut rng, c, 0.1, 3.0);
        let v = Tensor::matrix(1, c, uniform(&mut rng, c, 0.1, 3.0)).unwrap();
        check_input_grad(&mut worst, "cosine_distance", vec![1, c], &u0, |u| {
            cosine_distance(u, &v).unwrap()
        });

        check_tensor_ops(&mut worst, &mut rng);
    }

    // Parameter-space checks: one MLP pair per activation, all methods.
    for (act, act_name) in [(Activation::Tanh, "tanh"), (Activation::Relu, "relu")] {
        let mut rng_p = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let param_trials = (trials / 10).max(3);
        for _ in 0..param_trials {
            let (b, input_dim, c) = (4usize, 3usize, 3usize);
            let student = ModelParams::init(&MlpSpec {
                input_dim,
                hidden_dims: vec![4],
                num_classes: c,
                activation: act,
                seed: rng_p.gen(),
            })
            .unwrap();
            let teacher = ModelParams::init(&MlpSpec {
                input_dim,
                hidden_dims: vec![6],
                num_classes: c,
                activation: act,
                seed: rng_p.gen(),
            })
            .unwrap();
            let x = Tensor::matrix(b, input_dim, uniform(&mut rng_p, b * input_dim, -2.0, 2.0))
                .unwrap();
            let labels: Vec<usize> = (0..b).map(|_| rng_p.gen_range(0..c)).collect();
            let teacher_logits = teacher.forward(&x).unwrap().detach();
            for method in Method::ALL {
                let case = ParamCheckCase {
                    method,
                    x: &x,
                    teacher_logits: method.needs_teacher().then_some(&teacher_logits),
                    labels: &labels,
                    w: &w,
                };
                check_param_grads(
                    &mut worst,
                    &format!("{method}_params_{act_name}"),
                    &student,
                    &case,
                );
            }
        }
    }

    let checks: Vec<CheckSummary> = worst
        .iter()
        .map(|(name, &max_rel_err)| CheckSummary {
            name: name.clone(),
            max_rel_err,
        })
        .collect();
    let (worst_check, max_rel_err) = worst
        .iter()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite errors"))
        .map(|(n, &e)| (n.clone(), e))
        .unwrap_or_default();
    GradcheckReport {
        trials,
        checks,
        max_rel_err,
        worst_check,
    }
}
