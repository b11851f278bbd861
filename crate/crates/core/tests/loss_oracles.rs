//! Loss-level oracles: every vectorized loss is compared against a naive
//! double-loop reference implementation, and the analytic fixtures with
//! known closed-form values are frozen here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use bickd_core::losses::{
    build_pair_set, cosine_distance, loss_bickd, loss_ca, loss_cc, loss_ce, loss_coa, loss_kl,
    loss_sc, loss_soa, loss_vanilla_kd, method_loss, LossWeights, Method, PredictionBatch,
};
use bickd_core::tensor::Tensor;

// ── independent double-loop reference implementations ──────────────────

fn cos_ref(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

fn row(m: &[f64], i: usize, c: usize) -> &[f64] {
    &m[i * c..(i + 1) * c]
}

fn col(m: &[f64], j: usize, b: usize, c: usize) -> Vec<f64> {
    (0..b).map(|i| m[i * c + j]).collect()
}

fn soa_ref(s: &[f64], t: &[f64], labels: &[usize], b: usize, c: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..b {
        for j in 0..b {
            if labels[i] != labels[j] {
                sum += 1.0 - cos_ref(row(s, i, c), row(t, j, c));
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        -sum / n as f64
    }
}

fn coa_ref(s: &[f64], t: &[f64], b: usize, c: usize) -> f64 {
    let mut sum = 0.0;
    for j in 0..c {
        for k in 0..c {
            if j != k {
                sum += 1.0 - cos_ref(&col(s, j, b, c), &col(t, k, b, c));
            }
        }
    }
    -sum / (c * (c - 1)) as f64
}

fn ca_ref(s: &[f64], t: &[f64], c: usize) -> f64 {
    let sum: f64 = s.iter().zip(t).map(|(a, b)| (a - b).abs()).sum();
    sum / c as f64
}

fn kl_ref(s: &[f64], t: &[f64], b: usize) -> f64 {
    let sum: f64 = s
        .iter()
        .zip(t)
        .map(|(&si, &ti)| if si == 0.0 { 0.0 } else { si * (si / ti).ln() })
        .sum();
    sum / b as f64
}

fn ce_ref(logits: &[f64], labels: &[usize], b: usize, c: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        let r = row(logits, i, c);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = r.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        total += lse - r[labels[i]];
    }
    total / b as f64
}

// ── randomized batch generation ─────────────────────────────────────────

fn random_probs(rng: &mut ChaCha20Rng, b: usize, c: usize) -> Vec<f64> {
    let mut data = vec![0.0; b * c];
    for i in 0..b {
        let mut sum = 0.0;
        for j in 0..c {
            let v: f64 = rng.gen_range(0.05..1.0);
            data[i * c + j] = v;
            sum += v;
        }
        for j in 0..c {
            data[i * c + j] /= sum;
        }
    }
    data
}

fn batch(data: &[f64], b: usize, c: usize, labels: &[usize]) -> PredictionBatch {
    PredictionBatch::new(
        Tensor::matrix(b, c, data.to_vec()).unwrap(),
        labels.to_vec(),
    )
    .unwrap()
}

fn one_hot_identity(n: usize) -> Vec<f64> {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    data
}

// ── cosine distance ─────────────────────────────────────────────────────

#[test]
fn cosine_orthogonal_one_hots() {
    let u = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let v = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
    assert_eq!(cosine_distance(&u, &v).unwrap().item().unwrap(), 1.0);
}

#[test]
fn cosine_identical_vectors() {
    let u = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
    let d = cosine_distance(&u, &u).unwrap().item().unwrap();
    assert!(d.abs() < 1e-12, "{d}");
}

#[test]
fn cosine_direct_arithmetic() {
    let u = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
    let v = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let d = cosine_distance(&u, &v).unwrap().item().unwrap();
    let expected = 1.0 - 0.5 / 0.5_f64.sqrt();
    assert!((d - expected).abs() < 1e-12, "{d} vs {expected}");
    assert!((d - 0.29289).abs() < 1e-5);
}

#[test]
fn cosine_rejects_zero_norm() {
    let u = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
    let v = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    assert!(cosine_distance(&u, &v).is_err());
}

#[test]
fn cosine_of_nonnegative_vectors_stays_in_unit_interval() {
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    for _ in 0..1000 {
        let n = rng.gen_range(2..6);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0_f64)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0_f64)).collect();
        if u.iter().all(|&x| x == 0.0) || v.iter().all(|&x| x == 0.0) {
            continue;
        }
        let d = cosine_distance(
            &Tensor::matrix(1, n, u).unwrap(),
            &Tensor::matrix(1, n, v).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((0.0..=1.0).contains(&d), "{d}");
    }
}

// ── pair set ────────────────────────────────────────────────────────────

#[test]
fn pair_set_enumeration() {
    let pairs = build_pair_set(&[0, 0, 1]);
    assert_eq!(pairs.pairs(), &[(0, 2), (1, 2), (2, 0), (2, 1)]);
}

#[test]
fn pair_set_single_class_is_empty() {
    assert!(build_pair_set(&[5, 5, 5]).is_empty());
}

#[test]
fn pair_set_cardinality_closed_form() {
    assert_eq!(build_pair_set(&[0, 1, 2]).len(), 6);
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for _ in 0..50 {
        let b = rng.gen_range(1..10);
        let c = rng.gen_range(1..5);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let mut counts = vec![0usize; c];
        for &y in &labels {
            counts[y] += 1;
        }
        let expected = b * b - counts.iter().map(|n| n * n).sum::<usize>();
        assert_eq!(build_pair_set(&labels).len(), expected);
    }
}

// ── cross-entropy ───────────────────────────────────────────────────────

#[test]
fn ce_confident_correct_limit() {
    let logits = Tensor::matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0]).unwrap();
    let ce = loss_ce(&logits, &[0, 1]).unwrap().item().unwrap();
    assert!(ce.abs() < 1e-8, "{ce}");
}

#[test]
fn ce_uniform_logits_is_ln_c() {
    let logits = Tensor::matrix(3, 4, vec![0.7; 12]).unwrap();
    let ce = loss_ce(&logits, &[0, 1, 3]).unwrap().item().unwrap();
    assert!((ce - 4.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn ce_matches_log_sum_exp_reference_on_random_logits() {
    let mut rng = ChaCha20Rng::seed_from_u64(97);
    for _ in 0..200 {
        let b = rng.gen_range(1..=6);
        let c = rng.gen_range(2..=6);
        let logits: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let ce = loss_ce(&Tensor::matrix(b, c, logits.clone()).unwrap(), &labels)
            .unwrap()
            .item()
            .unwrap();
        assert!((ce - ce_ref(&logits, &labels, b, c)).abs() < 1e-12);
    }
}

#[test]
fn ce_direct_evaluation() {
    let logits = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let ce = loss_ce(&logits, &[0]).unwrap().item().unwrap();
    let expected = -(1.0_f64.exp() / (1.0_f64.exp() + 2.0_f64.exp())).ln();
    assert!((ce - expected).abs() < 1e-12);
    assert!((ce - 1.31326).abs() < 1e-5);
}

// ── KL ──────────────────────────────────────────────────────────────────

#[test]
fn kl_identical_distributions_is_zero() {
    let logits = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.0, 0.0, -0.5]).unwrap();
    let s = PredictionBatch::from_logits(&logits, &[0, 1], 4.0).unwrap();
    let t = PredictionBatch::from_logits(&logits, &[0, 1], 4.0).unwrap();
    assert_eq!(loss_kl(&s, &t).unwrap().item().unwrap(), 0.0);
}

#[test]
fn kl_direct_evaluation() {
    let s = batch(&[0.5, 0.5], 1, 2, &[0]);
    let t = batch(&[0.25, 0.75], 1, 2, &[0]);
    let kl = loss_kl(&s, &t).unwrap().item().unwrap();
    let expected = 0.5 * 2.0_f64.ln() + 0.5 * (2.0_f64 / 3.0).ln();
    assert!((kl - expected).abs() < 1e-12);
    assert!((kl - 0.14384).abs() < 1e-5);
}

#[test]
fn kl_nonnegative_and_matches_reference_on_random_batches() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let b = rng.gen_range(1..=8);
        let c = rng.gen_range(2..=8);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let s_data = random_probs(&mut rng, b, c);
        let t_data = random_probs(&mut rng, b, c);
        let kl = loss_kl(
            &batch(&s_data, b, c, &labels),
            &batch(&t_data, b, c, &labels),
        )
        .unwrap()
        .item()
        .unwrap();
        assert!(kl >= 0.0, "Gibbs inequality violated: {kl}");
        let expected = kl_ref(&s_data, &t_data, b);
        assert!((kl - expected).abs() < 1e-12);
    }
}

// ── SOA ─────────────────────────────────────────────────────────────────

#[test]
fn soa_perfect_one_hots_hit_lower_bound() {
    let data = one_hot_identity(3);
    let labels = [0, 1, 2];
    let s = batch(&data, 3, 3, &labels);
    let t = batch(&data, 3, 3, &labels);
    let pairs = build_pair_set(&labels);
    assert_eq!(loss_soa(&s, &t, &pairs).unwrap().item().unwrap(), -1.0);
}

#[test]
fn soa_single_class_batch_is_exactly_zero() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let data = random_probs(&mut rng, 4, 3);
    let labels = [1, 1, 1, 1];
    let s = batch(&data, 4, 3, &labels);
    let t = batch(&data, 4, 3, &labels);
    let pairs = build_pair_set(&labels);
    assert_eq!(loss_soa(&s, &t, &pairs).unwrap().item().unwrap(), 0.0);
}

#[test]
fn soa_hand_chosen_case_matches_double_loop() {
    let s_data = vec![0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4];
    let t_data = vec![0.6, 0.3, 0.1, 0.2, 0.7, 0.1, 0.1, 0.2, 0.7];
    let labels = [0, 1, 2];
    let s = batch(&s_data, 3, 3, &labels);
    let t = batch(&t_data, 3, 3, &labels);
    let pairs = build_pair_set(&labels);
    let got = loss_soa(&s, &t, &pairs).unwrap().item().unwrap();
    let expected = soa_ref(&s_data, &t_data, &labels, 3, 3);
    assert!((got - expected).abs() < 1e-12);
}

// ── COA ─────────────────────────────────────────────────────────────────

#[test]
fn coa_identity_matrix_hits_lower_bound() {
    let data = one_hot_identity(4);
    let labels = [0, 1, 2, 3];
    let s = batch(&data, 4, 4, &labels);
    let t = batch(&data, 4, 4, &labels);
    assert_eq!(loss_coa(&s, &t).unwrap().item().unwrap(), -1.0);
}

#[test]
fn coa_parallel_columns_is_zero() {
    let third = 1.0 / 3.0;
    let s = batch(&[third; 12], 4, 3, &[0, 1, 2, 0]);
    let coa = loss_coa(&s, &s).unwrap().item().unwrap();
    assert!(coa.abs() < 1e-12, "{coa}");
}

#[test]
fn coa_rejects_single_class_width() {
    let s = batch(&[1.0, 1.0], 2, 1, &[0, 0]);
    assert!(loss_coa(&s, &s).is_err());
}

#[test]
fn coa_random_matches_double_loop() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (b, c) = (4, 3);
    let s_data = random_probs(&mut rng, b, c);
    let t_data = random_probs(&mut rng, b, c);
    let labels = vec![0, 1, 2, 0];
    let got = loss_coa(
        &batch(&s_data, b, c, &labels),
        &batch(&t_data, b, c, &labels),
    )
    .unwrap()
    .item()
    .unwrap();
    let expected = coa_ref(&s_data, &t_data, b, c);
    assert!((got - expected).abs() < 1e-12);
}

// ── CA ──────────────────────────────────────────────────────────────────

#[test]
fn ca_identical_is_zero() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let data = random_probs(&mut rng, 3, 4);
    let labels = vec![0, 1, 2];
    let s = batch(&data, 3, 4, &labels);
    assert_eq!(loss_ca(&s, &s).unwrap().item().unwrap(), 0.0);
}

#[test]
fn ca_opposite_one_hots() {
    let s = batch(&[1.0, 0.0], 1, 2, &[0]);
    let t = batch(&[0.0, 1.0], 1, 2, &[0]);
    assert_eq!(loss_ca(&s, &t).unwrap().item().unwrap(), 1.0);
}

#[test]
fn ca_random_matches_elementwise_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let (b, c) = (5, 4);
    let s_data = random_probs(&mut rng, b, c);
    let t_data = random_probs(&mut rng, b, c);
    let labels = vec![0, 1, 2, 3, 0];
    let got = loss_ca(
        &batch(&s_data, b, c, &labels),
        &batch(&t_data, b, c, &labels),
    )
    .unwrap()
    .item()
    .unwrap();
    assert!((got - ca_ref(&s_data, &t_data, c)).abs() < 1e-12);
}

// ── vectorized-vs-naive sweep (acceptance criterion 1 shape) ────────────

#[test]
fn vectorized_losses_match_double_loop_references() {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let b = rng.gen_range(1..=8);
        let c = rng.gen_range(2..=8);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let s_data = random_probs(&mut rng, b, c);
        let t_data = random_probs(&mut rng, b, c);
        let s = batch(&s_data, b, c, &labels);
        let t = batch(&t_data, b, c, &labels);
        let pairs = build_pair_set(&labels);

        let soa = loss_soa(&s, &t, &pairs).unwrap().item().unwrap();
        assert!((soa - soa_ref(&s_data, &t_data, &labels, b, c)).abs() < 1e-12);

        let coa = loss_coa(&s, &t).unwrap().item().unwrap();
        assert!((coa - coa_ref(&s_data, &t_data, b, c)).abs() < 1e-12);

        let ca = loss_ca(&s, &t).unwrap().item().unwrap();
        assert!((ca - ca_ref(&s_data, &t_data, c)).abs() < 1e-12);

        let kl = loss_kl(&s, &t).unwrap().item().unwrap();
        assert!((kl - kl_ref(&s_data, &t_data, b)).abs() < 1e-12);

        // bound invariants on the same random batches
        assert!((-1.0..=0.0).contains(&soa), "{soa}");
        assert!((-1.0..=0.0).contains(&coa), "{coa}");
        assert!(kl >= 0.0);
        assert!(ca >= 0.0);
    }
}

// ── composite losses ────────────────────────────────────────────────────

fn random_logits(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

#[test]
fn sc_reduces_to_kl_when_soa_disabled() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let (b, c) = (4, 3);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2, 1];

    // without the τ² convention the SC loss is the bare KL
    let w = LossWeights {
        enable_soa: false,
        kl_tau_squared: false,
        ..LossWeights::default()
    };
    let sc = loss_sc(&s_logits, &t_logits, &labels, &w)
        .unwrap()
        .item()
        .unwrap();
    let s = PredictionBatch::from_logits(&s_logits, &labels, w.tau_kl).unwrap();
    let t = PredictionBatch::from_logits(&t_logits, &labels, w.tau_kl).unwrap();
    let kl = loss_kl(&s, &t).unwrap().item().unwrap();
    assert!((sc - kl).abs() < 1e-15);

    // with the default τ² convention it is τ²·KL
    let w2 = LossWeights {
        enable_soa: false,
        ..LossWeights::default()
    };
    let sc2 = loss_sc(&s_logits, &t_logits, &labels, &w2)
        .unwrap()
        .item()
        .unwrap();
    assert!((sc2 - 16.0 * kl).abs() < 1e-12);
}

#[test]
fn sc_is_zero_for_identical_single_class_batch() {
    let logits = Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, 1.0, 0.5, -0.5]).unwrap();
    let labels = vec![1, 1, 1];
    let sc = loss_sc(&logits, &logits, &labels, &LossWeights::default())
        .unwrap()
        .item()
        .unwrap();
    assert_eq!(sc, 0.0);
}

#[test]
fn sc_is_component_sum() {
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let (b, c) = (5, 4);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2, 3, 1];
    let w = LossWeights::default();

    let sc = loss_sc(&s_logits, &t_logits, &labels, &w)
        .unwrap()
        .item()
        .unwrap();
    let s1 = PredictionBatch::from_logits(&s_logits, &labels, 1.0).unwrap();
    let t1 = PredictionBatch::from_logits(&t_logits, &labels, 1.0).unwrap();
    let soa = loss_soa(&s1, &t1, &build_pair_set(&labels))
        .unwrap()
        .item()
        .unwrap();
    let sk = PredictionBatch::from_logits(&s_logits, &labels, w.tau_kl).unwrap();
    let tk = PredictionBatch::from_logits(&t_logits, &labels, w.tau_kl).unwrap();
    let kl = loss_kl(&sk, &tk).unwrap().item().unwrap() * w.tau_kl * w.tau_kl;
    assert!((sc - (soa + kl)).abs() < 1e-12);
}

#[test]
fn cc_reduces_to_ca_when_coa_disabled() {
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let (b, c) = (4, 3);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2, 0];
    let w = LossWeights {
        enable_coa: false,
        ..LossWeights::default()
    };
    let cc = loss_cc(&s_logits, &t_logits, &labels, &w)
        .unwrap()
        .item()
        .unwrap();
    let s = PredictionBatch::from_logits(&s_logits, &labels, 1.0).unwrap();
    let t = PredictionBatch::from_logits(&t_logits, &labels, 1.0).unwrap();
    let ca = loss_ca(&s, &t).unwrap().item().unwrap();
    assert!((cc - ca).abs() < 1e-15);
}

#[test]
fn cc_uniform_identical_predictions_vanish() {
    let logits = Tensor::matrix(3, 3, vec![0.4; 9]).unwrap();
    let labels = vec![0, 1, 2];
    let cc = loss_cc(&logits, &logits, &labels, &LossWeights::default())
        .unwrap()
        .item()
        .unwrap();
    assert!(cc.abs() < 1e-12, "{cc}");
}

#[test]
fn cc_is_component_sum() {
    let mut rng = ChaCha20Rng::seed_from_u64(29);
    let (b, c) = (6, 3);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2, 0, 1, 2];
    let w = LossWeights::default();
    let cc = loss_cc(&s_logits, &t_logits, &labels, &w)
        .unwrap()
        .item()
        .unwrap();
    let s = PredictionBatch::from_logits(&s_logits, &labels, 1.0).unwrap();
    let t = PredictionBatch::from_logits(&t_logits, &labels, 1.0).unwrap();
    let coa = loss_coa(&s, &t).unwrap().item().unwrap();
    let ca = loss_ca(&s, &t).unwrap().item().unwrap();
    assert!((cc - (coa + ca)).abs() < 1e-12);
}

#[test]
fn bickd_collapses_to_ce_without_contrast_weights() {
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let (b, c) = (4, 3);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 2, 1, 0];
    let w = LossWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let (total, breakdown) = loss_bickd(&s_logits, &t_logits, &labels, &w).unwrap();
    let ce = loss_ce(&s_logits, &labels).unwrap().item().unwrap();
    assert_eq!(total.item().unwrap(), ce);
    assert_eq!(breakdown.total, breakdown.ce);
}

#[test]
fn bickd_paper_weights_assemble_from_components() {
    let mut rng = ChaCha20Rng::seed_from_u64(37);
    let (b, c) = (5, 4);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2, 3, 2];
    let w = LossWeights::default();
    assert_eq!((w.alpha, w.beta, w.gamma), (1.0, 2.0, 2.0));

    let (total, bd) = loss_bickd(&s_logits, &t_logits, &labels, &w).unwrap();

    let ce = loss_ce(&s_logits, &labels).unwrap().item().unwrap();
    let s1 = PredictionBatch::from_logits(&s_logits, &labels, 1.0).unwrap();
    let t1 = PredictionBatch::from_logits(&t_logits, &labels, 1.0).unwrap();
    let soa = loss_soa(&s1, &t1, &build_pair_set(&labels))
        .unwrap()
        .item()
        .unwrap();
    let coa = loss_coa(&s1, &t1).unwrap().item().unwrap();
    let ca = loss_ca(&s1, &t1).unwrap().item().unwrap();
    let sk = PredictionBatch::from_logits(&s_logits, &labels, 4.0).unwrap();
    let tk = PredictionBatch::from_logits(&t_logits, &labels, 4.0).unwrap();
    let kl = loss_kl(&sk, &tk).unwrap().item().unwrap() * 16.0;

    let expected = 1.0 * ce + 2.0 * (soa + kl) + 2.0 * (coa + ca);
    assert!((total.item().unwrap() - expected).abs() < 1e-12);
    let from_breakdown = w.alpha * bd.ce + w.beta * (bd.soa + bd.kl) + w.gamma * (bd.coa + bd.ca);
    assert!((bd.total - from_breakdown).abs() < 1e-12);
}

#[test]
fn bickd_everything_off_is_zero() {
    let s_logits = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let w = LossWeights {
        alpha: 0.0,
        enable_soa: false,
        enable_kl: false,
        enable_coa: false,
        enable_ca: false,
        ..LossWeights::default()
    };
    let (total, bd) = loss_bickd(&s_logits, &s_logits, &[0, 1], &w).unwrap();
    assert_eq!(total.item().unwrap(), 0.0);
    assert_eq!(bd.total, 0.0);
}

#[test]
fn vanilla_kd_lambda_one_is_ce() {
    let mut rng = ChaCha20Rng::seed_from_u64(43);
    let (b, c) = (3, 3);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2];
    let w = LossWeights {
        lambda: 1.0,
        ..LossWeights::default()
    };
    let (total, _) = loss_vanilla_kd(&s_logits, &t_logits, &labels, &w).unwrap();
    let ce = loss_ce(&s_logits, &labels).unwrap().item().unwrap();
    assert_eq!(total.item().unwrap(), ce);
}

#[test]
fn vanilla_kd_lambda_zero_identical_models_is_zero() {
    let logits = Tensor::matrix(2, 3, vec![0.5, 1.0, -1.0, 0.0, 0.2, 0.4]).unwrap();
    let w = LossWeights {
        lambda: 0.0,
        ..LossWeights::default()
    };
    let (total, _) = loss_vanilla_kd(&logits, &logits, &[0, 1], &w).unwrap();
    assert_eq!(total.item().unwrap(), 0.0);
}

#[test]
fn vanilla_kd_paper_lambda_and_tau_squared() {
    let mut rng = ChaCha20Rng::seed_from_u64(47);
    let (b, c) = (4, 5);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2, 4];
    let w = LossWeights::default();
    assert_eq!((w.lambda, w.tau_kl), (0.1, 4.0));
    let (total, _) = loss_vanilla_kd(&s_logits, &t_logits, &labels, &w).unwrap();
    let ce = loss_ce(&s_logits, &labels).unwrap().item().unwrap();
    let s = PredictionBatch::from_logits(&s_logits, &labels, 4.0).unwrap();
    let t = PredictionBatch::from_logits(&t_logits, &labels, 4.0).unwrap();
    let kl = loss_kl(&s, &t).unwrap().item().unwrap();
    let expected = 0.1 * ce + 0.9 * 16.0 * kl;
    assert!((total.item().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn vanilla_kd_rejects_lambda_outside_unit_interval() {
    let logits = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
    for lambda in [-0.1, 1.1] {
        let w = LossWeights {
            lambda,
            ..LossWeights::default()
        };
        assert!(loss_vanilla_kd(&logits, &logits, &[0], &w).is_err());
    }
}

// ── ablation method mapping ─────────────────────────────────────────────

#[test]
fn ablation_methods_compose_as_documented() {
    let mut rng = ChaCha20Rng::seed_from_u64(53);
    let (b, c) = (6, 4);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2, 3, 0, 1];
    let w = LossWeights::default();

    let ce = loss_ce(&s_logits, &labels).unwrap().item().unwrap();
    let s1 = PredictionBatch::from_logits(&s_logits, &labels, 1.0).unwrap();
    let t1 = PredictionBatch::from_logits(&t_logits, &labels, 1.0).unwrap();
    let soa = loss_soa(&s1, &t1, &build_pair_set(&labels))
        .unwrap()
        .item()
        .unwrap();
    let coa = loss_coa(&s1, &t1).unwrap().item().unwrap();
    let ca = loss_ca(&s1, &t1).unwrap().item().unwrap();
    let sk = PredictionBatch::from_logits(&s_logits, &labels, 4.0).unwrap();
    let tk = PredictionBatch::from_logits(&t_logits, &labels, 4.0).unwrap();
    let kl = loss_kl(&sk, &tk).unwrap().item().unwrap() * 16.0;
    let kd = 0.1 * ce + 0.9 * kl;

    let value = |m: Method| {
        method_loss(m, &s_logits, Some(&t_logits), &labels, &w)
            .unwrap()
            .0
            .item()
            .unwrap()
    };
    assert!((value(Method::ScOnly) - (ce + 2.0 * (soa + kl))).abs() < 1e-12);
    assert!((value(Method::CcOnly) - (ce + 2.0 * (coa + ca))).abs() < 1e-12);
    assert!((value(Method::OaS) - (kd + 2.0 * soa)).abs() < 1e-12);
    assert!((value(Method::OaC) - (kd + 2.0 * coa)).abs() < 1e-12);
    assert!((value(Method::Bickd) - (ce + 2.0 * (soa + kl) + 2.0 * (coa + ca))).abs() < 1e-12);
    assert_eq!(value(Method::CeOnly), ce);
}

#[test]
fn breakdown_serializes_to_flat_json() {
    let bd = bickd_core::losses::LossBreakdown {
        ce: 1.0,
        kl: 2.0,
        soa: -0.5,
        coa: -0.25,
        ca: 0.125,
        total: 3.375,
    };
    let json = serde_json::to_string(&bd).unwrap();
    assert_eq!(
        json,
        r#"{"ce":1.0,"kl":2.0,"soa":-0.5,"coa":-0.25,"ca":0.125,"total":3.375}"#
    );
}

#[test]
fn method_names_roundtrip() {
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
    }
    let err = "nope".parse::<Method>().unwrap_err();
    assert!(err.contains("bickd") && err.contains("vanilla_kd"));
}

// ── equivariance and teacher-constant properties ────────────────────────

fn all_loss_values(
    s_logits: &Tensor,
    t_logits: &Tensor,
    labels: &[usize],
    w: &LossWeights,
) -> Vec<f64> {
    Method::ALL
        .iter()
        .map(|&m| {
            method_loss(m, s_logits, Some(t_logits), labels, w)
                .unwrap()
                .0
                .item()
                .unwrap()
        })
        .collect()
}

#[test]
fn losses_invariant_under_joint_row_permutation() {
    let mut rng = ChaCha20Rng::seed_from_u64(59);
    let (b, c) = (5, 3);
    let w = LossWeights::default();
    for _ in 0..50 {
        let s_data = random_logits(&mut rng, b * c);
        let t_data = random_logits(&mut rng, b * c);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute_rows = |m: &[f64]| -> Vec<f64> {
            perm.iter()
                .flat_map(|&i| m[i * c..(i + 1) * c].to_vec())
                .collect()
        };
        let s = Tensor::matrix(b, c, s_data.clone()).unwrap();
        let t = Tensor::matrix(b, c, t_data.clone()).unwrap();
        let sp = Tensor::matrix(b, c, permute_rows(&s_data)).unwrap();
        let tp = Tensor::matrix(b, c, permute_rows(&t_data)).unwrap();
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let base = all_loss_values(&s, &t, &labels, &w);
        let permuted = all_loss_values(&sp, &tp, &lp, &w);
        for (a, p) in base.iter().zip(&permuted) {
            assert!((a - p).abs() < 1e-12, "{a} vs {p}");
        }
    }
}

#[test]
fn losses_invariant_under_joint_class_permutation() {
    let mut rng = ChaCha20Rng::seed_from_u64(61);
    let (b, c) = (5, 4);
    let w = LossWeights::default();
    for _ in 0..50 {
        let s_data = random_logits(&mut rng, b * c);
        let t_data = random_logits(&mut rng, b * c);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute_cols = |m: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; b * c];
            for i in 0..b {
                for j in 0..c {
                    out[i * c + perm[j]] = m[i * c + j];
                }
            }
            out
        };
        let s = Tensor::matrix(b, c, s_data.clone()).unwrap();
        let t = Tensor::matrix(b, c, t_data.clone()).unwrap();
        let sp = Tensor::matrix(b, c, permute_cols(&s_data)).unwrap();
        let tp = Tensor::matrix(b, c, permute_cols(&t_data)).unwrap();
        let lp: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let base = all_loss_values(&s, &t, &labels, &w);
        let permuted = all_loss_values(&sp, &tp, &lp, &w);
        for (a, p) in base.iter().zip(&permuted) {
            assert!((a - p).abs() < 1e-12, "{a} vs {p}");
        }
    }
}

#[test]
fn teacher_gradients_are_identically_zero() {
    let mut rng = ChaCha20Rng::seed_from_u64(67);
    let (b, c) = (4, 3);
    let labels = vec![0, 1, 2, 1];
    let w = LossWeights::default();
    for &m in Method::ALL.iter().filter(|m| m.needs_teacher()) {
        let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
        let t_logits = Tensor::param(vec![b, c], random_logits(&mut rng, b * c)).unwrap();
        let (loss, _) = method_loss(m, &s_logits, Some(&t_logits), &labels, &w).unwrap();
        loss.backward().unwrap();
        assert!(
            t_logits.grad().is_none(),
            "teacher received gradient under {m}"
        );
    }
}

#[test]
fn kl_and_ca_vanish_iff_distributions_match() {
    let mut rng = ChaCha20Rng::seed_from_u64(71);
    for _ in 0..100 {
        let b = rng.gen_range(1..=6);
        let c = rng.gen_range(2..=6);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let t_data = random_probs(&mut rng, b, c);
        let t = batch(&t_data, b, c, &labels);
        // forward direction: S == T gives exactly zero
        assert_eq!(loss_kl(&t, &t).unwrap().item().unwrap(), 0.0);
        assert_eq!(loss_ca(&t, &t).unwrap().item().unwrap(), 0.0);
        // converse: any distinct S is strictly positive
        let s_data = random_probs(&mut rng, b, c);
        if s_data
            .iter()
            .zip(&t_data)
            .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            let s = batch(&s_data, b, c, &labels);
            assert!(loss_kl(&s, &t).unwrap().item().unwrap() > 0.0);
            assert!(loss_ca(&s, &t).unwrap().item().unwrap() > 0.0);
        }
    }
}

#[test]
fn kl_orientation_flip_changes_reference_distribution() {
    let s = batch(&[0.5, 0.5], 1, 2, &[0]);
    let t = batch(&[0.25, 0.75], 1, 2, &[0]);
    let w = LossWeights {
        kl_teacher_ref: true,
        kl_tau_squared: false,
        enable_soa: false,
        tau_kl: 1.0,
        ..LossWeights::default()
    };
    // KL(T‖S) = 0.25·ln(0.5) + 0.75·ln(1.5)
    let expected = 0.25 * (0.25_f64 / 0.5).ln() + 0.75 * (0.75_f64 / 0.5).ln();
    let s_logits = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
    let t_logits = Tensor::matrix(1, 2, vec![(0.25_f64).ln(), (0.75_f64).ln()]).unwrap();
    let sc = loss_sc(&s_logits, &t_logits, &[0], &w)
        .unwrap()
        .item()
        .unwrap();
    assert!((sc - expected).abs() < 1e-12, "{sc} vs {expected}");
    drop((s, t));
}

#[test]
fn ca_batch_mean_knob_divides_by_batch() {
    let mut rng = ChaCha20Rng::seed_from_u64(73);
    let (b, c) = (4, 3);
    let s_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let t_logits = Tensor::matrix(b, c, random_logits(&mut rng, b * c)).unwrap();
    let labels = vec![0, 1, 2, 0];
    let base = LossWeights {
        enable_soa: false,
        enable_kl: false,
        enable_coa: false,
        alpha: 0.0,
        gamma: 1.0,
        ..LossWeights::default()
    };
    let scaled = LossWeights {
        ca_batch_mean: true,
        ..base.clone()
    };
    let (plain, _) = loss_bickd(&s_logits, &t_logits, &labels, &base).unwrap();
    let (mean, _) = loss_bickd(&s_logits, &t_logits, &labels, &scaled).unwrap();
    let ratio = plain.item().unwrap() / mean.item().unwrap();
    assert!((ratio - b as f64).abs() < 1e-9, "{ratio}");
}
