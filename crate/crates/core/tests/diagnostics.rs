use acros_core::diagnostics::{
    accuracy_ci, bootstrap_ci, bottleneck_report, collect_hidden_states, mcnemar_exact, PairedOutcomes, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED,
};
use acros_core::base_lm::{DecoderConfig, DecoderModel};
use acros_core::numerics::{RngState, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// `[n, d]` matrix of exact rank `r` (before centering) from Gaussian factors.
fn rank_r(n: usize, d: usize, r: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    let a: Vec<f64> = (0..n * r).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..r * d).map(|_| rng.normal()).collect();
    let mut h = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            h[i * d + j] = (0..r).map(|p| a[i * r + p] * b[p * d + j]).sum();
        }
    }
    Tensor::from_f64(vec![n, d], &h).unwrap()
}

#[test]
fn low_rank_matrices_have_their_rank() {
    for r in [1, 5, 10] {
        let rep = bottleneck_report(&rank_r(300, 32, r, r as u64), &[0.9, 0.99], &[4]).unwrap();
        assert_eq!(rep.rank(0.99), Some(r), "r = {r}");
        assert!(rep.cumvar.windows(2).all(|w| w[1] >= w[0]));
        assert!((rep.cumvar.last().unwrap() - 1.0).abs() < 1e-6);
        assert!((rep.cumvar[r - 1] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn singular_values_match_an_independent_svd() {
    let h = rank_r(60, 12, 12, 77);
    let rep = bottleneck_report(&h, &[0.5], &[]).unwrap();
    let (n, d) = (60, 12);
    let mut x = h.to_f64_vec();
    for c in 0..d {
        let m = (0..n).map(|r| x[r * d + c]).sum::<f64>() / n as f64;
        (0..n).for_each(|r| x[r * d + c] -= m);
    }
    let mut oracle: Vec<f64> = DMatrix::from_row_slice(n, d, &x).singular_values().iter().copied().collect();
    oracle.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in rep.singular_values.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9 * b.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn isotropic_data_spreads_variance_evenly() {
    let mut rng = RngState::new(5);
    let h = Tensor::<f64>::from_f64(vec![4000, 16], &(0..4000 * 16).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
    let rep = bottleneck_report(&h, &[], &[8]).unwrap();
    let half = rep.marks[0].1;
    assert!((half - 0.5).abs() < 0.05, "cumvar at d/2 = {half}");
}

#[test]
fn duplicated_rows_leave_the_spectrum_shape() {
    let h = rank_r(50, 10, 6, 3);
    let mut twice = h.to_f64_vec();
    twice.extend(h.to_f64_vec());
    let h2 = Tensor::<f64>::from_f64(vec![100, 10], &twice).unwrap();
    let a = bottleneck_report(&h, &[0.9, 0.99], &[2, 4]).unwrap();
    let b = bottleneck_report(&h2, &[0.9, 0.99], &[2, 4]).unwrap();
    for (x, y) in a.cumvar.iter().zip(&b.cumvar) {
        assert!((x - y).abs() < 1e-9);
    }
    assert_eq!(a.rank_at, b.rank_at);
}

#[test]
fn report_text_lists_every_rank() {
    let rep = bottleneck_report(&rank_r(40, 6, 3, 9), &[0.95], &[4]).unwrap();
    let text = rep.to_text();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 6);
    assert!(text.contains("# 0.95\t3"));
    assert!(bottleneck_report(&rank_r(40, 6, 3, 9), &[1.5], &[]).is_err());
}

#[test]
fn hidden_state_sampling_is_seeded() {
    let cfg = DecoderConfig { n_layers: 1, d_model: 8, n_heads: 2, vocab_size: 12, max_seq: 10, tie_head: true };
    let m = DecoderModel::<f64>::init(cfg, &mut RngState::new(1)).unwrap();
    let sents: Vec<Vec<usize>> = (0..6).map(|i| (0..7).map(|t| 2 + (i + t * 3) % 10).collect()).collect();
    let a = collect_hidden_states(&m, &sents, 20, &mut RngState::new(4)).unwrap();
    let b = collect_hidden_states(&m, &sents, 20, &mut RngState::new(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[20, 8]);
    assert!(collect_hidden_states(&m, &sents, 37, &mut RngState::new(4)).is_err());
}

#[test]
fn bootstrap_reproduces_and_brackets_the_mean() {
    let xs: Vec<f64> = (0..500).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let a = bootstrap_ci(&xs, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED).unwrap();
    let b = bootstrap_ci(&xs, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED).unwrap();
    assert_eq!(a, b);
    let mean = xs.iter().sum::<f64>() / 500.0;
    assert!(a.0 < mean && mean < a.1);
    // normal approximation of the sampling spread
    let se = (mean * (1.0 - mean) / 500.0).sqrt();
    assert!(((a.1 - a.0) / (2.0 * 1.96 * se) - 1.0).abs() < 0.1);
    let correct: Vec<bool> = xs.iter().map(|&x| x == 1.0).collect();
    let (acc, ci) = accuracy_ci(&correct, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED).unwrap();
    assert_eq!((acc, ci), (mean, a));
}

#[test]
fn mcnemar_reference_values() {
    let p = |b, c| mcnemar_exact(&PairedOutcomes { n00: 0, n01: c, n10: b, n11: 0 }).unwrap();
    assert!((p(10, 0) - 0.001953125).abs() < 1e-12);
    assert_eq!(p(4, 4), 1.0);
    // 2 * P(X <= 1), X ~ Bin(12, 1/2) = 2 * 13 / 4096
    assert!((p(11, 1) - 26.0 / 4096.0).abs() < 1e-15);
    // very large discordant counts stay finite
    let big = p(6000, 4000);
    assert!(big.is_finite() && big < 1e-20);
}

#[test]
fn paired_counts_from_vectors() {
    let a = [true, true, false, false, true];
    let b = [true, false, true, false, false];
    let o = PairedOutcomes::from_vectors(&a, &b).unwrap();
    assert_eq!(o, PairedOutcomes { n00: 1, n01: 1, n10: 2, n11: 1 });
    assert_eq!(o.total(), 5);
    assert!(PairedOutcomes::from_vectors(&a, &b[..3]).is_err());
}

/// Two-sided exact binomial p-value by direct summation of probabilities.
fn binom_two_sided(b: u64, c: u64) -> f64 {
    let n = b + c;
    let k = b.min(c);
    let mut choose = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            choose = choose * (n - i + 1) as f64 / i as f64;
        }
        tail += choose;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

proptest! {
    #[test]
    fn mcnemar_is_symmetric_and_matches_direct_sums(b in 0usize..60, c in 0usize..60, n00 in 0usize..5, n11 in 0usize..5) {
        prop_assume!(b + c > 0);
        let p = mcnemar_exact(&PairedOutcomes { n00, n01: c, n10: b, n11 }).unwrap();
        let q = mcnemar_exact(&PairedOutcomes { n00: n11, n01: b, n10: c, n11: n00 }).unwrap();
        prop_assert_eq!(p, q);
        prop_assert!((0.0..=1.0).contains(&p));
        let direct = binom_two_sided(b as u64, c as u64);
        prop_assert!((p - direct).abs() < 1e-12 * direct.max(1e-300) + 1e-15);
    }

    #[test]
    fn bootstrap_interval_contains_constant_shift(shift in -5.0f64..5.0) {
        let xs: Vec<f64> = (0..40).map(|i| (i % 5) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let (a0, a1) = bootstrap_ci(&xs, 300, 11).unwrap();
        let (b0, b1) = bootstrap_ci(&ys, 300, 11).unwrap();
        prop_assert!((b0 - a0 - shift).abs() < 1e-9 && (b1 - a1 - shift).abs() < 1e-9);
    }
}
