mod common;

use common::random_dataset;
use lmmprobe_core::linalg::Matrix;
use lmmprobe_core::moments;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn partition_moments_equal_direct_recomputation() {
    let g = random_dataset(5, 20, 4, 50, 1, 0);
    let ds = &g.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let beta: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
    let probs: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
    let wm = moments::w_moments(ds, &beta, &probs).unwrap();
    for (j, ((sq, v), w)) in wm.w0_sq.iter().zip(&wm.var_w0).zip(&wm.w0).enumerate() {
        assert_eq!(*sq, v + w * w, "row {j}");
    }
    for k in 0..50 {
        let part = moments::partition_w_moments(&wm, ds.x_col(k), beta[k], probs[k]);
        for row in 0..ds.n_obs() {
            let (mut mean, mut var) = (0.0, 0.0);
            for l in (0..50).filter(|&l| l != k) {
                let x = ds.x_at(row, l);
                mean += x * beta[l] * probs[l];
                var += x * x * beta[l] * beta[l] * probs[l] * (1.0 - probs[l]);
            }
            assert!((part.mean[row] - mean).abs() <= 1e-10 * mean.abs().max(1.0), "k {k} row {row}");
            assert!((part.var[row] - var).abs() <= 1e-10 * var.abs().max(1.0), "k {k} row {row}");
        }
    }
}

#[test]
fn psi_inverse_matches_inverse() {
    let g = random_dataset(8, 10, 3, 2, 2, 0);
    let gm = Matrix::from_row_major(2, 2, vec![2.0, 0.5, 0.5, 1.0]);
    let psi = moments::psi_blocks(&g.dataset, 1.5, &gm).unwrap();
    for (p, inv) in psi.psi.iter().zip(&psi.psi_inv) {
        let id = p.matmul(inv);
        for s in 0..2 {
            for t in 0..2 {
                assert!((id[(s, t)] - f64::from(u8::from(s == t))).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w_moment_invariants(seed in 0u64..1000, scale in 0.1f64..5.0) {
        let g = random_dataset(seed, 6, 3, 9, 1, 0);
        let ds = &g.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..9).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let probs: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..=1.0)).collect();
        let wm = moments::w_moments(ds, &beta, &probs).unwrap();
        for j in 0..ds.n_obs() {
            prop_assert!(wm.var_w0[j] >= 0.0);
            prop_assert_eq!(wm.w0_sq[j], wm.var_w0[j] + wm.w0[j] * wm.w0[j]);
        }
        for k in 0..9 {
            let part = moments::partition_w_moments(&wm, ds.x_col(k), beta[k], probs[k]);
            prop_assert!(part.var.iter().all(|&v| v >= 0.0));
            prop_assert!(part.floored <= ds.n_obs());
        }
    }

    #[test]
    fn random_effect_second_moments_dominate_means(seed in 0u64..1000, sigma2 in 0.1f64..20.0, g11 in 0.1f64..10.0) {
        let g = random_dataset(seed, 5, 4, 2, 2, 0);
        let ds = &g.dataset;
        let gm = Matrix::from_row_major(2, 2, vec![g11, 0.1, 0.1, 1.0]);
        let psi = moments::psi_blocks(ds, sigma2, &gm).unwrap();
        let rem = moments::b_moments(ds, &psi, ds.y(), sigma2).unwrap();
        for i in 0..ds.n_clusters() {
            let cov = rem.b_cov_block(i);
            prop_assert!(cov[(0, 0)] > 0.0 && cov[(1, 1)] > 0.0);
            prop_assert!(cov[(0, 0)] * cov[(1, 1)] >= cov[(0, 1)] * cov[(1, 0)] * (1.0 - 1e-12));
            let sq = rem.b_sq_block(i);
            let b = rem.b_of(i);
            prop_assert!(sq[(0, 0)] >= b[0] * b[0]);
        }
    }

    #[test]
    fn joint_cross_moments_are_valid_covariances(seed in 0u64..1000, alpha in -2.0f64..2.0, sigma2 in 0.1f64..20.0) {
        let g = random_dataset(seed, 5, 4, 6, 2, 0);
        let ds = &g.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let probs: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..=1.0)).collect();
        let wm = moments::w_moments(ds, &beta, &probs).unwrap();
        let gm = Matrix::from_row_major(2, 2, vec![3.0, 0.2, 0.2, 1.0]);
        let psi = moments::psi_blocks(ds, sigma2, &gm).unwrap();
        let rem = moments::b_moments(ds, &psi, ds.y(), sigma2).unwrap();
        let cm = moments::joint_cross_moments(ds, &psi, &rem, &wm.var_w0, &wm.w0, sigma2, alpha);
        for j in 0..ds.n_obs() {
            let cov = cm.cross_wb[j] - wm.w0[j] * cm.vb[j];
            let var_vb = cm.vb_second[j] - cm.vb[j] * cm.vb[j];
            prop_assert!(var_vb >= -1e-12 * cm.vb_second[j].abs().max(1.0));
            prop_assert!(cov * cov <= wm.var_w0[j] * var_vb * (1.0 + 1e-9) + 1e-12);
        }
    }
}
