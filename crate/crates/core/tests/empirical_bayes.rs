use lmmprobe_core::eb::{self, GaussianKde, KdeMethod};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

fn null_stats(seed: u64, p: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn pure_null_statistics_are_calibrated() {
    let (reps, p) = (200, 1000);
    let (mut pi0_sum, mut frac_sum) = (0.0, 0.0);
    for seed in 0..reps {
        let t = null_stats(seed, p);
        let est = eb::inclusion_probabilities(&t, &vec![1.0; p], 0.1, KdeMethod::default()).unwrap();
        pi0_sum += est.pi0;
        frac_sum += est.probs.iter().filter(|&&q| q > 0.5).count() as f64 / p as f64;
    }
    let (pi0, frac) = (pi0_sum / reps as f64, frac_sum / reps as f64);
    assert!(pi0 >= 0.9, "mean pi0 {pi0}");
    assert!(frac <= 0.02, "mean fraction above 0.5: {frac}");
}

#[test]
fn pvalues_match_normal_tail() {
    let n = Normal::new(0.0, 1.0).unwrap();
    let t = [-3.1, -0.4, 0.0, 0.7, 1.96, 5.5];
    let s = eb::test_statistics(&t, &[1.0; 6]);
    for (tk, pk) in t.iter().zip(&s.pvalues) {
        let oracle = 2.0 * n.sf(tk.abs());
        assert!((pk - oracle).abs() <= 1e-12 + 1e-9 * oracle, "{tk}: {pk} vs {oracle}");
    }
}

#[test]
fn kde_integrates_to_one() {
    let t = null_stats(3, 1000);
    let kde = GaussianKde::new(&t).unwrap();
    let (lo, hi, n) = (-12.0, 12.0, 24_000);
    let dx = (hi - lo) / n as f64;
    let integral: f64 = (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * kde.density(lo + i as f64 * dx)
        })
        .sum::<f64>()
        * dx;
    assert!((integral - 1.0).abs() < 1e-3, "{integral}");
}

#[test]
fn binned_density_tracks_exact_density() {
    let mut t = null_stats(4, 900);
    t.extend((0..100).map(|i| 3.0 + i as f64 * 0.02));
    let exact = eb::kde(&t).unwrap();
    let binned = eb::kde_binned(&t, 1024).unwrap();
    for (a, b) in exact.evaluations.iter().zip(&binned.evaluations) {
        assert!((a - b).abs() <= 5e-3 * a.max(1e-3));
    }
}

#[test]
fn probabilities_grow_with_distance_from_zero_for_symmetric_statistics() {
    // Symmetric, unimodal and wider than the null: f̂/φ increases with |t|.
    let n = Normal::new(0.0, 2.0).unwrap();
    let half: Vec<f64> = (1..=200).map(|i| n.inverse_cdf(0.5 + 0.5 * i as f64 / 201.0)).collect();
    let t: Vec<f64> = half.iter().flat_map(|&x| [x, -x]).collect();
    let stats = eb::test_statistics(&t, &vec![1.0; t.len()]);
    let density = eb::kde(&stats.defined_t()).unwrap();
    let probs = eb::posterior_probs(&stats, 0.8, &density);
    let mut pairs: Vec<(f64, f64)> = t.iter().map(|x| x.abs()).zip(probs).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in pairs.windows(2) {
        assert!(w[1].1 >= w[0].1 - 1e-12, "{:?}", w);
    }
}

proptest! {
    #[test]
    fn storey_estimate_stays_in_range(pv in prop::collection::vec(0.0f64..=1.0, 1..200), lambda in 0.01f64..0.99) {
        let pi0 = eb::storey_pi0(&pv, lambda).unwrap();
        prop_assert!(pi0 >= 1.0 / pv.len() as f64 && pi0 <= 1.0);
    }

    #[test]
    fn probabilities_are_probabilities_and_order_free(t in prop::collection::vec(-8.0f64..8.0, 3..120), pi0 in 0.0f64..=1.0, shift in 0usize..50) {
        let stats = eb::test_statistics(&t, &vec![1.0; t.len()]);
        let density = eb::kde(&stats.defined_t()).unwrap();
        let probs = eb::posterior_probs(&stats, pi0, &density);
        prop_assert!(probs.iter().all(|&q| (0.0..=1.0).contains(&q)));
        let again: Vec<f64> = probs.iter().map(|q| q.clamp(0.0, 1.0)).collect();
        prop_assert_eq!(&again, &probs);

        let k = shift % t.len();
        let mut rotated = t.clone();
        rotated.rotate_left(k);
        let rs = eb::test_statistics(&rotated, &vec![1.0; t.len()]);
        let rd = eb::kde(&rs.defined_t()).unwrap();
        let rp = eb::posterior_probs(&rs, pi0, &rd);
        for (i, q) in rp.iter().enumerate() {
            prop_assert!((q - probs[(i + k) % t.len()]).abs() < 1e-12);
        }
    }

    #[test]
    fn bandwidth_is_positive(t in prop::collection::vec(-5.0f64..5.0, 1..60)) {
        prop_assert!(eb::silverman_bandwidth(&t) > 0.0);
    }
}
