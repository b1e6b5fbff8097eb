//! Two-group empirical Bayes for inclusion probabilities.
//!
//! Test statistics `T_k = β_k / S_k` are modeled as a mixture of a standard
//! normal null and an unknown alternative. With `π₀` from Storey's tail
//! estimator and the mixture density `f̂` from a Gaussian kernel density
//! estimate, `p_k = 1 − π₀ φ(T_k) / f̂(T_k)`.

use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

pub const DENSITY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TestStatistics {
    pub t: Vec<f64>,
    pub pvalues: Vec<f64>,
    /// `false` where `S_k = 0` (or not finite); those entries are ignored.
    pub defined: Vec<bool>,
}

impl TestStatistics {
    pub fn defined_t(&self) -> Vec<f64> {
        self.t.iter().zip(&self.defined).filter(|(_, &d)| d).map(|(&t, _)| t).collect()
    }

    pub fn defined_pvalues(&self) -> Vec<f64> {
        self.pvalues.iter().zip(&self.defined).filter(|(_, &d)| d).map(|(&p, _)| p).collect()
    }

    pub fn n_defined(&self) -> usize {
        self.defined.iter().filter(|&&d| d).count()
    }
}

pub fn test_statistics(beta: &[f64], s2: &[f64]) -> TestStatistics {
    let mut t = Vec::with_capacity(beta.len());
    let mut pvalues = Vec::with_capacity(beta.len());
    let mut defined = Vec::with_capacity(beta.len());
    for (&b, &s) in beta.iter().zip(s2) {
        let ok = s > 0.0 && s.is_finite() && b.is_finite();
        let tk = if ok { b / math::sqrt(s) } else { 0.0 };
        t.push(tk);
        pvalues.push(if ok { math::two_sided_pvalue(tk) } else { 1.0 });
        defined.push(ok);
    }
    TestStatistics { t, pvalues, defined }
}

/// `Σ I(P_k ≥ λ) / (p (1 − λ))`, clamped to `[1/p, 1]`.
pub fn storey_pi0(pvalues: &[f64], lambda: f64) -> Result<f64> {
    if pvalues.is_empty() {
        return Err(Error::EmpiricalBayes("storey_pi0 needs at least one p-value".into()));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::EmpiricalBayes("storey lambda must lie in (0, 1)".into()));
    }
    let p = pvalues.len() as f64;
    let above = pvalues.iter().filter(|&&q| q >= lambda).count() as f64;
    Ok((above / (p * (1.0 - lambda))).clamp(1.0 / p, 1.0))
}

/// Type-7 sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule `0.9 · min(sd, IQR/1.34) · n^(−1/5)`.
///
/// When the IQR vanishes but the standard deviation does not, the standard
/// deviation is used alone; when all values coincide the bandwidth is
/// `1e-3 · max(1, |T₁|)`.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = math::sqrt(var);
    if !(sd > 0.0) {
        return 1e-3 * math::abs(values[0]).max(1.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * libm::pow(n as f64, -0.2)
}

/// How the mixture density is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KdeMethod {
    /// Direct kernel sum, `O(p²)`.
    Exact,
    /// Linear binning onto a regular grid, discrete convolution, and linear
    /// interpolation back to the statistics; `O(p + bins · kernel width)`.
    Binned { bins: usize },
}

impl Default for KdeMethod {
    fn default() -> Self {
        KdeMethod::Binned { bins: 1024 }
    }
}

/// Gaussian kernel density estimate evaluated at the statistics it was built
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensityEstimate {
    pub bandwidth: f64,
    pub evaluations: Vec<f64>,
    pub floor: f64,
}

/// A Gaussian KDE that can be evaluated anywhere (used for diagnostics).
#[derive(Debug, Clone)]
pub struct GaussianKde {
    points: Vec<f64>,
    bandwidth: f64,
}

impl GaussianKde {
    pub fn new(points: &[f64]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::EmpiricalBayes("kernel density needs at least two statistics".into()));
        }
        Ok(Self { points: points.to_vec(), bandwidth: silverman_bandwidth(points) })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let s: f64 = self.points.iter().map(|t| math::normal_pdf((x - t) / h)).sum();
        s / (self.points.len() as f64 * h)
    }
}

/// Exact KDE `f̂(x) = (1/(n h)) Σ φ((x − T_k)/h)` at every `T_k`.
pub fn kde(t: &[f64]) -> Result<MixtureDensityEstimate> {
    let k = GaussianKde::new(t)?;
    let evaluations = t.iter().map(|&x| k.density(x).max(DENSITY_FLOOR)).collect();
    Ok(MixtureDensityEstimate { bandwidth: k.bandwidth, evaluations, floor: DENSITY_FLOOR })
}

pub fn kde_binned(t: &[f64], bins: usize) -> Result<MixtureDensityEstimate> {
    if t.len() < 2 {
        return Err(Error::EmpiricalBayes("kernel density needs at least two statistics".into()));
    }
    let bins = bins.max(16);
    let n = t.len() as f64;
    let h = silverman_bandwidth(t);
    let (min, max) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let lo = min - 4.0 * h;
    let hi = max + 4.0 * h;
    let delta = (hi - lo) / (bins - 1) as f64;

    let mut weights = alloc::vec![0.0; bins];
    for &x in t {
        let u = (x - lo) / delta;
        let i = (libm::floor(u) as usize).min(bins - 2);
        let frac = u - i as f64;
        weights[i] += 1.0 - frac;
        weights[i + 1] += frac;
    }

    let width = (libm::ceil(8.0 * h / delta) as usize).min(bins - 1);
    let kernel: Vec<f64> = (0..=width).map(|m| math::normal_pdf(m as f64 * delta / h) / (n * h)).collect();
    let mut grid = alloc::vec![0.0; bins];
    for (g, out) in grid.iter_mut().enumerate() {
        let from = g.saturating_sub(width);
        let to = (g + width).min(bins - 1);
        let mut acc = 0.0;
        for (b, w) in weights[from..=to].iter().enumerate() {
            let b = b + from;
            acc += w * kernel[b.abs_diff(g)];
        }
        *out = acc;
    }

    let evaluations = t
        .iter()
        .map(|&x| {
            let u = (x - lo) / delta;
            let i = (libm::floor(u) as usize).min(bins - 2);
            let frac = u - i as f64;
            ((1.0 - frac) * grid[i] + frac * grid[i + 1]).max(DENSITY_FLOOR)
        })
        .collect();
    Ok(MixtureDensityEstimate { bandwidth: h, evaluations, floor: DENSITY_FLOOR })
}

pub fn density_estimate(t: &[f64], method: KdeMethod) -> Result<MixtureDensityEstimate> {
    match method {
        KdeMethod::Exact => kde(t),
        KdeMethod::Binned { bins } => kde_binned(t, bins),
    }
}

/// `p_k = 1 − π₀ φ(T_k) / f̂(T_k)` clamped to `[0, 1]`; masked entries get 0.
/// `density.evaluations` follows the order of the defined statistics.
pub fn posterior_probs(stats: &TestStatistics, pi0: f64, density: &MixtureDensityEstimate) -> Vec<f64> {
    let mut evals = density.evaluations.iter();
    stats
        .t
        .iter()
        .zip(&stats.defined)
        .map(|(&t, &ok)| {
            if !ok {
                return 0.0;
            }
            let f = evals.next().copied().unwrap_or(density.floor).max(density.floor);
            (1.0 - pi0 * math::normal_pdf(t) / f).clamp(0.0, 1.0)
        })
        .collect()
}

/// Everything the E1 step needs from the empirical-Bayes stage.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionEstimate {
    pub probs: Vec<f64>,
    pub pi0: f64,
    pub bandwidth: f64,
    pub n_defined: usize,
}

/// Full pipeline from `(β, S²)` to inclusion probabilities. With fewer than
/// two defined statistics there is no mixture to estimate and every `p_k` is
/// zero.
pub fn inclusion_probabilities(beta: &[f64], s2: &[f64], lambda: f64, method: KdeMethod) -> Result<InclusionEstimate> {
    let stats = test_statistics(beta, s2);
    let n_defined = stats.n_defined();
    if n_defined < 2 {
        return Ok(InclusionEstimate { probs: alloc::vec![0.0; beta.len()], pi0: 1.0, bandwidth: 0.0, n_defined });
    }
    let pi0 = storey_pi0(&stats.defined_pvalues(), lambda)?;
    let density = density_estimate(&stats.defined_t(), method)?;
    let probs = posterior_probs(&stats, pi0, &density);
    Ok(InclusionEstimate { probs, pi0, bandwidth: density.bandwidth, n_defined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn statistics_and_masking() {
        let s = test_statistics(&[0.0, 1.959_964, 2.0], &[1.0, 1.0, 0.0]);
        assert_eq!((s.t[0], s.pvalues[0]), (0.0, 1.0));
        assert!((s.pvalues[1] - 0.05).abs() < 1e-5);
        assert!(!s.defined[2]);
        assert_eq!(s.n_defined(), 2);
    }

    #[test]
    fn storey_cases() {
        assert_eq!(storey_pi0(&[0.5; 20], 0.1).unwrap(), 1.0);
        let mixed = [0.01, 0.02, 0.03, 0.04, 0.05, 0.2, 0.4, 0.6, 0.8, 0.9];
        assert!((storey_pi0(&mixed, 0.1).unwrap() - 5.0 / 9.0).abs() < 1e-12);
        assert_eq!(storey_pi0(&[0.01; 8], 0.1).unwrap(), 1.0 / 8.0);
        assert!(storey_pi0(&[], 0.1).is_err());
    }

    #[test]
    fn two_point_kde_closed_form() {
        let k = GaussianKde::new(&[-1.0, 1.0]).unwrap();
        let h = k.bandwidth();
        assert!((k.density(0.0) - math::normal_pdf(1.0 / h) / h).abs() < 1e-14);
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<f64> = (0..300).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0 + 1.0).collect();
        let k = GaussianKde::new(&pts).unwrap();
        let (a, b, n) = (-20.0, 22.0, 8400);
        let step = (b - a) / n as f64;
        // Simpson's rule.
        let mut s = k.density(a) + k.density(b);
        for i in 1..n {
            s += k.density(a + i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * step / 3.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn standard_normal_sample_density_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        let k = GaussianKde::new(&pts).unwrap();
        let phi0 = math::normal_pdf(0.0);
        assert!((k.density(0.0) - phi0).abs() / phi0 < 0.15);
    }

    #[test]
    fn binned_tracks_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<f64> = (0..1500).map(|_| rng.sample(StandardNormal)).collect();
        pts.extend([6.0, 7.5, -5.0, 9.0]);
        let exact = kde(&pts).unwrap();
        let binned = kde_binned(&pts, 1024).unwrap();
        assert_eq!(exact.bandwidth, binned.bandwidth);
        for (e, b) in exact.evaluations.iter().zip(&binned.evaluations) {
            assert!((e - b).abs() / e < 2e-3, "{e} vs {b}");
        }
    }

    #[test]
    fn degenerate_bandwidth() {
        assert_eq!(silverman_bandwidth(&[0.0, 0.0, 0.0]), 1e-3);
        assert_eq!(silverman_bandwidth(&[-4.0, -4.0]), 4e-3);
        let e = kde(&[2.0, 2.0, 2.0]).unwrap();
        assert!(e.evaluations.iter().all(|f| f.is_finite() && *f > 0.0));
    }

    #[test]
    fn posterior_probability_limits() {
        let stats = test_statistics(&[0.3, -1.2, 2.0], &[1.0, 1.0, 1.0]);
        let exact_null = MixtureDensityEstimate {
            bandwidth: 1.0,
            evaluations: stats.t.iter().map(|&t| math::normal_pdf(t)).collect(),
            floor: DENSITY_FLOOR,
        };
        assert!(posterior_probs(&stats, 1.0, &exact_null).iter().all(|&p| p.abs() < 1e-15));
        assert!(posterior_probs(&stats, 0.0, &exact_null).iter().all(|&p| p == 1.0));
    }

    #[test]
    fn far_tail_statistic_is_included() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t: Vec<f64> = (0..900).map(|_| rng.sample(StandardNormal)).collect();
        t.extend((0..100).map(|_| 6.0 + rng.sample::<f64, _>(StandardNormal)));
        t.push(-6.0);
        let stats = test_statistics(&t, &vec![1.0; t.len()]);
        let density = kde(&stats.defined_t()).unwrap();
        let probs = posterior_probs(&stats, 0.9, &density);
        assert!(probs[900] > 0.99, "{}", probs[900]);
    }
}
