//! Per-iteration timing of the ECM engine as `p` and `M` grow.
//!
//! Data come from a plain iid generator (no spatial field), so any `p` works
//! and generation cost stays out of the way. Only `EcmRun::step` is timed.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use lmmprobe_core::data::{Cluster, ClusteredDataset};
use lmmprobe_core::ecm::EcmRun;
use lmmprobe_core::EcmConfig;

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub p_values: Vec<usize>,
    pub n_clusters: usize,
    pub obs_per_cluster: usize,
    pub iterations: usize,
    pub seed: u64,
    pub ecm: EcmConfig,
}

/// One timed iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTiming {
    pub p: usize,
    pub m: usize,
    pub iteration: usize,
    pub seconds: f64,
}

/// Summary of one `(p, M)` setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingTiming {
    pub p: usize,
    pub m: usize,
    pub median_seconds: f64,
    pub total_seconds: f64,
    pub largest_dense_dim: usize,
    /// Bound on any factored matrix: `r + a + 3`.
    pub dense_bound: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub iterations: Vec<IterationTiming>,
    /// Settings over `p` at the base `M`, in `p_values` order.
    pub by_p: Vec<SettingTiming>,
    /// The smallest `p` at twice the base number of clusters.
    pub doubled_m: SettingTiming,
    /// Slope and intercept of median time against `p`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Median time at `2M` over median time at `M`, both at the smallest `p`.
    pub m_doubling_ratio: f64,
    /// Median time at the second `p` over the first.
    pub p_doubling_ratio: f64,
}

impl ScalingReport {
    /// No factored matrix ever exceeded the partition bound.
    pub fn dense_bound_respected(&self) -> bool {
        self.by_p.iter().chain([&self.doubled_m]).all(|s| s.largest_dense_dim <= s.dense_bound && s.largest_dense_dim < s.p)
    }
}

/// Random-intercept data with iid standard-normal predictors and 10% signals
/// of size 0.75, `σ² = 10`, `G = 5`.
pub fn iid_dataset(p: usize, n_clusters: usize, obs_per_cluster: usize, seed: u64) -> ClusteredDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_signals = (p / 10).max(1);
    let mut beta = vec![0.0; p];
    for k in rand::seq::index::sample(&mut rng, p, n_signals) {
        beta[k] = 0.75;
    }
    let noise = Normal::new(0.0, 10f64.sqrt()).expect("valid sd");
    let re = Normal::new(0.0, 5f64.sqrt()).expect("valid sd");
    let clusters = (0..n_clusters)
        .map(|i| {
            let b: f64 = re.sample(&mut rng);
            let x: Vec<f64> = (0..obs_per_cluster * p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y = (0..obs_per_cluster)
                .map(|j| {
                    let row = &x[j * p..(j + 1) * p];
                    row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + b + noise.sample(&mut rng)
                })
                .collect();
            Cluster::intercept_only(format!("c{}", i + 1), y, x)
        })
        .collect();
    ClusteredDataset::from_clusters(clusters, p).expect("generated clusters are consistent")
}

/// Times `iterations` full ECM iterations on one dataset.
pub fn time_iterations(ds: &ClusteredDataset, ecm: &EcmConfig, iterations: usize) -> anyhow::Result<(Vec<f64>, usize)> {
    let config = EcmConfig { max_iterations: iterations, run_to_max: true, parallel: false, ..ecm.clone() };
    let mut run = EcmRun::new(ds, config)?;
    let mut times = Vec::with_capacity(iterations);
    while !run.is_finished() {
        let start = Instant::now();
        run.step()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok((times, run.largest_dense_dim()))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares line through `(x, y)`: `(slope, intercept, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

fn run_setting(plan: &BenchPlan, p: usize, n_clusters: usize, out: &mut Vec<IterationTiming>) -> anyhow::Result<SettingTiming> {
    let ds = iid_dataset(p, n_clusters, plan.obs_per_cluster, plan.seed);
    let (times, largest) = time_iterations(&ds, &plan.ecm, plan.iterations)?;
    let m = ds.n_obs();
    out.extend(times.iter().enumerate().map(|(i, &seconds)| IterationTiming { p, m, iteration: i + 1, seconds }));
    log::info!("bench: p = {p}, M = {m}: median {:.4} s per iteration", median(&times));
    Ok(SettingTiming {
        p,
        m,
        median_seconds: median(&times),
        total_seconds: times.iter().sum(),
        largest_dense_dim: largest,
        dense_bound: ds.r() + ds.a() + 3,
    })
}

pub fn scaling_run(plan: &BenchPlan) -> anyhow::Result<ScalingReport> {
    if plan.p_values.len() < 2 || plan.iterations == 0 {
        anyhow::bail!("bench: need at least two p values and one iteration");
    }
    let mut iterations = Vec::new();
    let by_p = plan
        .p_values
        .iter()
        .map(|&p| run_setting(plan, p, plan.n_clusters, &mut iterations))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let doubled_m = run_setting(plan, plan.p_values[0], 2 * plan.n_clusters, &mut iterations)?;
    let xs: Vec<f64> = by_p.iter().map(|s| s.p as f64).collect();
    let ys: Vec<f64> = by_p.iter().map(|s| s.median_seconds).collect();
    let (slope, intercept, r_squared) = linear_fit(&xs, &ys);
    Ok(ScalingReport {
        m_doubling_ratio: doubled_m.median_seconds / by_p[0].median_seconds,
        p_doubling_ratio: by_p[1].median_seconds / by_p[0].median_seconds,
        iterations,
        by_p,
        doubled_m,
        slope,
        intercept,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_unit_r2() {
        let (s, i, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
