#![allow(dead_code)]

use lmmprobe_core::data::{Cluster, ClusteredDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Generated {
    pub dataset: ClusteredDataset,
    /// `N × r` random effects, cluster-major.
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gaussian predictors, `V = [1, time, ...]`, Gaussian adjustment columns and
/// `y = Xβ + Vb + Aω_A + ε` with a few nonzero `β`.
pub fn random_dataset(seed: u64, n_clusters: usize, n_i: usize, p: usize, r: usize, a: usize) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let beta: Vec<f64> = (0..p).map(|k| if k % 7 == 0 { 1.0 } else { 0.0 }).collect();
    let mut b = Vec::new();
    let mut clusters = Vec::new();
    for i in 0..n_clusters {
        let bi: Vec<f64> = (0..r).map(|_| normal()).collect();
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut v = Vec::new();
        let mut adj = Vec::new();
        for j in 0..n_i {
            let xrow: Vec<f64> = (0..p).map(|_| normal()).collect();
            let vrow: Vec<f64> = (0..r).map(|s| if s == 0 { 1.0 } else { (j + 1) as f64 * s as f64 + 0.1 * normal() }).collect();
            let arow: Vec<f64> = (0..a).map(|_| normal()).collect();
            let mut yy: f64 = xrow.iter().zip(&beta).map(|(a, b)| a * b).sum();
            yy += vrow.iter().zip(&bi).map(|(a, b)| a * b).sum::<f64>();
            yy += arow.iter().sum::<f64>() * 0.5 + 2.0 + normal();
            y.push(yy);
            x.extend(xrow);
            v.extend(vrow);
            adj.extend(arow);
        }
        b.extend(&bi);
        clusters.push(Cluster::new(format!("g{i}"), y, x, v).with_adjust(adj));
    }
    Generated { dataset: ClusteredDataset::from_clusters(clusters, p).unwrap(), b, beta }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Stacks the rows of `later` after those of `earlier`, cluster by cluster.
pub fn concat_clusters(earlier: &ClusteredDataset, later: &ClusteredDataset) -> ClusteredDataset {
    let clusters = earlier
        .to_clusters()
        .into_iter()
        .zip(later.to_clusters())
        .map(|(mut a, b)| {
            assert_eq!(a.id, b.id);
            a.y.extend(b.y);
            a.x.extend(b.x);
            a.v.extend(b.v);
            a.adjust.extend(b.adjust);
            a
        })
        .collect();
    ClusteredDataset::from_clusters_named(clusters, earlier.p(), earlier.column_names()).unwrap()
}
