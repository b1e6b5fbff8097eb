//! Synthetic clustered data with spatially correlated predictors.
//!
//! Predictors live on a `side × side` grid. Their correlation follows a
//! squared-exponential kernel in grid distance, and the true signals are the
//! top `round(π p)` sites of one draw of the same Gaussian random field, so
//! they form spatial blobs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Cluster, ClusteredDataset, ColumnNames};
use crate::linalg::{Cholesky, Matrix};
use crate::math;
use crate::{Error, Result};

/// Samples a zero-mean, unit-variance field on a square grid with covariance
/// `exp(−d²/(2ℓ²))`. The kernel is separable, so the grid covariance is
/// `K ⊗ K` for the 1-D factor `K`, and a draw is `L Z L'` with `K = LL'`.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    side: usize,
    l: Matrix,
}

impl GrfSampler {
    pub fn new(side: usize, length_scale: f64) -> Result<Self> {
        if side < 2 {
            return Err(Error::Simulation("grid side must be at least 2".into()));
        }
        if !(length_scale > 0.0) {
            return Err(Error::Simulation("length scale must be positive".into()));
        }
        let mut k = Matrix::from_fn(side, side, |i, j| {
            let d = i as f64 - j as f64;
            math::exp(-d * d / (2.0 * length_scale * length_scale))
        });
        k.add_to_diagonal(1e-8);
        let chol = Cholesky::new_with_tolerance(&k, 0.0)
            .ok_or_else(|| Error::Simulation(format!("kernel factor for ℓ = {length_scale} is not positive definite")))?;
        // Rescale rows so that the jitter does not inflate the marginal variance.
        let mut l = chol.into_factor();
        for i in 0..side {
            let norm = math::sqrt((0..=i).map(|j| l[(i, j)] * l[(i, j)]).sum::<f64>());
            for j in 0..=i {
                l[(i, j)] /= norm;
            }
        }
        Ok(Self { side, l })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// One field, row-major over the grid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.side;
        let z: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        // t = L z (column transform), then field = t L'.
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..=i {
                let lik = self.l[(i, k)];
                let zr = &z[k * n..(k + 1) * n];
                let tr = &mut t[i * n..(i + 1) * n];
                for (a, b) in tr.iter_mut().zip(zr) {
                    *a += lik * b;
                }
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let tr = &t[i * n..(i + 1) * n];
            for j in 0..n {
                let lr = self.l.row(j);
                out[i * n + j] = tr[..=j].iter().zip(&lr[..=j]).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

/// Convenience wrapper: one field draw from a seed.
pub fn sample_grf(side: usize, length_scale: f64, seed: u64) -> Result<Vec<f64>> {
    let sampler = GrfSampler::new(side, length_scale)?;
    Ok(sampler.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictorDraw {
    /// Every observation gets its own field draw.
    #[default]
    PerObservation,
    /// All observations of a cluster share one draw.
    PerCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignRule {
    #[default]
    Positive,
    RandomSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// Number of predictors; must be a perfect square.
    pub p: usize,
    pub n_clusters: usize,
    pub obs_per_cluster: usize,
    pub r: usize,
    pub pi: f64,
    pub beta_value: f64,
    pub sigma2: f64,
    pub g: Matrix,
    pub grf_length_scale: f64,
    pub predictor_draw: PredictorDraw,
    pub signs: SignRule,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            p: 225,
            n_clusters: 50,
            obs_per_cluster: 6,
            r: 1,
            pi: 0.1,
            beta_value: 0.75,
            sigma2: 10.0,
            g: Matrix::from_row_major(1, 1, vec![5.0]),
            grf_length_scale: 3.0,
            predictor_draw: PredictorDraw::PerObservation,
            signs: SignRule::Positive,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn side(&self) -> Option<usize> {
        let s = math::sqrt(self.p as f64) as usize;
        (s * s == self.p).then_some(s).or_else(|| ((s + 1) * (s + 1) == self.p).then_some(s + 1))
    }

    pub fn n_signals(&self) -> usize {
        libm::round(self.pi * self.p as f64) as usize
    }

    pub fn validate(&self) -> Result<usize> {
        let side = self
            .side()
            .filter(|&s| s >= 2)
            .ok_or_else(|| Error::Simulation(format!("p = {} is not the square of an integer ≥ 2", self.p)))?;
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Simulation("pi must lie in (0, 1)".into()));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Simulation("sigma2 must be positive".into()));
        }
        if self.r == 0 || self.g.rows() != self.r || self.g.cols() != self.r {
            return Err(Error::Simulation(format!("G must be {0} × {0}", self.r)));
        }
        if self.n_clusters < 2 || self.obs_per_cluster < 2 {
            return Err(Error::Simulation("need at least two clusters with two observations each".into()));
        }
        if self.r > self.obs_per_cluster {
            return Err(Error::Simulation("r exceeds the observations per cluster".into()));
        }
        Ok(side)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub gamma: Vec<bool>,
    pub beta: Vec<f64>,
    /// `N × r` random effects, cluster-major.
    pub b: Vec<f64>,
    pub g: Matrix,
    pub sigma2: f64,
    pub omega: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    /// First `⌈n_i/2⌉` observations of every cluster.
    pub train: ClusteredDataset,
    /// The remaining observations.
    pub test: ClusteredDataset,
    pub truth: Truth,
    pub config: SimulationConfig,
}

fn lower_factor_psd(g: &Matrix) -> Result<Matrix> {
    let mut jitter = 0.0;
    for _ in 0..4 {
        let mut m = g.clone();
        m.symmetrize();
        m.add_to_diagonal(jitter);
        if let Some(c) = Cholesky::new_with_tolerance(&m, 0.0) {
            return Ok(c.into_factor());
        }
        jitter = if jitter == 0.0 { 1e-10 * g.mean_diagonal().max(1e-300) } else { jitter * 100.0 };
    }
    if g.as_slice().iter().all(|&v| v == 0.0) {
        return Ok(g.clone());
    }
    Err(Error::Simulation("G is not positive semi-definite".into()))
}

pub fn generate(config: &SimulationConfig) -> Result<SimulatedDataset> {
    let side = config.validate()?;
    let (p, n, ni, r) = (config.p, config.n_clusters, config.obs_per_cluster, config.r);
    let m = n * ni;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sampler = GrfSampler::new(side, config.grf_length_scale)?;

    let field = sampler.sample(&mut rng);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]));
    let mut gamma = vec![false; p];
    for &k in &order[..config.n_signals()] {
        gamma[k] = true;
    }

    // Column-major design, standardized over all observations.
    let mut x = vec![0.0; m * p];
    let mut shared = Vec::new();
    for row in 0..m {
        let draw = match config.predictor_draw {
            PredictorDraw::PerObservation => sampler.sample(&mut rng),
            PredictorDraw::PerCluster => {
                if row % ni == 0 {
                    shared = sampler.sample(&mut rng);
                }
                shared.clone()
            }
        };
        for k in 0..p {
            x[k * m + row] = draw[k];
        }
    }
    for k in 0..p {
        let col = &mut x[k * m..(k + 1) * m];
        let mean = col.iter().sum::<f64>() / m as f64;
        let sd = math::sqrt(col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }

    let beta: Vec<f64> = gamma
        .iter()
        .map(|&g| {
            if !g {
                return 0.0;
            }
            match config.signs {
                SignRule::Positive => config.beta_value,
                SignRule::RandomSign => {
                    if rng.random::<bool>() {
                        config.beta_value
                    } else {
                        -config.beta_value
                    }
                }
            }
        })
        .collect();
    let omega = vec![config.beta_value; r];

    let lg = lower_factor_psd(&config.g)?;
    let mut b = Vec::with_capacity(n * r);
    for _ in 0..n {
        let z: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
        b.extend(lg.matvec(&z));
    }
    let noise_sd = math::sqrt(config.sigma2);

    let n_train = ni.div_ceil(2);
    let mut train = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(n);
    for i in 0..n {
        let mut rows: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(ni);
        for j in 0..ni {
            let row = i * ni + j;
            let v: Vec<f64> = if r == 1 { vec![1.0] } else { vec![1.0, (j + 1) as f64] };
            let xrow: Vec<f64> = (0..p).map(|k| x[k * m + row]).collect();
            let signal: f64 = xrow.iter().zip(&beta).map(|(a, c)| a * c).sum();
            let fixed: f64 = v.iter().zip(&omega).map(|(a, c)| a * c).sum();
            let random: f64 = v.iter().zip(&b[i * r..(i + 1) * r]).map(|(a, c)| a * c).sum();
            let eps: f64 = noise_sd * rng.sample::<f64, _>(StandardNormal);
            rows.push((signal + fixed + random + eps, xrow, v));
        }
        let id = format!("c{}", i + 1);
        let build = |part: &[(f64, Vec<f64>, Vec<f64>)]| Cluster {
            id: id.clone(),
            y: part.iter().map(|t| t.0).collect(),
            x: part.iter().flat_map(|t| t.1.iter().copied()).collect(),
            v: part.iter().flat_map(|t| t.2.iter().copied()).collect(),
            adjust: Vec::new(),
        };
        train.push(build(&rows[..n_train]));
        test.push(build(&rows[n_train..]));
    }

    let names = ColumnNames {
        predictors: (1..=p).map(|k| format!("x{k}")).collect(),
        random: if r == 1 { vec![String::from("(intercept)")] } else { vec![String::from("(intercept)"), String::from("time")] },
        adjust: Vec::new(),
    };
    Ok(SimulatedDataset {
        train: ClusteredDataset::from_clusters_named(train, p, names.clone())?,
        test: ClusteredDataset::from_clusters_named(test, p, names)?,
        truth: Truth { gamma, beta, b, g: config.g.clone(), sigma2: config.sigma2, omega },
        config: config.clone(),
    })
}

/// The full simulation grid: `p ∈ {15², 25², 75²}`, `π ∈ {0.05, 0.1}`,
/// `β ∈ {0.5, 0.75}`, `r ∈ {1, 2}`, two noise levels and two random-effect
/// covariances per `(p, r)`.
pub fn setting_grid() -> Vec<SimulationConfig> {
    let mut out = Vec::with_capacity(96);
    let m = |rows: usize, v: &[f64]| Matrix::from_row_major(rows, rows, v.to_vec());
    for &(side, n_clusters, obs, sigmas) in &[(15usize, 50usize, 6usize, [10.0, 15.0]), (25, 100, 6, [10.0, 15.0]), (75, 250, 8, [100.0, 150.0])] {
        for &pi in &[0.05, 0.1] {
            for &beta_value in &[0.5, 0.75] {
                for r in [1usize, 2] {
                    let gs = match (side, r) {
                        (75, 1) => [m(1, &[50.0]), m(1, &[100.0])],
                        (_, 1) => [m(1, &[5.0]), m(1, &[10.0])],
                        (75, _) => [m(2, &[40.0, 0.0, 0.0, 25.0]), m(2, &[60.0, 10.0, 10.0, 35.0])],
                        _ => [m(2, &[4.0, 0.0, 0.0, 2.5]), m(2, &[6.0, 1.0, 1.0, 3.5])],
                    };
                    for &sigma2 in &sigmas {
                        for g in &gs {
                            out.push(SimulationConfig {
                                p: side * side,
                                n_clusters,
                                obs_per_cluster: obs,
                                r,
                                pi,
                                beta_value,
                                sigma2,
                                g: g.clone(),
                                ..SimulationConfig::default()
                            });
                        }
                    }
                }
            }
        }
    }
    out
}
