//! The partitioned, parameter-expanded multi-cycle ECM loop.
//!
//! Each iteration runs four cycles:
//!
//! * **M1** solves, for every predictor `k`, a small least-squares problem in
//!   `[x_k | V | A | E(W_k) | E(V b)]` whose Gram matrix is filled with the
//!   current latent moments, and updates `G` and `σ²`. All partitions use the
//!   same moments from the previous iteration, so they are independent.
//! * **E1** blends the M1 coefficients into the running estimates, turns them
//!   into inclusion probabilities, and recomputes every latent moment.
//! * **M2** re-solves the intercept partition (`k = 0`) and `G`, `σ²`.
//! * **E2** refreshes the random-effect moments at the M2 parameters.
//!
//! The non-sparse block `H = [V | A]` is fixed, so its Gram matrix and the
//! products `x_k'x_k`, `x_k'Y`, `x_k'H` are computed once per fit. Everything
//! that depends on the latent moments reduces to a handful of global sums plus
//! two dot products per predictor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{ClusteredDataset, StandardizationRecord};
use crate::eb::{self, KdeMethod};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::math;
use crate::moments::{self, CrossMoments, PsiBlocks, RandomEffectMoments, WMoments};
use crate::{Error, Result};

/// Which side of the χ²₁ distribution the convergence quantile refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantileTail {
    /// Threshold is the value with upper-tail mass `convergence_quantile`
    /// (2.7055 for 0.1).
    #[default]
    Upper,
    /// Threshold is the lower `convergence_quantile` quantile (0.0158 for 0.1).
    Lower,
}

/// How the moments coupling `W₀` and the random effects are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossMomentRule {
    /// Integrate `b` over `W₀` as well, giving `Cov(W, Vb) = −αH_jj Var(W)`
    /// and `Var(Vb)` inflated by the propagated `W₀` uncertainty, in both
    /// E-steps. Every expected Gram matrix stays positive semi-definite.
    #[default]
    Joint,
    /// Conditional-on-`W₀` variance of `Vb`, `Cov = −H_jj Var(W)` in E1, and
    /// `H(Y⊙W − W²)` for `E(W Vb)` in E2. Can produce indefinite Gram
    /// matrices when `W₀` is far from its fixed point.
    Displayed,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LearningRate {
    /// `q = 1 / (t + 1)` with `t = 1` at the first iteration.
    #[default]
    InverseIteration,
    Constant(f64),
}

impl LearningRate {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LearningRate::InverseIteration => 1.0 / (t as f64 + 1.0),
            LearningRate::Constant(q) => q,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcmConfig {
    pub max_iterations: usize,
    pub convergence_quantile: f64,
    pub convergence_tail: QuantileTail,
    pub storey_lambda: f64,
    pub learning_rate: LearningRate,
    pub kde: KdeMethod,
    pub cross_moments: CrossMomentRule,
    /// Use the rayon pool for the per-predictor solves. Results do not depend
    /// on this flag.
    pub parallel: bool,
    /// Ignore both stopping rules and always run `max_iterations`.
    pub run_to_max: bool,
    pub seed: u64,
}

impl Default for EcmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            convergence_quantile: 0.1,
            convergence_tail: QuantileTail::Upper,
            storey_lambda: 0.1,
            learning_rate: LearningRate::InverseIteration,
            kde: KdeMethod::default(),
            cross_moments: CrossMomentRule::Joint,
            parallel: false,
            run_to_max: false,
            seed: 0,
        }
    }
}

impl EcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Ecm("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_quantile > 0.0 && self.convergence_quantile < 1.0) {
            return Err(Error::Ecm("convergence_quantile must lie in (0, 1)".into()));
        }
        if !(self.storey_lambda > 0.0 && self.storey_lambda < 1.0) {
            return Err(Error::Ecm("storey_lambda must lie in (0, 1)".into()));
        }
        if let LearningRate::Constant(q) = self.learning_rate {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Ecm("constant learning rate must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        match self.convergence_tail {
            QuantileTail::Upper => math::chi2_1_quantile(1.0 - self.convergence_quantile),
            QuantileTail::Lower => math::chi2_1_quantile(self.convergence_quantile),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcmState {
    pub beta: Vec<f64>,
    pub s2: Vec<f64>,
    pub probs: Vec<f64>,
    pub omega0: Vec<f64>,
    /// Coefficients of the adjustment columns `A`.
    pub omega_adjust: Vec<f64>,
    pub alpha0: f64,
    pub tau0: f64,
    pub sigma2: f64,
    pub g: Matrix,
    pub wm: WMoments,
    pub rem: RandomEffectMoments,
    pub cross: CrossMoments,
    pub t: usize,
    pub pi0: f64,
    pub cc_trace: Vec<f64>,
    /// Starts with the value at initialization, then one entry per iteration.
    pub loglik_trace: Vec<f64>,
}

/// `β = 0`, `p = 0`, `b = 0`, `σ² =` sample variance of `Y`, `G = I`.
pub fn init_state(dataset: &ClusteredDataset) -> Result<EcmState> {
    let y = dataset.y();
    let m = y.len();
    if m < 2 {
        return Err(Error::Ecm("need at least two observations".into()));
    }
    let mean = y.iter().sum::<f64>() / m as f64;
    let sigma2 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    if !(sigma2 > 0.0) {
        return Err(Error::Ecm("response has zero variance".into()));
    }
    let (p, r) = (dataset.p(), dataset.r());
    let mut state = EcmState {
        beta: vec![0.0; p],
        s2: vec![0.0; p],
        probs: vec![0.0; p],
        omega0: vec![0.0; r],
        omega_adjust: vec![0.0; dataset.a()],
        alpha0: 1.0,
        tau0: 1.0,
        sigma2,
        g: Matrix::identity(r),
        wm: WMoments::zeros(m),
        rem: RandomEffectMoments::zeros(dataset.n_clusters(), r),
        cross: CrossMoments::zeros(m),
        t: 0,
        pi0: 1.0,
        cc_trace: Vec::new(),
        loglik_trace: Vec::new(),
    };
    let ll = conditional_log_likelihood(dataset, &state)?;
    state.loglik_trace.push(ll);
    Ok(state)
}

/// `−(M/2) ln σ² − (1/(2σ²)) Σ (Y − X(α₀ p⊙β) − Vω₀ − Aω_A − Vb)²`.
pub fn conditional_log_likelihood(dataset: &ClusteredDataset, state: &EcmState) -> Result<f64> {
    if !(state.sigma2 > 0.0) {
        return Err(Error::Ecm(format!("sigma2 = {} is not positive", state.sigma2)));
    }
    let vb = moments::vb_means(dataset, &state.rem);
    let y = dataset.y();
    let mut rss = 0.0;
    for j in 0..y.len() {
        let e = y[j]
            - state.alpha0 * state.wm.w0[j]
            - dot(dataset.v_row(j), &state.omega0)
            - dot(dataset.adjust_row(j), &state.omega_adjust)
            - vb[j];
        rss += e * e;
    }
    let m = y.len() as f64;
    Ok(-0.5 * m * math::ln(state.sigma2) - rss / (2.0 * state.sigma2))
}

/// `CC = ln(M) · max_j (W_j − W_j^prev)² / Var(W_j^prev)`.
///
/// A zero previous variance contributes 0 when `W_j` did not move and `+∞`
/// otherwise.
pub fn convergence_check(w0: &[f64], prev_w0: &[f64], prev_var: &[f64], threshold: f64) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    for ((w, pw), v) in w0.iter().zip(prev_w0).zip(prev_var) {
        let d = w - pw;
        let c = if *v > 0.0 {
            d * d / v
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(c);
    }
    let cc = math::ln(w0.len() as f64) * worst;
    (cc, cc < threshold)
}

/// Identifies a partition: `Zero` is the intercept partition, `Predictor(k)`
/// the partition for the 0-based predictor `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Zero,
    Predictor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Direct,
    /// Solved after adding a ridge of `1e-8 · mean(diag)`.
    Regularized,
    /// Gram matrix singular even after the ridge; nothing was estimated.
    Excluded,
}

/// Solution of one partition. Coefficients are ordered
/// `(β_k, ω (r), ω_A (a), α, τ)`, or `(ω, ω_A, α, τ)` for the intercept
/// partition. Latent columns whose expected second moment is exactly zero are
/// dropped from the solve and reported with coefficient 1 and zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSolution {
    pub coef: Vec<f64>,
    pub covariance: Matrix,
    pub status: SolveStatus,
    pub gram_dim: usize,
}

/// Fixed-design products computed once per fit.
#[derive(Debug, Clone)]
struct Design {
    /// `H'H` for `H = [V | A]`.
    hth: Matrix,
    hty: Vec<f64>,
    xx: Vec<f64>,
    xty: Vec<f64>,
    /// `p × h` row-major `x_k'H`.
    xth: Vec<f64>,
}

impl Design {
    fn new(ds: &ClusteredDataset) -> Self {
        let h = ds.r() + ds.a();
        let m = ds.n_obs();
        let y = ds.y();
        let hrows: Vec<Vec<f64>> = (0..m).map(|j| h_row(ds, j)).collect();
        let mut hth = Matrix::zeros(h, h);
        let mut hty = vec![0.0; h];
        for (j, row) in hrows.iter().enumerate() {
            for s in 0..h {
                hty[s] += row[s] * y[j];
                for t in 0..h {
                    hth[(s, t)] += row[s] * row[t];
                }
            }
        }
        let mut xx = Vec::with_capacity(ds.p());
        let mut xty = Vec::with_capacity(ds.p());
        let mut xth = vec![0.0; ds.p() * h];
        for k in 0..ds.p() {
            let x = ds.x_col(k);
            xx.push(dot(x, x));
            xty.push(dot(x, y));
            let out = &mut xth[k * h..(k + 1) * h];
            for (j, row) in hrows.iter().enumerate() {
                for s in 0..h {
                    out[s] += x[j] * row[s];
                }
            }
        }
        Self { hth, hty, xx, xty, xth }
    }

    fn h(&self) -> usize {
        self.hty.len()
    }
}

fn h_row(ds: &ClusteredDataset, j: usize) -> Vec<f64> {
    let mut row = ds.v_row(j).to_vec();
    row.extend_from_slice(ds.adjust_row(j));
    row
}

/// Sums over observations of the current latent moments.
#[derive(Debug, Clone)]
struct LatentSums {
    h_w0: Vec<f64>,
    h_vb: Vec<f64>,
    w0_w0: f64,
    var_sum: f64,
    w0_y: f64,
    w0_vb: f64,
    wb_sum: f64,
    vb_vb: f64,
    vb2_sum: f64,
    vb_y: f64,
}

impl LatentSums {
    fn new(ds: &ClusteredDataset, state: &EcmState) -> Self {
        let h = ds.r() + ds.a();
        let (wm, cross) = (&state.wm, &state.cross);
        let y = ds.y();
        let mut s = Self {
            h_w0: vec![0.0; h],
            h_vb: vec![0.0; h],
            w0_w0: dot(&wm.w0, &wm.w0),
            var_sum: wm.var_w0.iter().sum(),
            w0_y: dot(&wm.w0, y),
            w0_vb: dot(&wm.w0, &cross.vb),
            wb_sum: cross.cross_wb.iter().sum(),
            vb_vb: dot(&cross.vb, &cross.vb),
            vb2_sum: cross.vb_second.iter().sum(),
            vb_y: dot(&cross.vb, y),
        };
        for j in 0..ds.n_obs() {
            let row = h_row(ds, j);
            for t in 0..h {
                s.h_w0[t] += row[t] * wm.w0[j];
                s.h_vb[t] += row[t] * cross.vb[j];
            }
        }
        s
    }
}

/// The blocks of one partition's normal equations. `fixed_*` cover the fixed
/// columns; the two latent columns are `W` and `Vb`.
struct Normal {
    fixed: Matrix,
    fixed_w: Vec<f64>,
    fixed_vb: Vec<f64>,
    fixed_rhs: Vec<f64>,
    ww_expected: f64,
    ww_plugin: f64,
    wvb_expected: f64,
    wvb_plugin: f64,
    vbvb_expected: f64,
    vbvb_plugin: f64,
    w_rhs: f64,
    vb_rhs: f64,
}

impl Normal {
    /// Solves `E ξ = rhs` with the expected Gram `E` and returns the sandwich
    /// covariance `σ² E⁻¹ P E⁻¹`, `P` being the Gram of first moments only.
    fn solve(&self, sigma2: f64, full_covariance: bool) -> PartitionSolution {
        let nf = self.fixed.rows();
        let keep_w = self.ww_expected != 0.0;
        let keep_vb = self.vbvb_expected != 0.0;
        let mut cols: Vec<usize> = (0..nf).collect();
        if keep_w {
            cols.push(nf);
        }
        if keep_vb {
            cols.push(nf + 1);
        }
        let d = cols.len();
        let full = nf + 2;
        let entry = |i: usize, j: usize, expected: bool| -> f64 {
            match (i.min(j), i.max(j)) {
                (a, b) if b < nf => self.fixed[(a, b)],
                (a, b) if a < nf && b == nf => self.fixed_w[a],
                (a, _) if a < nf => self.fixed_vb[a],
                (a, b) if a == nf && b == nf => {
                    if expected {
                        self.ww_expected
                    } else {
                        self.ww_plugin
                    }
                }
                (a, _) if a == nf => {
                    if expected {
                        self.wvb_expected
                    } else {
                        self.wvb_plugin
                    }
                }
                _ => {
                    if expected {
                        self.vbvb_expected
                    } else {
                        self.vbvb_plugin
                    }
                }
            }
        };
        let e = Matrix::from_fn(d, d, |i, j| entry(cols[i], cols[j], true));
        let p = Matrix::from_fn(d, d, |i, j| entry(cols[i], cols[j], false));
        let rhs: Vec<f64> = cols
            .iter()
            .map(|&c| match c {
                c if c < nf => self.fixed_rhs[c],
                c if c == nf => self.w_rhs,
                _ => self.vb_rhs,
            })
            .collect();

        let (chol, status) = match Cholesky::new(&e) {
            Some(c) => (Some(c), SolveStatus::Direct),
            None => {
                let mut ridge = e.clone();
                ridge.add_to_diagonal(1e-8 * e.mean_diagonal());
                match Cholesky::new(&ridge) {
                    Some(c) => (Some(c), SolveStatus::Regularized),
                    None => (None, SolveStatus::Excluded),
                }
            }
        };
        let Some(chol) = chol else {
            return PartitionSolution {
                coef: Vec::new(),
                covariance: Matrix::zeros(0, 0),
                status,
                gram_dim: d,
            };
        };
        let sol = chol.solve(&rhs);
        let mut coef = vec![1.0; full];
        for (i, &c) in cols.iter().enumerate() {
            coef[c] = sol[i];
        }
        let covariance = if full_covariance {
            let einv = chol.inverse();
            let mut cov = einv.matmul(&p).matmul(&einv);
            cov.scale(sigma2);
            cov.symmetrize();
            let mut out = Matrix::zeros(full, full);
            for (i, &ci) in cols.iter().enumerate() {
                for (j, &cj) in cols.iter().enumerate() {
                    out[(ci, cj)] = cov[(i, j)];
                }
            }
            out
        } else {
            // Only the leading entry is needed: u = E⁻¹e₀, σ² u'Pu.
            let mut e0 = vec![0.0; d];
            e0[0] = 1.0;
            let u = chol.solve(&e0);
            let pu = p.matvec(&u);
            Matrix::from_row_major(1, 1, vec![sigma2 * dot(&u, &pu)])
        };
        PartitionSolution { coef, covariance, status, gram_dim: d }
    }
}

fn normal_zero(design: &Design, sums: &LatentSums) -> Normal {
    Normal {
        fixed: design.hth.clone(),
        fixed_w: sums.h_w0.clone(),
        fixed_vb: sums.h_vb.clone(),
        fixed_rhs: design.hty.clone(),
        ww_expected: sums.w0_w0 + sums.var_sum,
        ww_plugin: sums.w0_w0,
        wvb_expected: sums.wb_sum,
        wvb_plugin: sums.w0_vb,
        vbvb_expected: sums.vb2_sum,
        vbvb_plugin: sums.vb_vb,
        w_rhs: sums.w0_y,
        vb_rhs: sums.vb_y,
    }
}

struct PredictorSums {
    x_w0: f64,
    x_vb: f64,
    /// `Σ_j max(Var(W₀)_j − x_j² d_k, 0)`.
    var_k: f64,
    /// Covariance removed together with predictor `k`:
    /// `Σ_j cov_scale_j (Var(W₀)_j − Var(W_k)_j)`.
    cov_removed: f64,
    floored: usize,
}

fn predictor_sums(ds: &ClusteredDataset, state: &EcmState, k: usize) -> PredictorSums {
    let x = ds.x_col(k);
    let (b, q) = (state.beta[k], state.probs[k]);
    let dk = b * b * q * (1.0 - q);
    let x_w0 = dot(x, &state.wm.w0);
    let x_vb = dot(x, &state.cross.vb);
    let mut floored = 0;
    let mut cov_removed = 0.0;
    let scale = &state.cross.cov_scale;
    let var_k = if dk == 0.0 {
        state.wm.var_w0.iter().sum()
    } else {
        let mut s = 0.0;
        for (j, (xj, vj)) in x.iter().zip(&state.wm.var_w0).enumerate() {
            let mut v = vj - xj * xj * dk;
            if v < 0.0 {
                floored += 1;
                v = 0.0;
            }
            s += v;
            if !scale.is_empty() {
                cov_removed += scale[j] * (vj - v);
            }
        }
        s
    };
    PredictorSums { x_w0, x_vb, var_k, cov_removed, floored }
}

fn normal_predictor(ds: &ClusteredDataset, design: &Design, sums: &LatentSums, state: &EcmState, k: usize) -> (Normal, usize) {
    let h = design.h();
    let ps = predictor_sums(ds, state, k);
    let c = state.beta[k] * state.probs[k];
    let xx = design.xx[k];
    let xh = &design.xth[k * h..(k + 1) * h];
    let mut fixed = Matrix::zeros(h + 1, h + 1);
    fixed[(0, 0)] = xx;
    for s in 0..h {
        fixed[(0, s + 1)] = xh[s];
        fixed[(s + 1, 0)] = xh[s];
        for t in 0..h {
            fixed[(s + 1, t + 1)] = design.hth[(s, t)];
        }
    }
    let mut fixed_w = vec![ps.x_w0 - c * xx];
    fixed_w.extend((0..h).map(|s| sums.h_w0[s] - c * xh[s]));
    let mut fixed_vb = vec![ps.x_vb];
    fixed_vb.extend_from_slice(&sums.h_vb);
    let mut fixed_rhs = vec![design.xty[k]];
    fixed_rhs.extend_from_slice(&design.hty);
    let mean_sq = sums.w0_w0 - 2.0 * c * ps.x_w0 + c * c * xx;
    let normal = Normal {
        fixed,
        fixed_w,
        fixed_vb,
        fixed_rhs,
        ww_expected: mean_sq + ps.var_k,
        ww_plugin: mean_sq,
        wvb_expected: sums.wb_sum - c * ps.x_vb + ps.cov_removed,
        wvb_plugin: sums.w0_vb - c * ps.x_vb,
        vbvb_expected: sums.vb2_sum,
        vbvb_plugin: sums.vb_vb,
        w_rhs: sums.w0_y - c * design.xty[k],
        vb_rhs: sums.vb_y,
    };
    (normal, ps.floored)
}

/// Solves one partition from scratch with the state's current moments,
/// returning the full sandwich covariance.
pub fn partition_solve(dataset: &ClusteredDataset, state: &EcmState, partition: Partition) -> Result<PartitionSolution> {
    let design = Design::new(dataset);
    let sums = LatentSums::new(dataset, state);
    let normal = match partition {
        Partition::Zero => normal_zero(&design, &sums),
        Partition::Predictor(k) if k < dataset.p() => normal_predictor(dataset, &design, &sums, state, k).0,
        Partition::Predictor(k) => return Err(Error::Ecm(format!("no predictor with index {k}"))),
    };
    Ok(normal.solve(state.sigma2, true))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SolveCounts {
    pub regularized: usize,
    pub excluded: usize,
    /// Observations where a partition variance was floored at zero.
    pub floored_variances: usize,
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    /// Every inclusion probability hit zero.
    AllNull,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub iteration: usize,
    pub cc: f64,
    pub loglik: f64,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: EcmState,
    /// `α₀ p⊙β` on the fitting (standardized) scale; excluded predictors are `+0`.
    pub beta_bar: Vec<f64>,
    pub selected: Vec<usize>,
    pub converged: bool,
    pub all_null: bool,
    pub stop: StopReason,
    pub iterations: usize,
    pub threshold: f64,
    pub standardization: Option<StandardizationRecord>,
    /// Largest matrix dimension the engine ever factored.
    pub largest_dense_dim: usize,
    pub counts: SolveCounts,
}

/// Coefficients on the scale of the raw predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalScale {
    pub beta: Vec<f64>,
    /// Amount to add to the intercept: `−Σ β̄_k m_k / s_k`.
    pub intercept_shift: f64,
}

impl FitResult {
    pub fn original_scale(&self) -> OriginalScale {
        match &self.standardization {
            None => OriginalScale { beta: self.beta_bar.clone(), intercept_shift: 0.0 },
            Some(rec) => {
                let beta: Vec<f64> = self.beta_bar.iter().zip(&rec.scales).map(|(b, s)| b / s).collect();
                let intercept_shift = -beta.iter().zip(&rec.means).map(|(b, m)| b * m).sum::<f64>();
                OriginalScale { beta, intercept_shift }
            }
        }
    }
}

/// Output of the M1 cycle kept for the E1 blend.
#[derive(Debug, Clone)]
struct M1Output {
    beta_hat: Vec<f64>,
    s2_hat: Vec<f64>,
    /// `σ²` and `G` after M1; E1 builds `Ψ` from these.
    psi: PsiBlocks,
}

/// A fit in progress. [`fit`] drives it to completion; the benchmark and tests
/// step through it one iteration or cycle at a time.
pub struct EcmRun<'a> {
    dataset: &'a ClusteredDataset,
    config: EcmConfig,
    design: Design,
    threshold: f64,
    state: EcmState,
    m1: Option<M1Output>,
    prev_w0: Vec<f64>,
    prev_var: Vec<f64>,
    stop: Option<StopReason>,
    largest_dense_dim: usize,
    counts: SolveCounts,
}

impl<'a> EcmRun<'a> {
    pub fn new(dataset: &'a ClusteredDataset, config: EcmConfig) -> Result<Self> {
        config.validate()?;
        if dataset.p() == 0 {
            return Err(Error::Ecm("dataset has no sparse predictors".into()));
        }
        for d in dataset.validate() {
            if d.is_fatal() {
                return Err(Error::Data(format!("{d}")));
            }
            log::warn!("{d}");
        }
        let state = init_state(dataset)?;
        let m = dataset.n_obs();
        Ok(Self {
            dataset,
            threshold: config.threshold(),
            config,
            design: Design::new(dataset),
            state,
            m1: None,
            prev_w0: vec![0.0; m],
            prev_var: vec![0.0; m],
            stop: None,
            largest_dense_dim: dataset.r(),
            counts: SolveCounts::default(),
        })
    }

    pub fn state(&self) -> &EcmState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut EcmState {
        &mut self.state
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn is_finished(&self) -> bool {
        self.stop.is_some()
    }

    pub fn largest_dense_dim(&self) -> usize {
        self.largest_dense_dim
    }

    pub fn counts(&self) -> &SolveCounts {
        &self.counts
    }

    fn note_dim(&mut self, d: usize) {
        self.largest_dense_dim = self.largest_dense_dim.max(d);
    }

    fn solve_zero(&mut self) -> Result<()> {
        let sums = LatentSums::new(self.dataset, &self.state);
        let sol = normal_zero(&self.design, &sums).solve(self.state.sigma2, false);
        self.note_dim(sol.gram_dim);
        match sol.status {
            SolveStatus::Excluded => {
                return Err(Error::Ecm("intercept partition has a singular Gram matrix".into()));
            }
            SolveStatus::Regularized => self.counts.regularized += 1,
            SolveStatus::Direct => {}
        }
        let (r, a) = (self.dataset.r(), self.dataset.a());
        self.state.omega0.copy_from_slice(&sol.coef[..r]);
        self.state.omega_adjust.copy_from_slice(&sol.coef[r..r + a]);
        self.state.alpha0 = sol.coef[r + a];
        self.state.tau0 = sol.coef[r + a + 1];
        Ok(())
    }

    /// `G = mean of E(b_i b_i')`; kept unchanged while every block is zero.
    fn update_g(&mut self) {
        let r = self.dataset.r();
        let n = self.dataset.n_clusters();
        if self.state.rem.b_sq.iter().all(|&v| v == 0.0) {
            return;
        }
        let mut g = Matrix::zeros(r, r);
        for i in 0..n {
            let blk = self.state.rem.b_sq_block(i);
            for s in 0..r {
                for t in 0..r {
                    g[(s, t)] += blk[(s, t)] / n as f64;
                }
            }
        }
        g.symmetrize();
        self.state.g = g;
    }

    /// `σ² = (1/M)[Σ_i tr(V_i'V_i σ²_prev Ψ_prev,i⁻¹) + ε'ε]` with `ε` the
    /// first-moment residual of the intercept partition.
    fn update_sigma2(&mut self, psi_prev: &PsiBlocks, sigma2_prev: f64) -> Result<()> {
        let ds = self.dataset;
        let st = &self.state;
        let mut trace = 0.0;
        for i in 0..ds.n_clusters() {
            let vtv = ds.vtv_block(i);
            let inv = &psi_prev.psi_inv[i];
            for s in 0..ds.r() {
                for t in 0..ds.r() {
                    trace += vtv[(s, t)] * inv[(t, s)];
                }
            }
        }
        trace *= sigma2_prev;
        let y = ds.y();
        let mut ee = 0.0;
        for j in 0..y.len() {
            let e = y[j]
                - dot(ds.v_row(j), &st.omega0)
                - dot(ds.adjust_row(j), &st.omega_adjust)
                - st.alpha0 * st.wm.w0[j]
                - st.tau0 * st.cross.vb[j];
            ee += e * e;
        }
        let sigma2 = (trace + ee) / y.len() as f64;
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Ecm(format!("variance update produced sigma2 = {sigma2}")));
        }
        self.state.sigma2 = sigma2;
        Ok(())
    }

    /// First M-step: every predictor partition, then the intercept partition,
    /// `G`, and `σ²`.
    pub fn m1(&mut self) -> Result<()> {
        let ds = self.dataset;
        let sums = LatentSums::new(ds, &self.state);
        let sigma2 = self.state.sigma2;
        let solve_k = |k: usize| {
            let (normal, floored) = normal_predictor(ds, &self.design, &sums, &self.state, k);
            (normal.solve(sigma2, false), floored)
        };
        let solutions: Vec<(PartitionSolution, usize)> = self.map_predictors(solve_k);

        let p = ds.p();
        let mut beta_hat = self.state.beta.clone();
        let mut s2_hat = self.state.s2.clone();
        for (k, (sol, floored)) in solutions.into_iter().enumerate() {
            self.counts.floored_variances += floored;
            self.note_dim(sol.gram_dim);
            match sol.status {
                SolveStatus::Excluded => {
                    self.counts.excluded += 1;
                    log::debug!("partition {k} excluded at iteration {}", self.state.t + 1);
                    continue;
                }
                SolveStatus::Regularized => self.counts.regularized += 1,
                SolveStatus::Direct => {}
            }
            beta_hat[k] = sol.coef[0];
            s2_hat[k] = sol.covariance[(0, 0)];
        }
        debug_assert_eq!(beta_hat.len(), p);

        let psi_prev = moments::psi_blocks(ds, self.state.sigma2, &self.state.g)?;
        let sigma2_prev = self.state.sigma2;
        self.solve_zero()?;
        self.update_g();
        self.update_sigma2(&psi_prev, sigma2_prev)?;
        let psi = moments::psi_blocks(ds, self.state.sigma2, &self.state.g)?;
        self.m1 = Some(M1Output { beta_hat, s2_hat, psi });
        Ok(())
    }

    fn map_predictors<T: Send>(&self, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        #[cfg(feature = "parallel")]
        if self.config.parallel {
            use rayon::prelude::*;
            return (0..self.dataset.p()).into_par_iter().map(f).collect();
        }
        (0..self.dataset.p()).map(f).collect()
    }

    fn refresh_w(&mut self) -> Result<()> {
        #[cfg(feature = "parallel")]
        if self.config.parallel {
            self.state.wm = moments::w_moments_par(self.dataset, &self.state.beta, &self.state.probs);
            return Ok(());
        }
        self.state.wm = moments::w_moments(self.dataset, &self.state.beta, &self.state.probs)?;
        Ok(())
    }

    /// `Y − Vω₀ − Aω_A − α₀E(W₀)`.
    fn b_residual(&self) -> Vec<f64> {
        let ds = self.dataset;
        let st = &self.state;
        let y = ds.y();
        (0..y.len())
            .map(|j| {
                y[j] - dot(ds.v_row(j), &st.omega0)
                    - dot(ds.adjust_row(j), &st.omega_adjust)
                    - st.alpha0 * st.wm.w0[j]
            })
            .collect()
    }

    /// First E-step: blend, empirical Bayes, and every latent moment.
    pub fn e1(&mut self) -> Result<()> {
        let m1 = self.m1.take().ok_or_else(|| Error::Ecm("E1 called before M1".into()))?;
        let t = self.state.t + 1;
        let q = self.config.learning_rate.at(t);
        let first = self.state.t == 0;
        for k in 0..self.dataset.p() {
            let st = &mut self.state;
            st.beta[k] = (1.0 - q) * st.beta[k] + q * m1.beta_hat[k];
            let (prev, new) = (st.s2[k], m1.s2_hat[k]);
            st.s2[k] = if first || !(prev > 0.0) {
                new
            } else if !(new > 0.0) {
                prev
            } else {
                1.0 / ((1.0 - q) / prev + q / new)
            };
        }
        let est = eb::inclusion_probabilities(&self.state.beta, &self.state.s2, self.config.storey_lambda, self.config.kde)?;
        self.state.probs = est.probs;
        self.state.pi0 = est.pi0;
        self.refresh_w()?;

        let ds = self.dataset;
        let resid = self.b_residual();
        let rem = moments::b_moments(ds, &m1.psi, &resid, self.state.sigma2)?;
        self.state.cross = match self.config.cross_moments {
            CrossMomentRule::Joint => self.joint_cross(&m1.psi, &rem),
            CrossMomentRule::Displayed => {
                let vb = moments::vb_means(ds, &rem);
                let cov = moments::cross_moments(ds, &m1.psi, &self.state.wm.var_w0);
                let cross_wb = (0..ds.n_obs()).map(|j| self.state.wm.w0[j] * vb[j] + cov[j]).collect();
                let vb_second = moments::vb_second_moments(ds, &m1.psi, &rem, self.state.sigma2);
                CrossMoments { cross_wb, vb, vb_second, cov_scale: Vec::new() }
            }
        };
        self.state.rem = rem;
        self.m1 = Some(m1);
        Ok(())
    }

    /// Second M-step: intercept partition, `G`, and `σ²` at the E1 moments.
    pub fn m2(&mut self) -> Result<()> {
        let m1 = self.m1.take().ok_or_else(|| Error::Ecm("M2 called before M1/E1".into()))?;
        let sigma2_prev = self.state.sigma2;
        self.solve_zero()?;
        self.update_g();
        self.update_sigma2(&m1.psi, sigma2_prev)?;
        Ok(())
    }

    /// Second E-step: random-effect moments at the M2 parameters; `W`
    /// moments are left as they were after E1.
    pub fn e2(&mut self) -> Result<()> {
        let ds = self.dataset;
        let psi = moments::psi_blocks(ds, self.state.sigma2, &self.state.g)?;
        let resid = self.b_residual();
        let rem = moments::b_moments(ds, &psi, &resid, self.state.sigma2)?;
        self.state.cross = match self.config.cross_moments {
            CrossMomentRule::Joint => self.joint_cross(&psi, &rem),
            CrossMomentRule::Displayed => {
                let cross_wb = moments::e2_cross_update(ds, &psi, ds.y(), &self.state.wm);
                let vb = moments::vb_means(ds, &rem);
                let vb_second = moments::vb_second_moments(ds, &psi, &rem, self.state.sigma2);
                CrossMoments { cross_wb, vb, vb_second, cov_scale: Vec::new() }
            }
        };
        self.state.rem = rem;
        Ok(())
    }

    fn joint_cross(&self, psi: &PsiBlocks, rem: &RandomEffectMoments) -> CrossMoments {
        let st = &self.state;
        moments::joint_cross_moments(self.dataset, psi, rem, &st.wm.var_w0, &st.wm.w0, st.sigma2, st.alpha0)
    }

    /// One full M1, E1, M2, E2 iteration followed by the convergence test.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if let Some(stop) = self.stop {
            return Err(Error::Ecm(format!("run already stopped ({stop:?})")));
        }
        self.m1()?;
        self.e1()?;
        self.m2()?;
        self.e2()?;
        self.state.t += 1;
        let (cc, converged) = convergence_check(&self.state.wm.w0, &self.prev_w0, &self.prev_var, self.threshold);
        self.prev_w0.clone_from(&self.state.wm.w0);
        self.prev_var.clone_from(&self.state.wm.var_w0);
        let loglik = conditional_log_likelihood(self.dataset, &self.state)?;
        self.state.cc_trace.push(cc);
        self.state.loglik_trace.push(loglik);

        let all_null = self.state.probs.iter().all(|&p| p == 0.0);
        if !self.config.run_to_max {
            if all_null {
                self.stop = Some(StopReason::AllNull);
            } else if converged {
                self.stop = Some(StopReason::Converged);
            }
        }
        if self.stop.is_none() && self.state.t >= self.config.max_iterations {
            self.stop = Some(StopReason::MaxIterations);
        }
        Ok(StepOutcome { iteration: self.state.t, cc, loglik, stop: self.stop })
    }

    pub fn finish(self) -> FitResult {
        let stop = self.stop.unwrap_or(StopReason::MaxIterations);
        let state = self.state;
        let beta_bar: Vec<f64> = state.beta.iter().zip(&state.probs).map(|(b, p)| state.alpha0 * p * b + 0.0).collect();
        let selected = state.probs.iter().enumerate().filter(|(_, &p)| p > 0.5).map(|(k, _)| k).collect();
        let converged = match stop {
            StopReason::Converged | StopReason::AllNull => true,
            StopReason::MaxIterations => state.cc_trace.last().is_some_and(|&cc| cc < self.threshold),
        };
        FitResult {
            beta_bar,
            selected,
            converged,
            all_null: stop == StopReason::AllNull,
            stop,
            iterations: state.t,
            threshold: self.threshold,
            standardization: self.dataset.standardization().cloned(),
            largest_dense_dim: self.largest_dense_dim,
            counts: self.counts,
            state,
        }
    }
}

/// Runs the ECM loop until convergence, all-null termination, or
/// `max_iterations`.
pub fn fit(dataset: &ClusteredDataset, config: &EcmConfig) -> Result<FitResult> {
    let mut run = EcmRun::new(dataset, config.clone())?;
    while !run.is_finished() {
        run.step()?;
    }
    let result = run.finish();
    if !result.converged {
        log::warn!("no convergence after {} iterations", result.iterations);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cluster;

    #[test]
    fn convergence_rules() {
        assert_eq!(convergence_check(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], 2.7), (0.0, true));
        let (cc, _) = convergence_check(&[1.0 + 0.1f64.sqrt()], &[1.0], &[1.0], 2.7);
        assert_eq!(cc, 0.0, "ln(1) = 0 for a single observation");
        let (cc, conv) = convergence_check(&[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], 2.7);
        assert!(cc.is_infinite() && !conv);
        let (cc, conv) = convergence_check(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], 2.7);
        assert_eq!((cc, conv), (0.0, true));
    }

    #[test]
    fn thresholds() {
        let c = EcmConfig::default();
        assert!((c.threshold() - 2.705_543_454_095_404).abs() < 1e-9);
        let lower = EcmConfig { convergence_tail: QuantileTail::Lower, ..c };
        assert!((lower.threshold() - 0.015_790_774_093_431_2).abs() < 1e-9);
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(LearningRate::InverseIteration.at(1), 0.5);
        assert_eq!(LearningRate::InverseIteration.at(3), 0.25);
        assert_eq!(LearningRate::Constant(0.3).at(9), 0.3);
    }

    #[test]
    fn loglik_plug_in() {
        let ds = ClusteredDataset::from_clusters(
            vec![Cluster::intercept_only("a", vec![2f64.sqrt(), -(2f64.sqrt()), 2f64.sqrt(), -(2f64.sqrt())], vec![0.5, 0.1, 0.2, 0.3])],
            1,
        )
        .unwrap();
        let mut st = init_state(&ds).unwrap();
        st.sigma2 = 2.0;
        let m = 4.0;
        let want = -(m / 2.0) * 2f64.ln() - m / 2.0;
        assert!((conditional_log_likelihood(&ds, &st).unwrap() - want).abs() < 1e-12);
    }
}
