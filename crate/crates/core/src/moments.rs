//! E-step moments.
//!
//! `W₀ = X(γ⊙β)` is the aggregated sparse signal; partition `k` uses `W_k`,
//! the same sum without predictor `k`. Because the `γ_k` are independent
//! Bernoulli(`p_k`) given `β`, both moments of every `W_k` follow from those of
//! `W₀` by subtraction, so nothing here is ever `p × p`.
//!
//! Random effects have Gaussian conditional posteriors with per-cluster
//! precision `σ⁻²Ψ_i`, `Ψ_i = V_i'V_i + σ²G⁻¹`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::ClusteredDataset;
use crate::linalg::{Cholesky, Matrix};
use crate::{Error, Result};

/// First and second moments of `W₀` per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct WMoments {
    pub w0: Vec<f64>,
    pub var_w0: Vec<f64>,
    pub w0_sq: Vec<f64>,
}

impl WMoments {
    pub fn zeros(m: usize) -> Self {
        Self { w0: vec![0.0; m], var_w0: vec![0.0; m], w0_sq: vec![0.0; m] }
    }
}

/// Posterior moments of the random effects, stored cluster-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectMoments {
    pub r: usize,
    /// `N × r` posterior means.
    pub b: Vec<f64>,
    /// `N` blocks of `r × r` posterior covariances `σ²Ψ_i⁻¹`.
    pub b_cov: Vec<f64>,
    /// `N` blocks of `r × r` second moments `b_cov + b b'`.
    pub b_sq: Vec<f64>,
}

impl RandomEffectMoments {
    pub fn zeros(n_clusters: usize, r: usize) -> Self {
        Self {
            r,
            b: vec![0.0; n_clusters * r],
            b_cov: vec![0.0; n_clusters * r * r],
            b_sq: vec![0.0; n_clusters * r * r],
        }
    }

    pub fn b_of(&self, i: usize) -> &[f64] {
        &self.b[i * self.r..(i + 1) * self.r]
    }

    pub fn b_sq_block(&self, i: usize) -> Matrix {
        let rr = self.r * self.r;
        Matrix::from_row_major(self.r, self.r, self.b_sq[i * rr..(i + 1) * rr].to_vec())
    }

    pub fn b_cov_block(&self, i: usize) -> Matrix {
        let rr = self.r * self.r;
        Matrix::from_row_major(self.r, self.r, self.b_cov[i * rr..(i + 1) * rr].to_vec())
    }
}

/// Per-observation moments involving `(V_i b_i)_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMoments {
    /// `E(W_{0,j} (V_i b_i)_j)`.
    pub cross_wb: Vec<f64>,
    /// `E((V_i b_i)_j)`.
    pub vb: Vec<f64>,
    /// `E((V_i b_i)_j²)`.
    pub vb_second: Vec<f64>,
    /// `α h_j` with `h_j = [V_iΨ_i⁻¹V_i']_jj`, so that
    /// `Cov(W_j, (V_i b_i)_j) = −cov_scale_j Var(W_j)`. Empty when the
    /// cross moment was not built from that covariance.
    pub cov_scale: Vec<f64>,
}

impl CrossMoments {
    pub fn zeros(m: usize) -> Self {
        Self { cross_wb: vec![0.0; m], vb: vec![0.0; m], vb_second: vec![0.0; m], cov_scale: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiBlocks {
    pub psi: Vec<Matrix>,
    pub psi_inv: Vec<Matrix>,
}

/// Partition moments `E(W_k)`, `Var(W_k)` and how many variance entries had
/// to be floored at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub floored: usize,
}

/// `E(W₀) = X(β⊙p)`, `Var(W₀) = X²(β²⊙p⊙(1−p))`, `E(W₀²) = Var + E²`.
pub fn w_moments(dataset: &ClusteredDataset, beta: &[f64], probs: &[f64]) -> Result<WMoments> {
    let p = dataset.p();
    if beta.len() != p || probs.len() != p {
        return Err(Error::Dimension(format!(
            "w_moments: beta/probs have {}/{} entries for p = {p}",
            beta.len(),
            probs.len()
        )));
    }
    if probs.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::Dimension("w_moments: probabilities outside [0, 1]".into()));
    }
    let m = dataset.n_obs();
    let mut wm = WMoments::zeros(m);
    accumulate_w(dataset, beta, probs, 0, &mut wm.w0, &mut wm.var_w0);
    finish_w(&mut wm);
    Ok(wm)
}

/// Chunked variant for the engine: rows are split into blocks and each block
/// accumulates predictors in the same order, so the result does not depend on
/// the number of workers.
#[cfg(feature = "parallel")]
pub(crate) fn w_moments_par(dataset: &ClusteredDataset, beta: &[f64], probs: &[f64]) -> WMoments {
    use rayon::prelude::*;
    const BLOCK: usize = 256;
    let m = dataset.n_obs();
    let mut wm = WMoments::zeros(m);
    wm.w0
        .par_chunks_mut(BLOCK)
        .zip(wm.var_w0.par_chunks_mut(BLOCK))
        .enumerate()
        .for_each(|(blk, (w, v))| accumulate_w(dataset, beta, probs, blk * BLOCK, w, v));
    finish_w(&mut wm);
    wm
}

fn accumulate_w(
    dataset: &ClusteredDataset,
    beta: &[f64],
    probs: &[f64],
    start: usize,
    w: &mut [f64],
    v: &mut [f64],
) {
    let len = w.len();
    for k in 0..dataset.p() {
        let pk = probs[k];
        if pk == 0.0 {
            continue;
        }
        let mean_coef = beta[k] * pk;
        let var_coef = beta[k] * beta[k] * pk * (1.0 - pk);
        let col = &dataset.x_col(k)[start..start + len];
        for ((wj, vj), &xj) in w.iter_mut().zip(v.iter_mut()).zip(col) {
            *wj += xj * mean_coef;
            *vj += xj * xj * var_coef;
        }
    }
}

fn finish_w(wm: &mut WMoments) {
    for ((sq, &w), &v) in wm.w0_sq.iter_mut().zip(&wm.w0).zip(&wm.var_w0) {
        *sq = v + w * w;
    }
}

/// Moments of `W_k` obtained by removing predictor `k` from those of `W₀`.
/// Variances are floored at exactly zero.
pub fn partition_w_moments(
    wm: &WMoments,
    x_k: &[f64],
    beta_k: f64,
    prob_k: f64,
) -> PartitionMoments {
    let mean_coef = beta_k * prob_k;
    let var_coef = beta_k * beta_k * prob_k * (1.0 - prob_k);
    let mut floored = 0;
    let mean = wm.w0.iter().zip(x_k).map(|(w, x)| w - x * mean_coef).collect();
    let var = wm
        .var_w0
        .iter()
        .zip(x_k)
        .map(|(v, x)| {
            let d = v - x * x * var_coef;
            if d < 0.0 {
                floored += 1;
                0.0
            } else {
                d
            }
        })
        .collect();
    PartitionMoments { mean, var, floored }
}

/// `G⁻¹`, or `(G + 1e-10 · tr(G)/r · I)⁻¹` when `G` itself does not factor.
/// Fails if that is still not positive definite.
pub fn regularized_g_inverse(g: &Matrix) -> Result<Matrix> {
    let r = g.rows();
    let mut reg = g.clone();
    reg.symmetrize();
    if let Some(c) = Cholesky::new(&reg) {
        return Ok(c.inverse());
    }
    reg.add_to_diagonal(1e-10 * g.trace() / r as f64);
    Cholesky::new(&reg)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("random-effect covariance G is singular".into()))
}

/// `Ψ_i = V_i'V_i + σ²G⁻¹` and its inverse for every cluster.
pub fn psi_blocks(dataset: &ClusteredDataset, sigma2: f64, g: &Matrix) -> Result<PsiBlocks> {
    if !(sigma2 > 0.0) {
        return Err(Error::Numerical(format!("psi_blocks: sigma2 = {sigma2} is not positive")));
    }
    if g.rows() != dataset.r() || g.cols() != dataset.r() {
        return Err(Error::Dimension("psi_blocks: G is not r × r".into()));
    }
    let mut ginv = regularized_g_inverse(g)?;
    ginv.scale(sigma2);
    let n = dataset.n_clusters();
    let mut psi = Vec::with_capacity(n);
    let mut psi_inv = Vec::with_capacity(n);
    for i in 0..n {
        let mut block = dataset.vtv_block(i);
        for s in 0..dataset.r() {
            for t in 0..dataset.r() {
                block[(s, t)] += ginv[(s, t)];
            }
        }
        block.symmetrize();
        let inv = Cholesky::new(&block)
            .ok_or_else(|| Error::Numerical(format!("Ψ block of cluster {} is singular", dataset.cluster_id(i))))?
            .inverse();
        psi.push(block);
        psi_inv.push(inv);
    }
    Ok(PsiBlocks { psi, psi_inv })
}

fn vt_residual(dataset: &ClusteredDataset, i: usize, resid: &[f64]) -> Vec<f64> {
    let r = dataset.r();
    let mut out = vec![0.0; r];
    for row in dataset.cluster_range(i) {
        for (o, v) in out.iter_mut().zip(dataset.v_row(row)) {
            *o += v * resid[row];
        }
    }
    out
}

/// `b_i = Ψ_i⁻¹V_i' e_i`, `Cov = σ²Ψ_i⁻¹`, `E(b b') = Cov + b b'` where `e` is
/// `Y − Vω₀ − Aω_A − α₀E(W₀)`.
pub fn b_moments(
    dataset: &ClusteredDataset,
    psi: &PsiBlocks,
    residual_base: &[f64],
    sigma2: f64,
) -> Result<RandomEffectMoments> {
    if residual_base.len() != dataset.n_obs() {
        return Err(Error::Dimension("b_moments: residual length differs from M".into()));
    }
    let r = dataset.r();
    let mut rem = RandomEffectMoments::zeros(dataset.n_clusters(), r);
    for i in 0..dataset.n_clusters() {
        let b = psi.psi_inv[i].matvec(&vt_residual(dataset, i, residual_base));
        let base = i * r * r;
        for s in 0..r {
            for t in 0..r {
                let cov = sigma2 * psi.psi_inv[i][(s, t)];
                rem.b_cov[base + s * r + t] = cov;
                rem.b_sq[base + s * r + t] = cov + b[s] * b[t];
            }
        }
        rem.b[i * r..(i + 1) * r].copy_from_slice(&b);
    }
    Ok(rem)
}

/// `[V_i A V_i']_{jj}` for each row of cluster `i`.
fn quad_diag(dataset: &ClusteredDataset, i: usize, a: &Matrix, out: &mut [f64]) {
    let r = dataset.r();
    for row in dataset.cluster_range(i) {
        let v = dataset.v_row(row);
        let mut acc = 0.0;
        for s in 0..r {
            for t in 0..r {
                acc += v[s] * a[(s, t)] * v[t];
            }
        }
        out[row] = acc;
    }
}

/// Diagonal of `Cov(W_{i0}, V_i'b_i) = −V_iΨ_i⁻¹V_i' Var(W_{i0})`.
pub fn cross_moments(dataset: &ClusteredDataset, psi: &PsiBlocks, var_w0: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dataset.n_obs()];
    for i in 0..dataset.n_clusters() {
        quad_diag(dataset, i, &psi.psi_inv[i], &mut out);
    }
    for (o, v) in out.iter_mut().zip(var_w0) {
        *o = -*o * v;
    }
    out
}

/// `E(W_{i0} V_i'b_i) = V_iΨ_i⁻¹V_i'(Y_i⊙W_{i0} − W²_{i0})`, the refresh used
/// after the second M-step.
pub fn e2_cross_update(dataset: &ClusteredDataset, psi: &PsiBlocks, y: &[f64], wm: &WMoments) -> Vec<f64> {
    let m = dataset.n_obs();
    let u: Vec<f64> = (0..m).map(|j| y[j] * wm.w0[j] - wm.w0_sq[j]).collect();
    let mut out = vec![0.0; m];
    for i in 0..dataset.n_clusters() {
        let coef = psi.psi_inv[i].matvec(&vt_residual(dataset, i, &u));
        for row in dataset.cluster_range(i) {
            out[row] = crate::linalg::dot(dataset.v_row(row), &coef);
        }
    }
    out
}

/// `[V_iΨ_i⁻¹V_i']_jj` for every observation.
pub fn leverage_diag(dataset: &ClusteredDataset, psi: &PsiBlocks) -> Vec<f64> {
    let mut out = vec![0.0; dataset.n_obs()];
    for i in 0..dataset.n_clusters() {
        quad_diag(dataset, i, &psi.psi_inv[i], &mut out);
    }
    out
}

/// Joint moments of `W₀` and `Vb` when `b` is integrated over `W₀` too.
///
/// Given `W₀`, `b_i` is Gaussian with mean `Ψ_i⁻¹V_i'(e_i − αW_{i0})` and
/// covariance `σ²Ψ_i⁻¹`. Treating the `W_{0,j}` as uncorrelated, with
/// `H_i = V_iΨ_i⁻¹V_i'`:
///
/// * `Cov(W_j, (Vb)_j) = −α H_jj Var(W_j)`
/// * `Var((Vb)_j) = σ² H_jj + α² Σ_l H_jl² Var(W_l)`
///
/// which keeps every per-observation 2 × 2 covariance positive semi-definite.
/// `rem` holds the conditional means evaluated at `E(W₀)`.
pub fn joint_cross_moments(
    dataset: &ClusteredDataset,
    psi: &PsiBlocks,
    rem: &RandomEffectMoments,
    var_w0: &[f64],
    w0: &[f64],
    sigma2: f64,
    alpha: f64,
) -> CrossMoments {
    let m = dataset.n_obs();
    let r = dataset.r();
    let vb = vb_means(dataset, rem);
    let mut lev = vec![0.0; m];
    let mut propagated = vec![0.0; m];
    for i in 0..dataset.n_clusters() {
        let range = dataset.cluster_range(i);
        let inv = &psi.psi_inv[i];
        for j in range.clone() {
            let vj = inv.matvec(dataset.v_row(j));
            let mut acc = 0.0;
            for l in range.clone() {
                let h: f64 = (0..r).map(|s| vj[s] * dataset.v_row(l)[s]).sum();
                if l == j {
                    lev[j] = h;
                }
                acc += h * h * var_w0[l];
            }
            propagated[j] = acc;
        }
    }
    let cov_scale: Vec<f64> = lev.iter().map(|h| alpha * h).collect();
    let cross_wb = (0..m).map(|j| w0[j] * vb[j] - cov_scale[j] * var_w0[j]).collect();
    let vb_second = (0..m).map(|j| sigma2 * lev[j] + alpha * alpha * propagated[j] + vb[j] * vb[j]).collect();
    CrossMoments { cross_wb, vb, vb_second, cov_scale }
}

/// `E((V_i b_i)_j)` per observation.
pub fn vb_means(dataset: &ClusteredDataset, rem: &RandomEffectMoments) -> Vec<f64> {
    let mut out = vec![0.0; dataset.n_obs()];
    for i in 0..dataset.n_clusters() {
        let b = rem.b_of(i);
        for row in dataset.cluster_range(i) {
            out[row] = crate::linalg::dot(dataset.v_row(row), b);
        }
    }
    out
}

/// `[V_i(σ²Ψ_i⁻¹)V_i']_{jj} + (V_i b_i)_j²`.
pub fn vb_second_moments(
    dataset: &ClusteredDataset,
    psi: &PsiBlocks,
    rem: &RandomEffectMoments,
    sigma2: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; dataset.n_obs()];
    for i in 0..dataset.n_clusters() {
        quad_diag(dataset, i, &psi.psi_inv[i], &mut out);
    }
    let means = vb_means(dataset, rem);
    for (o, mu) in out.iter_mut().zip(&means) {
        *o = sigma2 * *o + mu * mu;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cluster;

    fn one_cluster(y: Vec<f64>) -> ClusteredDataset {
        let n = y.len();
        ClusteredDataset::from_clusters(vec![Cluster::intercept_only("a", y, vec![1.0; n])], 1).unwrap()
    }

    #[test]
    fn w_moments_hand_case() {
        let d = ClusteredDataset::from_clusters(
            vec![Cluster::intercept_only("a", vec![0.0], vec![1.0, 2.0])],
            2,
        )
        .unwrap();
        let wm = w_moments(&d, &[1.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(wm.w0, vec![1.5]);
        assert_eq!(wm.var_w0, vec![1.25]);
        assert_eq!(wm.w0_sq, vec![1.25 + 2.25]);
    }

    #[test]
    fn w_moments_at_zero_and_one() {
        let d = ClusteredDataset::from_clusters(
            vec![Cluster::intercept_only("a", vec![0.0, 1.0], vec![1.0, 2.0, -1.0, 3.0])],
            2,
        )
        .unwrap();
        let zero = w_moments(&d, &[0.7, -2.0], &[0.0, 0.0]).unwrap();
        assert!(zero.w0.iter().chain(&zero.var_w0).all(|&z| z == 0.0));
        let one = w_moments(&d, &[0.7, -2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(one.w0, vec![0.7 - 4.0, -0.7 - 6.0]);
        assert!(one.var_w0.iter().all(|&z| z == 0.0));
        assert!(w_moments(&d, &[1.0], &[0.5]).is_err());
    }

    #[test]
    fn partition_edge_cases() {
        let wm = WMoments { w0: vec![1.0, 2.0], var_w0: vec![0.5, 0.25], w0_sq: vec![1.5, 4.25] };
        let same = partition_w_moments(&wm, &[3.0, 4.0], 2.0, 0.0);
        assert_eq!((same.mean, same.var), (wm.w0.clone(), wm.var_w0.clone()));

        let d = ClusteredDataset::from_clusters(
            vec![Cluster::intercept_only("a", vec![0.0, 1.0], vec![1.5, -0.5])],
            1,
        )
        .unwrap();
        let single = w_moments(&d, &[2.0], &[0.3]).unwrap();
        let pm = partition_w_moments(&single, d.x_col(0), 2.0, 0.3);
        assert!(pm.mean.iter().all(|z| z.abs() < 1e-15));
        assert!(pm.var.iter().all(|&z| z.abs() < 1e-15));
    }

    #[test]
    fn psi_scalar_and_limits() {
        let d = one_cluster(vec![0.0; 4]);
        let psi = psi_blocks(&d, 2.0, &Matrix::identity(1)).unwrap();
        assert!((psi.psi[0][(0, 0)] - 6.0).abs() < 1e-9);
        let big = psi_blocks(&d, 2.0, &Matrix::from_row_major(1, 1, vec![1e8])).unwrap();
        assert!((big.psi[0][(0, 0)] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn psi_two_by_two_hand_case() {
        // V'V = [[4, 6], [6, 14]] from times 0, 1, 2, 3.
        let y = vec![0.0; 4];
        let v = vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0];
        let d = ClusteredDataset::from_clusters(vec![Cluster::new("a", y, vec![0.0; 4], v)], 1).unwrap();
        let psi = psi_blocks(&d, 1.0, &Matrix::identity(2)).unwrap();
        let want = [5.0, 6.0, 6.0, 15.0];
        for (got, w) in psi.psi[0].as_slice().iter().zip(want) {
            assert!((got - w).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_g_is_fatal() {
        let d = one_cluster(vec![0.0; 2]);
        assert!(psi_blocks(&d, 1.0, &Matrix::zeros(1, 1)).is_err());
        assert!(psi_blocks(&d, 0.0, &Matrix::identity(1)).is_err());
    }

    #[test]
    fn b_moments_hand_cases() {
        let d = one_cluster(vec![0.0; 4]);
        let psi = psi_blocks(&d, 2.0, &Matrix::identity(1)).unwrap();
        let c = 1.7;
        let rem = b_moments(&d, &psi, &[c; 4], 2.0).unwrap();
        assert!((rem.b[0] - 4.0 * c / 6.0).abs() < 1e-9);
        let zero = b_moments(&d, &psi, &[0.0; 4], 2.0).unwrap();
        assert_eq!(zero.b[0], 0.0);
        assert!((zero.b_sq[0] - 2.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn cross_and_e2_hand_cases() {
        let d = one_cluster(vec![2.0, 2.0, 0.0, 0.0]);
        let psi = psi_blocks(&d, 2.0, &Matrix::identity(1)).unwrap();
        let cross = cross_moments(&d, &psi, &[1.25; 4]);
        for c in &cross {
            assert!((c + 1.25 / 6.0).abs() < 1e-9);
        }
        assert!(cross_moments(&d, &psi, &[0.0; 4]).iter().all(|&c| c == 0.0));

        // n_i = 2 with Ψ⁻¹ = 1/6 (σ² = 4, G = 1).
        let d2 = one_cluster(vec![2.0, 2.0]);
        let psi2 = psi_blocks(&d2, 4.0, &Matrix::identity(1)).unwrap();
        let wm = WMoments { w0: vec![1.0, 1.0], var_w0: vec![0.5, 0.5], w0_sq: vec![1.5, 1.5] };
        let e2 = e2_cross_update(&d2, &psi2, d2.y(), &wm);
        for e in e2 {
            assert!((e - 1.0 / 6.0).abs() < 1e-9);
        }
        let still = WMoments { w0: vec![2.0, 2.0], var_w0: vec![0.0; 2], w0_sq: vec![4.0, 4.0] };
        assert!(e2_cross_update(&d2, &psi2, d2.y(), &still).iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn vb_second_hand_case() {
        // n_i = 1, σ² = 1, G = 1/2: Ψ = 3, σ²Ψ⁻¹ = 1/3.
        let d = one_cluster(vec![0.0]);
        let psi = psi_blocks(&d, 1.0, &Matrix::from_row_major(1, 1, vec![0.5])).unwrap();
        let mut rem = RandomEffectMoments::zeros(1, 1);
        rem.b[0] = 2.0;
        let got = vb_second_moments(&d, &psi, &rem, 1.0);
        assert!((got[0] - (1.0 / 3.0 + 4.0)).abs() < 1e-9);
        rem.b[0] = 0.0;
        assert!((vb_second_moments(&d, &psi, &rem, 1.0)[0] - 1.0 / 3.0).abs() < 1e-9);
    }
}
