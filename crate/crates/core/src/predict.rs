//! Predictions for new observations.
//!
//! Fixed-effect predictions are `Vω̃₀ + Aω̃_A + α̃₀X(β̃⊙p̃)`. When a cluster
//! also has rows with observed responses (a validation subset), its random
//! effect is predicted from those rows and `τ̃₀Vb̃` is added; otherwise the
//! random effect is its prior mean, zero.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::ClusteredDataset;
use crate::ecm::FitResult;
use crate::linalg::{dot, Cholesky, Matrix};
use crate::moments;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct PredictionRequest<'a> {
    /// Rows to predict, on the raw predictor scale or already standardized
    /// with the fit's own record.
    pub target: &'a ClusteredDataset,
    /// Rows with known responses used to predict random effects, matched to
    /// target clusters by id.
    pub validation: Option<&'a ClusteredDataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub y_hat_full: Vec<f64>,
    pub y_hat_fixed: Vec<f64>,
    /// Predicted random effect for each target cluster, in target order.
    pub b_hat: Vec<(String, Vec<f64>)>,
}

fn check_shape(fit: &FitResult, ds: &ClusteredDataset, what: &str) -> Result<()> {
    let st = &fit.state;
    if ds.p() != st.beta.len() || ds.r() != st.omega0.len() || ds.a() != st.omega_adjust.len() {
        return Err(Error::Prediction(format!(
            "{what} has (p, r, a) = ({}, {}, {}) but the fit has ({}, {}, {})",
            ds.p(),
            ds.r(),
            ds.a(),
            st.beta.len(),
            st.omega0.len(),
            st.omega_adjust.len()
        )));
    }
    match (ds.standardization(), &fit.standardization) {
        (None, _) => Ok(()),
        (Some(a), Some(b)) if a == b => Ok(()),
        _ => Err(Error::Prediction(format!("{what} was standardized differently from the training data"))),
    }
}

/// Value of predictor `k` at `row` on the fitting scale.
fn fit_scale_x(fit: &FitResult, ds: &ClusteredDataset, row: usize, k: usize) -> f64 {
    let raw = ds.x_at(row, k);
    match (ds.standardization(), &fit.standardization) {
        (None, Some(rec)) => rec.apply(k, raw),
        _ => raw,
    }
}

/// `X(β̃⊙p̃)` per row.
fn signal(fit: &FitResult, ds: &ClusteredDataset) -> Vec<f64> {
    let st = &fit.state;
    let coef: Vec<(usize, f64)> = st
        .beta
        .iter()
        .zip(&st.probs)
        .enumerate()
        .filter(|(_, (_, &p))| p > 0.0)
        .map(|(k, (b, p))| (k, b * p))
        .collect();
    (0..ds.n_obs()).map(|row| coef.iter().map(|&(k, c)| c * fit_scale_x(fit, ds, row, k)).sum()).collect()
}

fn fixed_part(fit: &FitResult, ds: &ClusteredDataset, w: &[f64]) -> Vec<f64> {
    let st = &fit.state;
    (0..ds.n_obs())
        .map(|row| dot(ds.v_row(row), &st.omega0) + dot(ds.adjust_row(row), &st.omega_adjust) + st.alpha0 * w[row])
        .collect()
}

/// `b̃ = Ψ⁻¹V'(Y − Vω̃₀ − Aω̃_A − α̃₀W̃)` over one validation cluster, with
/// `Ψ = V'V + σ̃²G̃⁻¹`.
fn predict_b(fit: &FitResult, val: &ClusteredDataset, i: usize, fixed: &[f64], ginv: &Matrix) -> Result<Vec<f64>> {
    let r = val.r();
    let mut psi = val.vtv_block(i);
    for s in 0..r {
        for t in 0..r {
            psi[(s, t)] += fit.state.sigma2 * ginv[(s, t)];
        }
    }
    let mut rhs = vec![0.0; r];
    for row in val.cluster_range(i) {
        let e = val.y()[row] - fixed[row];
        for (o, v) in rhs.iter_mut().zip(val.v_row(row)) {
            *o += v * e;
        }
    }
    let chol = Cholesky::new(&psi)
        .ok_or_else(|| Error::Prediction(format!("Ψ for cluster {} is singular", val.cluster_id(i))))?;
    Ok(chol.solve(&rhs))
}

pub fn predict(fit: &FitResult, request: &PredictionRequest<'_>) -> Result<PredictionResult> {
    let target = request.target;
    check_shape(fit, target, "prediction data")?;
    let w = signal(fit, target);
    let y_hat_fixed = fixed_part(fit, target, &w);

    let r = target.r();
    let mut b_by_id: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    if let Some(val) = request.validation {
        check_shape(fit, val, "validation data")?;
        let ginv = moments::regularized_g_inverse(&fit.state.g)?;
        let val_fixed = fixed_part(fit, val, &signal(fit, val));
        for i in 0..val.n_clusters() {
            if val.cluster_len(i) == 0 {
                continue;
            }
            b_by_id.insert(val.cluster_id(i), predict_b(fit, val, i, &val_fixed, &ginv)?);
        }
    }

    let mut y_hat_full = y_hat_fixed.clone();
    let mut b_hat = Vec::with_capacity(target.n_clusters());
    for i in 0..target.n_clusters() {
        let id = target.cluster_id(i);
        let b = b_by_id.get(id).cloned().unwrap_or_else(|| vec![0.0; r]);
        for row in target.cluster_range(i) {
            y_hat_full[row] += fit.state.tau0 * dot(target.v_row(row), &b);
        }
        b_hat.push((String::from(id), b));
    }
    Ok(PredictionResult { y_hat_full, y_hat_fixed, b_hat })
}
