//! Prediction and selection metrics, a random-effects-only baseline, and
//! cluster-grouped cross-validation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ClusteredDataset;
use crate::ecm::{self, EcmConfig, FitResult, SolveCounts, StopReason};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::moments;
use crate::predict::{predict, PredictionRequest};
use crate::simulate::Truth;
use crate::{Error, Result};

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Evaluation("metric of an empty vector".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Evaluation(format!("lengths differ: {} vs {}", y.len(), y_hat.len())));
    }
    Ok(())
}

pub fn mspe(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Median absolute error; the midpoint of the two central values for even
/// lengths.
pub fn mad(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mut e: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| libm::fabs(a - b)).collect();
    e.sort_by(f64::total_cmp);
    let n = e.len();
    Ok(if n % 2 == 1 { e[n / 2] } else { 0.5 * (e[n / 2 - 1] + e[n / 2]) })
}

/// Mean over observations of `(X(γβ) − Xβ̄)²`, with `β̄` taken on the raw
/// predictor scale of `dataset`.
pub fn mse_fixed(dataset: &ClusteredDataset, true_beta: &[f64], fit: &FitResult) -> Result<f64> {
    let est = fit.original_scale().beta;
    if true_beta.len() != dataset.p() || est.len() != dataset.p() {
        return Err(Error::Evaluation("coefficient length differs from p".into()));
    }
    let diff: Vec<(usize, f64)> =
        true_beta.iter().zip(&est).map(|(t, e)| t - e).enumerate().filter(|(_, d)| *d != 0.0).collect();
    let m = dataset.n_obs();
    let mut sum = 0.0;
    for row in 0..m {
        let e: f64 = diff.iter().map(|&(k, d)| dataset.x_at(row, k) * d).sum();
        sum += e * e;
    }
    Ok(sum / m as f64)
}

/// Mean squared entrywise error between `V_iĜV_i' + σ̂²I` and
/// `V_iGV_i' + σ²I` over all blocks.
pub fn mse_total_variance(dataset: &ClusteredDataset, g_hat: &Matrix, sigma2_hat: f64, g: &Matrix, sigma2: f64) -> f64 {
    let r = dataset.r();
    let mut dg = g_hat.clone();
    for s in 0..r {
        for t in 0..r {
            dg[(s, t)] -= g[(s, t)];
        }
    }
    let ds2 = sigma2_hat - sigma2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..dataset.n_clusters() {
        let range = dataset.cluster_range(i);
        for a in range.clone() {
            let va = dataset.v_row(a);
            let dva = dg.matvec(va);
            for b in range.clone() {
                let mut e = dot(&dva, dataset.v_row(b));
                if a == b {
                    e += ds2;
                }
                sum += e * e;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub mcc: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

/// Confusion-matrix metrics. A zero denominator gives 0 for that metric.
pub fn selection_metrics(selected: &[usize], gamma: &[bool]) -> SelectionMetrics {
    let mut chosen = vec![false; gamma.len()];
    for &k in selected {
        if k < chosen.len() {
            chosen[k] = true;
        }
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &g) in chosen.iter().zip(gamma) {
        match (s, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fneg as f64, tn as f64);
    let denom = (tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf);
    let mcc = if denom == 0.0 { 0.0 } else { (tpf * tnf - fpf * fnf) / libm::sqrt(denom) };
    SelectionMetrics {
        sensitivity: ratio(tp, fneg),
        specificity: ratio(tn, fp),
        mcc,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        true_negatives: tn,
    }
}

/// Fits the model without sparse predictors, `Y = Vω + Aω_A + Vb + ε`, by
/// EM. The result is shaped like a regular fit with all inclusion
/// probabilities zero, so [`predict`] applies to it unchanged.
pub fn fit_null_model(dataset: &ClusteredDataset, max_iterations: usize) -> Result<FitResult> {
    let mut state = ecm::init_state(dataset)?;
    let (r, a) = (dataset.r(), dataset.a());
    let h = r + a;
    let m = dataset.n_obs();
    let y = dataset.y();
    let h_row = |j: usize| {
        let mut row = dataset.v_row(j).to_vec();
        row.extend_from_slice(dataset.adjust_row(j));
        row
    };
    let mut hth = Matrix::zeros(h, h);
    for j in 0..m {
        let row = h_row(j);
        for s in 0..h {
            for t in 0..h {
                hth[(s, t)] += row[s] * row[t];
            }
        }
    }
    let hchol = Cholesky::new(&hth).ok_or_else(|| Error::Evaluation("non-sparse design is rank deficient".into()))?;
    let mut vb = vec![0.0; m];
    let mut iterations = 0;
    for it in 1..=max_iterations {
        iterations = it;
        let mut rhs = vec![0.0; h];
        for j in 0..m {
            let row = h_row(j);
            for s in 0..h {
                rhs[s] += row[s] * (y[j] - vb[j]);
            }
        }
        let coef = hchol.solve(&rhs);
        let fixed: Vec<f64> = (0..m).map(|j| dot(&h_row(j), &coef)).collect();
        let psi = moments::psi_blocks(dataset, state.sigma2, &state.g)?;
        let resid: Vec<f64> = (0..m).map(|j| y[j] - fixed[j]).collect();
        let rem = moments::b_moments(dataset, &psi, &resid, state.sigma2)?;
        vb = moments::vb_means(dataset, &rem);
        let mut g = Matrix::zeros(r, r);
        let n = dataset.n_clusters();
        for i in 0..n {
            let blk = rem.b_sq_block(i);
            for s in 0..r {
                for t in 0..r {
                    g[(s, t)] += blk[(s, t)] / n as f64;
                }
            }
        }
        g.symmetrize();
        let mut trace = 0.0;
        for i in 0..n {
            let vtv = dataset.vtv_block(i);
            for s in 0..r {
                for t in 0..r {
                    trace += vtv[(s, t)] * psi.psi_inv[i][(t, s)];
                }
            }
        }
        let rss: f64 = (0..m).map(|j| (resid[j] - vb[j]) * (resid[j] - vb[j])).sum();
        let sigma2 = (rss + state.sigma2 * trace) / m as f64;
        let change = libm::fabs(sigma2 - state.sigma2) / state.sigma2
            + (0..r * r).map(|e| libm::fabs(g.as_slice()[e] - state.g.as_slice()[e])).sum::<f64>()
                / (1.0 + state.g.trace());
        state.omega0.copy_from_slice(&coef[..r]);
        state.omega_adjust.copy_from_slice(&coef[r..]);
        state.sigma2 = sigma2.max(1e-12);
        state.g = g;
        state.rem = rem;
        if change < 1e-10 {
            break;
        }
    }
    state.t = iterations;
    Ok(FitResult {
        beta_bar: vec![0.0; dataset.p()],
        selected: Vec::new(),
        converged: true,
        all_null: true,
        stop: StopReason::AllNull,
        iterations,
        threshold: 0.0,
        standardization: dataset.standardization().cloned(),
        largest_dense_dim: h,
        counts: SolveCounts::default(),
        state,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub mspe: f64,
    pub mad: f64,
    pub mspe_fixed_only: f64,
    pub null_mspe: Option<f64>,
    pub mse_fixed: Option<f64>,
    pub mse_total_variance: Option<f64>,
    pub selection: Option<SelectionMetrics>,
    pub n_selected: usize,
    pub runtime_seconds: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// How each held-out cluster's rows are divided between random-effect
/// prediction (validation) and scoring (test).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitRule {
    /// Whole fold for both when `r = 1`, otherwise [`SplitRule::TimeSplit`].
    #[default]
    Auto,
    WholeFold,
    /// Last two rows (one when the cluster has fewer than four) are test
    /// rows; earlier rows are validation rows.
    TimeSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub split: SplitRule,
    /// Standardize each training fold before fitting.
    pub standardize: bool,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self { n_folds: 5, seed: 0, split: SplitRule::Auto, standardize: true }
    }
}

/// Fold index for every cluster: ids are shuffled with the seed and dealt
/// round-robin.
pub fn assign_folds(n_clusters: usize, n_folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_clusters).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n_clusters];
    for (pos, &c) in order.iter().enumerate() {
        fold[c] = pos % n_folds;
    }
    fold
}

/// `(validation rows, test rows)` of one held-out cluster of length `n`.
pub fn held_out_split(n: usize, r: usize, rule: SplitRule) -> (Range<usize>, Range<usize>) {
    let time_split = match rule {
        SplitRule::Auto => r >= 2,
        SplitRule::WholeFold => false,
        SplitRule::TimeSplit => true,
    };
    if !time_split {
        return (0..n, 0..n);
    }
    let n_test = if n >= 4 { 2 } else { 1 }.min(n);
    (0..n - n_test, n - n_test..n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub clusters: Vec<String>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub assignment: Vec<usize>,
    pub folds: Vec<FoldReport>,
    pub skipped: Vec<usize>,
}

/// Monotonic seconds, supplied by the caller so the core stays `no_std`.
pub type Clock<'a> = &'a (dyn Fn() -> f64 + Sync);

/// Fits and scores the model on held-out data. `validation` rows (with
/// responses) feed the random-effect prediction for matching clusters.
pub fn evaluate_holdout(
    train: &ClusteredDataset,
    validation: Option<&ClusteredDataset>,
    test: &ClusteredDataset,
    config: &EcmConfig,
    truth: Option<&Truth>,
    clock: Option<Clock<'_>>,
) -> Result<(FitResult, MetricsReport)> {
    let start = clock.map(|c| c());
    let fit = ecm::fit(train, config)?;
    let runtime_seconds = clock.zip(start).map(|(c, s)| c() - s);
    let req = PredictionRequest { target: test, validation };
    let pred = predict(&fit, &req)?;
    let null = fit_null_model(train, 500)?;
    let null_pred = predict(&null, &req)?;
    let y = test.y();
    let mut report = MetricsReport {
        mspe: mspe(y, &pred.y_hat_full)?,
        mad: mad(y, &pred.y_hat_full)?,
        mspe_fixed_only: mspe(y, &pred.y_hat_fixed)?,
        null_mspe: Some(mspe(y, &null_pred.y_hat_full)?),
        n_selected: fit.selected.len(),
        runtime_seconds,
        iterations: fit.iterations,
        converged: fit.converged,
        ..MetricsReport::default()
    };
    if let Some(t) = truth {
        report.mse_fixed = Some(mse_fixed(test, &t.beta, &fit)?);
        report.mse_total_variance = Some(mse_total_variance(test, &fit.state.g, fit.state.sigma2, &t.g, t.sigma2));
        report.selection = Some(selection_metrics(&fit.selected, &t.gamma));
    }
    Ok((fit, report))
}

/// The three datasets of one fold.
#[derive(Debug, Clone)]
pub struct CvFold {
    pub fold: usize,
    /// Held-out cluster ids.
    pub clusters: Vec<String>,
    /// Every other cluster, standardized when the plan asks for it.
    pub train: ClusteredDataset,
    /// Held-out rows used to predict random effects.
    pub validation: Option<ClusteredDataset>,
    pub test: ClusteredDataset,
}

/// Builds fold `fold` from a cluster-to-fold assignment. Returns `None` when
/// the fold would have no test observations.
pub fn cv_fold(dataset: &ClusteredDataset, plan: &CvPlan, assignment: &[usize], fold: usize) -> Result<Option<CvFold>> {
    let mut train_pieces = Vec::new();
    let mut val_pieces = Vec::new();
    let mut test_pieces = Vec::new();
    let mut clusters = Vec::new();
    for (i, &f) in assignment.iter().enumerate() {
        let n = dataset.cluster_len(i);
        if f == fold {
            let (val, test) = held_out_split(n, dataset.r(), plan.split);
            val_pieces.push((i, val));
            test_pieces.push((i, test));
            clusters.push(String::from(dataset.cluster_id(i)));
        } else {
            train_pieces.push((i, 0..n));
        }
    }
    if test_pieces.iter().all(|(_, r)| r.is_empty()) {
        log::warn!("fold {fold} has no test observations and is skipped");
        return Ok(None);
    }
    let mut train = dataset.select(&train_pieces)?;
    if plan.standardize {
        train = train.standardize()?;
    }
    let validation =
        if val_pieces.iter().any(|(_, r)| !r.is_empty()) { Some(dataset.select(&val_pieces)?) } else { None };
    let test = dataset.select(&test_pieces)?;
    Ok(Some(CvFold { fold, clusters, train, validation, test }))
}

/// Cluster-grouped K-fold cross-validation.
pub fn cv_run(
    dataset: &ClusteredDataset,
    plan: &CvPlan,
    config: &EcmConfig,
    truth: Option<&Truth>,
    clock: Option<Clock<'_>>,
) -> Result<CvReport> {
    if plan.n_folds < 2 {
        return Err(Error::Evaluation("need at least two folds".into()));
    }
    if dataset.n_clusters() < plan.n_folds {
        return Err(Error::Evaluation(format!(
            "{} clusters cannot fill {} folds",
            dataset.n_clusters(),
            plan.n_folds
        )));
    }
    let assignment = assign_folds(dataset.n_clusters(), plan.n_folds, plan.seed);
    let run_fold = |fold: usize| -> Result<core::result::Result<FoldReport, usize>> {
        let Some(data) = cv_fold(dataset, plan, &assignment, fold)? else {
            return Ok(Err(fold));
        };
        let (_, metrics) =
            evaluate_holdout(&data.train, data.validation.as_ref(), &data.test, config, truth, clock)?;
        Ok(Ok(FoldReport {
            fold: data.fold,
            clusters: data.clusters,
            n_train: data.train.n_obs(),
            n_validation: data.validation.as_ref().map_or(0, |v| v.n_obs()),
            n_test: data.test.n_obs(),
            metrics,
        }))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = if config.parallel {
        use rayon::prelude::*;
        (0..plan.n_folds).into_par_iter().map(run_fold).collect()
    } else {
        (0..plan.n_folds).map(run_fold).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = (0..plan.n_folds).map(run_fold).collect();

    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r? {
            Ok(f) => folds.push(f),
            Err(k) => skipped.push(k),
        }
    }
    Ok(CvReport { assignment, folds, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_hand_cases() {
        assert_eq!(mspe(&[0.0, 2.0], &[1.0, 0.0]).unwrap(), 2.5);
        assert_eq!(mad(&[0.0, 0.0], &[1.0, -3.0]).unwrap(), 2.0);
        assert_eq!(mad(&[5.0], &[3.5]).unwrap(), 1.5);
        assert!(mspe(&[], &[]).is_err());
    }

    #[test]
    fn confusion_hand_case() {
        let mut gamma = vec![false; 10];
        gamma[0] = true;
        gamma[1] = true;
        gamma[2] = true;
        let m = selection_metrics(&[0, 1, 5], &gamma);
        assert!((m.sensitivity - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.specificity - 6.0 / 7.0).abs() < 1e-15);
        assert!((m.mcc - 11.0 / 21.0).abs() < 1e-15);
        assert_eq!(selection_metrics(&[], &[false; 4]).mcc, 0.0);
    }

    #[test]
    fn split_rules() {
        assert_eq!(held_out_split(6, 2, SplitRule::Auto), (0..4, 4..6));
        assert_eq!(held_out_split(3, 2, SplitRule::Auto), (0..2, 2..3));
        assert_eq!(held_out_split(1, 2, SplitRule::Auto), (0..0, 0..1));
        assert_eq!(held_out_split(5, 1, SplitRule::Auto), (0..5, 0..5));
    }

    #[test]
    fn folds_are_balanced() {
        let f = assign_folds(10, 5, 42);
        for k in 0..5 {
            assert_eq!(f.iter().filter(|&&x| x == k).count(), 2);
        }
        assert_eq!(f, assign_folds(10, 5, 42));
    }
}
