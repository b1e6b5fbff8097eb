//! Fit artifacts on disk.
//!
//! A fit directory holds `coefficients.csv`, `variance.json` and `trace.csv`.
//! Floats are written in shortest round-trip form, so [`load_fit`] rebuilds
//! every quantity prediction needs exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use lmmprobe_core::data::{ClusteredDataset, StandardizationRecord};
use lmmprobe_core::ecm::{EcmState, SolveCounts, StopReason};
use lmmprobe_core::linalg::Matrix;
use lmmprobe_core::moments::{CrossMoments, RandomEffectMoments, WMoments};
use lmmprobe_core::FitResult;

pub const COEFFICIENTS: &str = "coefficients.csv";
pub const VARIANCE: &str = "variance.json";
pub const TRACE: &str = "trace.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFile {
    pub sigma2: f64,
    /// Row-major rows of `G`.
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    pub omega0: Vec<f64>,
    pub omega_adjust: Vec<f64>,
    pub alpha0: f64,
    pub tau0: f64,
    pub pi0: f64,
    pub converged: bool,
    pub stop: String,
    pub iterations: usize,
    pub threshold: f64,
    pub n_selected: usize,
    pub regularized_solves: usize,
    pub excluded_solves: usize,
    pub largest_dense_dim: usize,
    pub random_names: Vec<String>,
    pub adjust_names: Vec<String>,
    pub standardization: Option<StandardizationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CoefficientRow {
    k: usize,
    name: String,
    beta_tilde: f64,
    s_tilde: f64,
    p_tilde: f64,
    beta_bar: f64,
}

fn stop_name(stop: StopReason) -> &'static str {
    match stop {
        StopReason::Converged => "converged",
        StopReason::AllNull => "all_null",
        StopReason::MaxIterations => "max_iterations",
    }
}

fn parse_stop(name: &str) -> anyhow::Result<StopReason> {
    Ok(match name {
        "converged" => StopReason::Converged,
        "all_null" => StopReason::AllNull,
        "max_iterations" => StopReason::MaxIterations,
        other => bail!("artifacts: unknown stop reason `{other}`"),
    })
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("artifacts: cannot create `{}`", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush().with_context(|| format!("artifacts: cannot write `{}`", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("artifacts: cannot write `{}`", path.display()))
}

/// Writes the three fit files into `dir`, which must exist.
pub fn write_fit(dir: &Path, fit: &FitResult, ds: &ClusteredDataset) -> anyhow::Result<()> {
    let st = &fit.state;
    let mut w = csv::Writer::from_writer(create(&dir.join(COEFFICIENTS))?);
    for k in 0..st.beta.len() {
        w.serialize(CoefficientRow {
            k,
            name: ds.predictor_names()[k].clone(),
            beta_tilde: st.beta[k],
            s_tilde: st.s2[k].max(0.0).sqrt(),
            p_tilde: st.probs[k],
            beta_bar: fit.beta_bar[k],
        })?;
    }
    w.flush()?;

    let r = st.g.rows();
    let variance = VarianceFile {
        sigma2: st.sigma2,
        g: (0..r).map(|s| st.g.row(s).to_vec()).collect(),
        omega0: st.omega0.clone(),
        omega_adjust: st.omega_adjust.clone(),
        alpha0: st.alpha0,
        tau0: st.tau0,
        pi0: st.pi0,
        converged: fit.converged,
        stop: stop_name(fit.stop).into(),
        iterations: fit.iterations,
        threshold: fit.threshold,
        n_selected: fit.selected.len(),
        regularized_solves: fit.counts.regularized,
        excluded_solves: fit.counts.excluded,
        largest_dense_dim: fit.largest_dense_dim,
        random_names: ds.random_names().to_vec(),
        adjust_names: ds.adjust_names().to_vec(),
        standardization: fit.standardization.clone(),
    };
    write_json(&dir.join(VARIANCE), &variance)?;

    let mut w = csv::Writer::from_writer(create(&dir.join(TRACE))?);
    w.write_record(["t", "cc", "loglik"])?;
    // loglik_trace starts with the initial value (t = 0, no CC yet).
    for (t, ll) in st.loglik_trace.iter().enumerate() {
        let cc = if t == 0 { String::new() } else { st.cc_trace.get(t - 1).map_or(String::new(), f64::to_string) };
        w.write_record([t.to_string(), cc, ll.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A fit read back from disk, with the predictor names it was trained on.
#[derive(Debug, Clone)]
pub struct LoadedFit {
    pub fit: FitResult,
    pub predictor_names: Vec<String>,
    pub random_names: Vec<String>,
    pub adjust_names: Vec<String>,
}

pub fn load_fit(dir: &Path) -> anyhow::Result<LoadedFit> {
    let vpath = dir.join(VARIANCE);
    let text = std::fs::read_to_string(&vpath).with_context(|| format!("artifacts: cannot read `{}`", vpath.display()))?;
    let v: VarianceFile =
        serde_json::from_str(&text).with_context(|| format!("artifacts: invalid `{}`", vpath.display()))?;

    let cpath = dir.join(COEFFICIENTS);
    let mut rdr = csv::Reader::from_path(&cpath).with_context(|| format!("artifacts: cannot read `{}`", cpath.display()))?;
    let mut rows = Vec::new();
    for row in rdr.deserialize() {
        let row: CoefficientRow = row.with_context(|| format!("artifacts: invalid `{}`", cpath.display()))?;
        if row.k != rows.len() {
            bail!("artifacts: `{}` rows are out of order at k = {}", cpath.display(), row.k);
        }
        rows.push(row);
    }

    let r = v.g.len();
    if r == 0 || v.g.iter().any(|row| row.len() != r) || v.omega0.len() != r || v.random_names.len() != r {
        bail!("artifacts: `{}` has inconsistent random-effect dimensions", vpath.display());
    }
    if v.omega_adjust.len() != v.adjust_names.len() {
        bail!("artifacts: `{}` has inconsistent adjustment dimensions", vpath.display());
    }
    let p = rows.len();
    if let Some(rec) = &v.standardization {
        if rec.means.len() != p || rec.scales.len() != p {
            bail!("artifacts: standardization record does not match {p} coefficients");
        }
    }
    let probs: Vec<f64> = rows.iter().map(|c| c.p_tilde).collect();
    let state = EcmState {
        beta: rows.iter().map(|c| c.beta_tilde).collect(),
        s2: rows.iter().map(|c| c.s_tilde * c.s_tilde).collect(),
        omega0: v.omega0.clone(),
        omega_adjust: v.omega_adjust.clone(),
        alpha0: v.alpha0,
        tau0: v.tau0,
        sigma2: v.sigma2,
        g: Matrix::from_row_major(r, r, v.g.concat()),
        wm: WMoments::zeros(0),
        rem: RandomEffectMoments::zeros(0, r),
        cross: CrossMoments::zeros(0),
        t: v.iterations,
        pi0: v.pi0,
        cc_trace: Vec::new(),
        loglik_trace: Vec::new(),
        probs,
    };
    let fit = FitResult {
        beta_bar: rows.iter().map(|c| c.beta_bar).collect(),
        selected: state.probs.iter().enumerate().filter(|(_, &p)| p > 0.5).map(|(k, _)| k).collect(),
        converged: v.converged,
        all_null: v.stop == "all_null",
        stop: parse_stop(&v.stop)?,
        iterations: v.iterations,
        threshold: v.threshold,
        standardization: v.standardization,
        largest_dense_dim: v.largest_dense_dim,
        counts: SolveCounts { regularized: v.regularized_solves, excluded: v.excluded_solves, ..SolveCounts::default() },
        state,
    };
    Ok(LoadedFit {
        fit,
        predictor_names: rows.into_iter().map(|c| c.name).collect(),
        random_names: v.random_names,
        adjust_names: v.adjust_names,
    })
}
