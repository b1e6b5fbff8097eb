//! Argument parsing and the five subcommands.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lmmprobe_core::eval::{self, CvReport};
use lmmprobe_core::linalg::Matrix;
use lmmprobe_core::simulate::{self, SimulationConfig, Truth};
use lmmprobe_core::{fit, predict, PredictionRequest};

use crate::artifacts::{self, write_json, write_text};
use crate::bench::{self, BenchPlan};
use crate::config::RunConfig;
use crate::csvio::{self, Schema};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Parser)]
#[command(name = "lmmprobe", version, about = "Sparse high-dimensional linear mixed models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "LMMPROBE_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub no_standardize: bool,
    #[arg(long, global = true)]
    pub convergence_quantile: Option<f64>,
    #[arg(long, global = true)]
    pub cluster_col: Option<String>,
    #[arg(long, global = true)]
    pub response_col: Option<String>,
    /// Random-effect columns besides the intercept, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub random_cols: Option<Vec<String>>,
    /// Fixed adjustment columns, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub adjust_cols: Option<Vec<String>>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and write coefficients, variance components and trace.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict responses for new rows from a saved fit.
    Predict {
        /// Directory written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Rows with observed responses used to predict random effects.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a simulated dataset with its ground truth.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Write the full settings grid to grid.csv.
        #[arg(long)]
        paper_grid: bool,
        /// Generate grid setting i (0-based) instead of the configured design.
        #[arg(long, requires = "paper_grid")]
        setting: Option<usize>,
    },
    /// Cluster-grouped cross-validation.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// truth.csv from `simulate`; params.json must sit next to it.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Per-iteration timing as p and M grow.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        p_values: Option<Vec<usize>>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
    },
}

/// Whether the command's fits converged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Converged,
    NotConverged,
}

pub fn resolve_config(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = global.seed {
        cfg.seed = v;
    }
    if let Some(v) = global.workers {
        cfg.workers = v;
    }
    if let Some(v) = global.max_iter {
        cfg.max_iterations = v;
    }
    if global.no_standardize {
        cfg.standardize = false;
    }
    if let Some(v) = global.convergence_quantile {
        cfg.convergence_quantile = v;
    }
    if let Some(v) = &global.cluster_col {
        cfg.cluster_col = v.clone();
    }
    if let Some(v) = &global.response_col {
        cfg.response_col = v.clone();
    }
    if let Some(v) = &global.random_cols {
        cfg.random_cols = v.clone();
    }
    if let Some(v) = &global.adjust_cols {
        cfg.adjust_cols = v.clone();
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cli: cannot create output directory `{}`", dir.display()))?;
    write_text(&dir.join(EFFECTIVE_CONFIG), &cfg.to_toml())
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cli: cannot create `{}`", path.display()))
}

pub fn cmd_fit(cfg: &RunConfig, data: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let ecm = cfg.ecm()?;
    let loaded = csvio::load_dataset(data, &cfg.schema())?;
    let ds = if cfg.standardize { loaded.dataset.standardize()? } else { loaded.dataset };
    let result = fit(&ds, &ecm)?;
    prepare_out(out, cfg)?;
    artifacts::write_fit(out, &result, &ds)?;
    log::info!("fit: {} iterations, {} selected", result.iterations, result.selected.len());
    Ok(if result.converged { Outcome::Converged } else { Outcome::NotConverged })
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    row: usize,
    cluster: &'a str,
    y_hat_full: f64,
    y_hat_fixed: f64,
}

pub fn cmd_predict(cfg: &RunConfig, fit_dir: &Path, data: &Path, validation: Option<&Path>, out: &Path) -> anyhow::Result<Outcome> {
    let loaded = artifacts::load_fit(fit_dir)?;
    let schema = Schema {
        cluster: cfg.cluster_col.clone(),
        response: cfg.response_col.clone(),
        random: loaded.random_names.iter().skip(1).cloned().collect(),
        adjust: loaded.adjust_names.clone(),
    };
    let check_names = |ds: &lmmprobe_core::ClusteredDataset, path: &Path| -> anyhow::Result<()> {
        if ds.predictor_names() != loaded.predictor_names.as_slice() {
            let first = ds
                .predictor_names()
                .iter()
                .zip(&loaded.predictor_names)
                .position(|(a, b)| a != b)
                .unwrap_or(ds.p().min(loaded.predictor_names.len()));
            bail!(
                "prediction: `{}` predictor columns differ from the fit ({} vs {} columns, first difference at position {})",
                path.display(),
                ds.p(),
                loaded.predictor_names.len(),
                first + 1
            );
        }
        Ok(())
    };
    let target = csvio::load_prediction_rows(data, &schema)?;
    check_names(&target.dataset, data)?;
    let val = match validation {
        Some(path) => {
            let v = csvio::load_prediction_rows(path, &schema)?;
            if !v.has_response {
                bail!("prediction: validation file `{}` has no `{}` column", path.display(), schema.response);
            }
            check_names(&v.dataset, path)?;
            Some(v.dataset)
        }
        None => None,
    };
    let req = PredictionRequest { target: &target.dataset, validation: val.as_ref() };
    let pred = predict(&loaded.fit, &req)?;

    prepare_out(out, cfg)?;
    let ds = &target.dataset;
    let mut cluster_of = vec![0; ds.n_obs()];
    for i in 0..ds.n_clusters() {
        for row in ds.cluster_range(i) {
            cluster_of[row] = i;
        }
    }
    let mut order: Vec<usize> = (0..ds.n_obs()).collect();
    order.sort_by_key(|&j| target.source_rows[j]);
    let mut w = csv_writer(&out.join("predictions.csv"))?;
    for j in order {
        w.serialize(PredictionRow {
            row: target.source_rows[j] + 1,
            cluster: ds.cluster_id(cluster_of[j]),
            y_hat_full: pred.y_hat_full[j],
            y_hat_fixed: pred.y_hat_fixed[j],
        })?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("random_effects.csv"))?;
    let mut header = vec![cfg.cluster_col.clone()];
    header.extend(loaded.random_names.iter().cloned());
    w.write_record(&header)?;
    for (id, b) in &pred.b_hat {
        let mut rec = vec![id.clone()];
        rec.extend(b.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(Outcome::Converged)
}

#[derive(Serialize)]
struct TruthRow {
    k: usize,
    name: String,
    gamma_k: u8,
    beta_k: f64,
}

#[derive(Serialize, serde::Deserialize)]
struct SimulationParams {
    seed: u64,
    p: usize,
    n_clusters: usize,
    obs_per_cluster: usize,
    r: usize,
    pi: f64,
    beta: f64,
    sigma2: f64,
    #[serde(rename = "G")]
    g: Vec<Vec<f64>>,
    omega: Vec<f64>,
    grf_length_scale: f64,
    n_signals: usize,
    random_cols: Vec<String>,
    /// Realized random effects, one row per cluster.
    b: Vec<Vec<f64>>,
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|s| m.row(s).to_vec()).collect()
}

#[derive(Serialize)]
struct GridRow {
    setting: usize,
    p: usize,
    n_clusters: usize,
    obs_per_cluster: usize,
    r: usize,
    pi: f64,
    beta: f64,
    sigma2: f64,
    g: String,
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, paper_grid: bool, setting: Option<usize>) -> anyhow::Result<Outcome> {
    let grid = simulate::setting_grid();
    let (cfg, sim) = match setting {
        Some(i) => {
            let Some(s) = grid.get(i) else {
                bail!("simulation: setting {i} is out of range (grid has {} settings)", grid.len());
            };
            let sim = SimulationConfig { seed: cfg.seed, ..cfg.simulation()? };
            let sim = SimulationConfig { p: s.p, n_clusters: s.n_clusters, obs_per_cluster: s.obs_per_cluster, r: s.r, pi: s.pi, beta_value: s.beta_value, sigma2: s.sigma2, g: s.g.clone(), ..sim };
            (cfg.clone().with_simulation(&sim), Some(sim))
        }
        None if paper_grid => (cfg.clone(), None),
        None => (cfg.clone(), Some(cfg.simulation()?)),
    };
    if let Some(sim) = &sim {
        sim.validate()?;
    }
    prepare_out(out, &cfg)?;
    if paper_grid {
        let mut w = csv_writer(&out.join("grid.csv"))?;
        for (i, s) in grid.iter().enumerate() {
            let g = s.g.as_slice().iter().map(f64::to_string).collect::<Vec<_>>().join(";");
            w.serialize(GridRow {
                setting: i,
                p: s.p,
                n_clusters: s.n_clusters,
                obs_per_cluster: s.obs_per_cluster,
                r: s.r,
                pi: s.pi,
                beta: s.beta_value,
                sigma2: s.sigma2,
                g,
            })?;
        }
        w.flush()?;
    }
    let Some(sim) = sim else {
        return Ok(Outcome::Converged);
    };
    let data = simulate::generate(&sim)?;
    let schema = csvio::schema_for(&data.train, &cfg.cluster_col, &cfg.response_col);
    csvio::write_dataset_file(&out.join("train.csv"), &data.train, &schema)?;
    csvio::write_dataset_file(&out.join("test.csv"), &data.test, &schema)?;
    let mut w = csv_writer(&out.join("truth.csv"))?;
    for k in 0..sim.p {
        w.serialize(TruthRow {
            k,
            name: data.train.predictor_names()[k].clone(),
            gamma_k: data.truth.gamma[k] as u8,
            beta_k: data.truth.beta[k],
        })?;
    }
    w.flush()?;
    let params = SimulationParams {
        seed: sim.seed,
        p: sim.p,
        n_clusters: sim.n_clusters,
        obs_per_cluster: sim.obs_per_cluster,
        r: sim.r,
        pi: sim.pi,
        beta: sim.beta_value,
        sigma2: sim.sigma2,
        g: matrix_rows(&sim.g),
        omega: data.truth.omega.clone(),
        grf_length_scale: sim.grf_length_scale,
        n_signals: sim.n_signals(),
        random_cols: schema.random.clone(),
        b: data.truth.b.chunks(sim.r).map(<[f64]>::to_vec).collect(),
    };
    write_json(&out.join("params.json"), &params)?;
    Ok(Outcome::Converged)
}

/// Reads `truth.csv` and the `params.json` beside it.
pub fn load_truth(path: &Path) -> anyhow::Result<Truth> {
    #[derive(serde::Deserialize)]
    struct Row {
        gamma_k: u8,
        beta_k: f64,
    }
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cli: cannot read truth file `{}`", path.display()))?;
    let mut gamma = Vec::new();
    let mut beta = Vec::new();
    for row in rdr.deserialize() {
        let row: Row = row.with_context(|| format!("cli: invalid truth file `{}`", path.display()))?;
        gamma.push(row.gamma_k != 0);
        beta.push(row.beta_k);
    }
    let ppath = path.with_file_name("params.json");
    let text = std::fs::read_to_string(&ppath).with_context(|| format!("cli: cannot read `{}`", ppath.display()))?;
    let params: SimulationParams =
        serde_json::from_str(&text).with_context(|| format!("cli: invalid `{}`", ppath.display()))?;
    let r = params.g.len();
    Ok(Truth {
        gamma,
        beta,
        b: params.b.concat(),
        g: Matrix::from_row_major(r, r, params.g.concat()),
        sigma2: params.sigma2,
        omega: params.omega,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_cv(out: &Path, ds: &lmmprobe_core::ClusteredDataset, report: &CvReport) -> anyhow::Result<()> {
    let mut w = csv_writer(&out.join("folds.csv"))?;
    w.write_record(["cluster", "fold"])?;
    for (i, f) in report.assignment.iter().enumerate() {
        w.write_record([ds.cluster_id(i).to_string(), f.to_string()])?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("metrics.csv"))?;
    w.write_record([
        "fold", "n_train", "n_validation", "n_test", "mspe", "mad", "mspe_fixed_only", "null_mspe", "mse_fixed",
        "mse_total_variance", "sensitivity", "specificity", "mcc", "n_selected", "iterations", "converged",
    ])?;
    for f in &report.folds {
        let m = &f.metrics;
        let sel = m.selection.as_ref();
        w.write_record([
            f.fold.to_string(),
            f.n_train.to_string(),
            f.n_validation.to_string(),
            f.n_test.to_string(),
            m.mspe.to_string(),
            m.mad.to_string(),
            m.mspe_fixed_only.to_string(),
            opt(m.null_mspe),
            opt(m.mse_fixed),
            opt(m.mse_total_variance),
            opt(sel.map(|s| s.sensitivity)),
            opt(sel.map(|s| s.specificity)),
            opt(sel.map(|s| s.mcc)),
            m.n_selected.to_string(),
            m.iterations.to_string(),
            m.converged.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("timing.csv"))?;
    w.write_record(["fold", "runtime_seconds"])?;
    for f in &report.folds {
        w.write_record([f.fold.to_string(), opt(f.metrics.runtime_seconds)])?;
    }
    w.flush()?;

    #[derive(Serialize)]
    struct Summary {
        folds: usize,
        skipped: Vec<usize>,
        /// Mean over scored folds.
        mean: std::collections::BTreeMap<&'static str, f64>,
        /// Sample standard deviation over folds divided by the square root
        /// of the number of folds.
        standard_error: std::collections::BTreeMap<&'static str, f64>,
        all_converged: bool,
    }
    let mut columns: Vec<(&'static str, Vec<f64>)> = vec![
        ("mspe", report.folds.iter().map(|f| f.metrics.mspe).collect()),
        ("mad", report.folds.iter().map(|f| f.metrics.mad).collect()),
        ("mspe_fixed_only", report.folds.iter().map(|f| f.metrics.mspe_fixed_only).collect()),
        ("n_selected", report.folds.iter().map(|f| f.metrics.n_selected as f64).collect()),
    ];
    let optional: [(&'static str, fn(&eval::MetricsReport) -> Option<f64>); 6] = [
        ("null_mspe", |m| m.null_mspe),
        ("mse_fixed", |m| m.mse_fixed),
        ("mse_total_variance", |m| m.mse_total_variance),
        ("sensitivity", |m| m.selection.map(|s| s.sensitivity)),
        ("specificity", |m| m.selection.map(|s| s.specificity)),
        ("mcc", |m| m.selection.map(|s| s.mcc)),
    ];
    for (name, get) in optional {
        let vals: Option<Vec<f64>> = report.folds.iter().map(|f| get(&f.metrics)).collect();
        if let Some(v) = vals {
            columns.push((name, v));
        }
    }
    let mut mean = std::collections::BTreeMap::new();
    let mut standard_error = std::collections::BTreeMap::new();
    for (name, v) in columns {
        let n = v.len() as f64;
        if v.is_empty() {
            continue;
        }
        let mu = v.iter().sum::<f64>() / n;
        mean.insert(name, mu);
        if v.len() > 1 {
            let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
            standard_error.insert(name, (var / n).sqrt());
        }
    }
    let summary = Summary {
        folds: report.folds.len(),
        skipped: report.skipped.clone(),
        mean,
        standard_error,
        all_converged: report.folds.iter().all(|f| f.metrics.converged),
    };
    write_json(&out.join("summary.json"), &summary)
}

pub fn cmd_cv(cfg: &RunConfig, data: &Path, out: &Path, truth: Option<&Path>) -> anyhow::Result<Outcome> {
    let ecm = cfg.ecm()?;
    let plan = cfg.cv_plan();
    let loaded = csvio::load_dataset(data, &cfg.schema())?;
    let ds = loaded.dataset;
    let truth = truth.map(load_truth).transpose()?;
    if let Some(t) = &truth {
        if t.beta.len() != ds.p() {
            bail!("cli: truth has {} coefficients but the data have {} predictors", t.beta.len(), ds.p());
        }
    }
    let start = std::time::Instant::now();
    let clock = move || start.elapsed().as_secs_f64();
    let report = eval::cv_run(&ds, &plan, &ecm, truth.as_ref(), Some(&clock))?;
    for k in &report.skipped {
        log::warn!("cv: fold {k} skipped (no test observations)");
    }
    prepare_out(out, cfg)?;
    write_cv(out, &ds, &report)?;
    Ok(if report.folds.iter().all(|f| f.metrics.converged) { Outcome::Converged } else { Outcome::NotConverged })
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> anyhow::Result<Outcome> {
    let plan = BenchPlan {
        p_values: cfg.bench_p.clone(),
        n_clusters: cfg.bench_clusters,
        obs_per_cluster: cfg.bench_obs,
        iterations: cfg.bench_iterations,
        seed: cfg.seed,
        ecm: cfg.ecm()?,
    };
    let report = bench::scaling_run(&plan)?;
    prepare_out(out, cfg)?;
    let mut w = csv_writer(&out.join("bench.csv"))?;
    for row in &report.iterations {
        w.serialize(row)?;
    }
    w.flush()?;
    write_json(&out.join("scaling.json"), &report)?;
    if !report.dense_bound_respected() {
        bail!("bench: a factored matrix exceeded the partition bound");
    }
    Ok(Outcome::Converged)
}

fn dispatch(cli: Cli) -> anyhow::Result<Outcome> {
    let mut cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Cv { folds: Some(k), .. } => cfg.folds = *k,
        Command::Bench { p_values, iterations, clusters, .. } => {
            if let Some(v) = p_values {
                cfg.bench_p = v.clone();
            }
            if let Some(v) = iterations {
                cfg.bench_iterations = *v;
            }
            if let Some(v) = clusters {
                cfg.bench_clusters = *v;
            }
        }
        _ => {}
    }
    let threads = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().context("cli: cannot start worker pool")?;
    pool.install(|| match &cli.command {
        Command::Fit { data, out } => cmd_fit(&cfg, data, out),
        Command::Predict { fit, data, validation, out } => cmd_predict(&cfg, fit, data, validation.as_deref(), out),
        Command::Simulate { out, paper_grid, setting } => cmd_simulate(&cfg, out, *paper_grid, *setting),
        Command::Cv { data, out, truth, .. } => cmd_cv(&cfg, data, out, truth.as_deref()),
        Command::Bench { out, .. } => cmd_bench(&cfg, out),
    })
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code: 0 success, 2 no convergence, 1 error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(cli) {
        Ok(Outcome::Converged) => 0,
        Ok(Outcome::NotConverged) => {
            eprintln!("warning: ecm: did not converge; artifacts were still written");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
