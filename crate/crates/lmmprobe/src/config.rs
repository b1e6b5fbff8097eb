//! Flat key-value run configuration.
//!
//! A TOML file supplies any subset of the keys below; command-line flags are
//! applied on top of it. The resolved configuration is written next to every
//! output so a run can be repeated exactly.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use lmmprobe_core::eb::KdeMethod;
use lmmprobe_core::ecm::{CrossMomentRule, LearningRate, QuantileTail};
use lmmprobe_core::eval::{CvPlan, SplitRule};
use lmmprobe_core::linalg::Matrix;
use lmmprobe_core::simulate::{PredictorDraw, SignRule, SimulationConfig};
use lmmprobe_core::EcmConfig;

use crate::csvio::Schema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kde {
    Binned,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cross {
    Joint,
    Displayed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Auto,
    Whole,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Draw {
    PerObservation,
    PerCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signs {
    Positive,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 means one worker per available core.
    pub workers: usize,

    pub max_iterations: usize,
    pub convergence_quantile: f64,
    pub convergence_tail: Tail,
    pub storey_lambda: f64,
    /// Constant learning rate; absent means `1/(t+1)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub kde: Kde,
    pub kde_bins: usize,
    pub cross_moments: Cross,
    pub standardize: bool,

    pub cluster_col: String,
    pub response_col: String,
    pub random_cols: Vec<String>,
    pub adjust_cols: Vec<String>,

    pub folds: usize,
    pub split: Split,

    pub sim_p: usize,
    pub sim_clusters: usize,
    pub sim_obs: usize,
    pub sim_r: usize,
    pub sim_pi: f64,
    pub sim_beta: f64,
    pub sim_sigma2: f64,
    /// Row-major `r × r` random-effect covariance.
    pub sim_g: Vec<f64>,
    pub sim_length_scale: f64,
    pub sim_draw: Draw,
    pub sim_signs: Signs,

    pub bench_p: Vec<usize>,
    pub bench_clusters: usize,
    pub bench_obs: usize,
    pub bench_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimulationConfig::default();
        Self {
            seed: 0,
            workers: 1,
            max_iterations: 1000,
            convergence_quantile: 0.1,
            convergence_tail: Tail::Upper,
            storey_lambda: 0.1,
            learning_rate: None,
            kde: Kde::Binned,
            kde_bins: 1024,
            cross_moments: Cross::Joint,
            standardize: true,
            cluster_col: "cluster".into(),
            response_col: "y".into(),
            random_cols: Vec::new(),
            adjust_cols: Vec::new(),
            folds: 5,
            split: Split::Auto,
            sim_p: sim.p,
            sim_clusters: sim.n_clusters,
            sim_obs: sim.obs_per_cluster,
            sim_r: sim.r,
            sim_pi: sim.pi,
            sim_beta: sim.beta_value,
            sim_sigma2: sim.sigma2,
            sim_g: sim.g.as_slice().to_vec(),
            sim_length_scale: sim.grf_length_scale,
            sim_draw: Draw::PerObservation,
            sim_signs: Signs::Positive,
            bench_p: vec![225, 450, 900, 1800],
            bench_clusters: 50,
            bench_obs: 6,
            bench_iterations: 30,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("config: cannot read `{}`", path.display()))?;
        toml::from_str(&text).with_context(|| format!("config: invalid `{}`", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn schema(&self) -> Schema {
        Schema {
            cluster: self.cluster_col.clone(),
            response: self.response_col.clone(),
            random: self.random_cols.clone(),
            adjust: self.adjust_cols.clone(),
        }
    }

    pub fn ecm(&self) -> anyhow::Result<EcmConfig> {
        let cfg = EcmConfig {
            max_iterations: self.max_iterations,
            convergence_quantile: self.convergence_quantile,
            convergence_tail: match self.convergence_tail {
                Tail::Upper => QuantileTail::Upper,
                Tail::Lower => QuantileTail::Lower,
            },
            storey_lambda: self.storey_lambda,
            learning_rate: self.learning_rate.map_or(LearningRate::InverseIteration, LearningRate::Constant),
            kde: match self.kde {
                Kde::Binned => KdeMethod::Binned { bins: self.kde_bins },
                Kde::Exact => KdeMethod::Exact,
            },
            cross_moments: match self.cross_moments {
                Cross::Joint => CrossMomentRule::Joint,
                Cross::Displayed => CrossMomentRule::Displayed,
            },
            parallel: self.workers != 1,
            run_to_max: false,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cv_plan(&self) -> CvPlan {
        CvPlan {
            n_folds: self.folds,
            seed: self.seed,
            split: match self.split {
                Split::Auto => SplitRule::Auto,
                Split::Whole => SplitRule::WholeFold,
                Split::Time => SplitRule::TimeSplit,
            },
            standardize: self.standardize,
        }
    }

    pub fn simulation(&self) -> anyhow::Result<SimulationConfig> {
        let r = self.sim_r;
        if self.sim_g.len() != r * r {
            bail!("config: sim_g has {} entries but sim_r = {r} needs {}", self.sim_g.len(), r * r);
        }
        Ok(SimulationConfig {
            p: self.sim_p,
            n_clusters: self.sim_clusters,
            obs_per_cluster: self.sim_obs,
            r,
            pi: self.sim_pi,
            beta_value: self.sim_beta,
            sigma2: self.sim_sigma2,
            g: Matrix::from_row_major(r, r, self.sim_g.clone()),
            grf_length_scale: self.sim_length_scale,
            predictor_draw: match self.sim_draw {
                Draw::PerObservation => PredictorDraw::PerObservation,
                Draw::PerCluster => PredictorDraw::PerCluster,
            },
            signs: match self.sim_signs {
                Signs::Positive => SignRule::Positive,
                Signs::Random => SignRule::RandomSign,
            },
            seed: self.seed,
        })
    }

    /// Copies a grid setting's design into the simulation keys.
    pub fn with_simulation(mut self, sim: &SimulationConfig) -> Self {
        self.sim_p = sim.p;
        self.sim_clusters = sim.n_clusters;
        self.sim_obs = sim.obs_per_cluster;
        self.sim_r = sim.r;
        self.sim_pi = sim.pi;
        self.sim_beta = sim.beta_value;
        self.sim_sigma2 = sim.sigma2;
        self.sim_g = sim.g.as_slice().to_vec();
        self
    }
}
