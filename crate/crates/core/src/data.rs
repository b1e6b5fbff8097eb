//! Clustered longitudinal datasets.
//!
//! A dataset stacks `N` clusters of `n_i` observations each. Sparse predictors
//! `X` are stored column-major (`M` rows per column) because every pass of the
//! engine walks one predictor column at a time. The non-sparse block `V`
//! (intercept first, random effects) and the optional adjustment block `A`
//! (fixed only) are row-major and narrow.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Cholesky, Matrix};
use crate::math;
use crate::{Error, Result};

/// One cluster in row-major form, used to build datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub y: Vec<f64>,
    /// `n_i × p`, row-major.
    pub x: Vec<f64>,
    /// `n_i × r`, row-major; column 0 must be all ones.
    pub v: Vec<f64>,
    /// `n_i × a`, row-major; empty when there are no adjustment covariates.
    pub adjust: Vec<f64>,
}

impl Cluster {
    pub fn new(id: impl Into<String>, y: Vec<f64>, x: Vec<f64>, v: Vec<f64>) -> Self {
        Self { id: id.into(), y, x, v, adjust: Vec::new() }
    }

    /// Random-intercept cluster: `V` is the all-ones column.
    pub fn intercept_only(id: impl Into<String>, y: Vec<f64>, x: Vec<f64>) -> Self {
        let v = vec![1.0; y.len()];
        Self::new(id, y, x, v)
    }

    pub fn with_adjust(mut self, adjust: Vec<f64>) -> Self {
        self.adjust = adjust;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Per-column centering and scaling applied to the sparse predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl StandardizationRecord {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    #[inline]
    pub fn apply(&self, k: usize, raw: f64) -> f64 {
        (raw - self.means[k]) / self.scales[k]
    }

    /// Record equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &StandardizationRecord) -> StandardizationRecord {
        let means = self
            .means
            .iter()
            .zip(&self.scales)
            .zip(&next.means)
            .map(|((m, s), m2)| m + s * m2)
            .collect();
        let scales = self.scales.iter().zip(&next.scales).map(|(s, s2)| s * s2).collect();
        StandardizationRecord { means, scales }
    }
}

/// Structural problems found by [`ClusteredDataset::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    /// Sparse column `k` is (numerically) a linear combination of `V` and `A`.
    CollinearPredictor { index: usize, name: String, multiple_correlation: f64 },
    EmptyCluster { id: String },
    /// The stacked non-sparse design `[V A]` does not have full column rank.
    RankDeficientDesign { columns: usize },
}

impl Diagnostic {
    /// Fatal diagnostics make the fit refuse the dataset. A collinear sparse
    /// column only breaks its own partition, which the ridge retry handles.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, Diagnostic::CollinearPredictor { .. })
    }
}

impl core::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Diagnostic::CollinearPredictor { index, name, multiple_correlation } => write!(
                f,
                "predictor {name} (column {index}) is collinear with the non-sparse design (R = {multiple_correlation})"
            ),
            Diagnostic::EmptyCluster { id } => write!(f, "cluster {id} has no observations"),
            Diagnostic::RankDeficientDesign { columns } => {
                write!(f, "non-sparse design with {columns} columns is rank deficient")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    ids: Vec<String>,
    offsets: Vec<usize>,
    y: Vec<f64>,
    x: Vec<f64>,
    v: Vec<f64>,
    adjust: Vec<f64>,
    p: usize,
    r: usize,
    a: usize,
    predictor_names: Vec<String>,
    random_names: Vec<String>,
    adjust_names: Vec<String>,
    standardization: Option<StandardizationRecord>,
}

/// Column names for a dataset; defaults are generated when absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColumnNames {
    pub predictors: Vec<String>,
    pub random: Vec<String>,
    pub adjust: Vec<String>,
}

impl ClusteredDataset {
    /// Builds a dataset from clusters with generated column names
    /// (`x1..xp`, `(intercept)`, `v2..vr`, `a1..aa`).
    pub fn from_clusters(clusters: Vec<Cluster>, p: usize) -> Result<Self> {
        Self::from_clusters_named(clusters, p, ColumnNames::default())
    }

    pub fn from_clusters_named(clusters: Vec<Cluster>, p: usize, names: ColumnNames) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::Data("dataset has no clusters".into()));
        }
        let first = &clusters[0];
        if first.is_empty() {
            return Err(Error::Data(format!("cluster {} has no observations", first.id)));
        }
        let r = first.v.len() / first.len();
        let a = first.adjust.len() / first.len();
        if r == 0 {
            return Err(Error::Data("non-sparse design needs at least the intercept column".into()));
        }
        let m: usize = clusters.iter().map(Cluster::len).sum();
        let mut ids = Vec::with_capacity(clusters.len());
        let mut offsets = Vec::with_capacity(clusters.len() + 1);
        let mut y = Vec::with_capacity(m);
        let mut x = vec![0.0; m * p];
        let mut v = Vec::with_capacity(m * r);
        let mut adjust = Vec::with_capacity(m * a);
        offsets.push(0);
        let mut row = 0;
        for c in &clusters {
            let n = c.len();
            if n == 0 {
                return Err(Error::Data(format!("cluster {} has no observations", c.id)));
            }
            if c.x.len() != n * p || c.v.len() != n * r || c.adjust.len() != n * a {
                return Err(Error::Dimension(format!(
                    "cluster {}: {} responses but x/v/adjust have {}/{}/{} cells (p={p}, r={r}, a={a})",
                    c.id,
                    n,
                    c.x.len(),
                    c.v.len(),
                    c.adjust.len()
                )));
            }
            for j in 0..n {
                if c.v[j * r] != 1.0 {
                    return Err(Error::Data(format!(
                        "cluster {}: first non-sparse column must be the intercept (all ones)",
                        c.id
                    )));
                }
                for k in 0..p {
                    x[k * m + row + j] = c.x[j * p + k];
                }
            }
            ids.push(c.id.clone());
            y.extend_from_slice(&c.y);
            v.extend_from_slice(&c.v);
            adjust.extend_from_slice(&c.adjust);
            row += n;
            offsets.push(row);
        }
        let predictor_names = if names.predictors.is_empty() {
            (1..=p).map(|k| format!("x{k}")).collect()
        } else {
            names.predictors
        };
        let random_names = if names.random.is_empty() {
            core::iter::once("(intercept)".to_string())
                .chain((2..=r).map(|j| format!("v{j}")))
                .collect()
        } else {
            names.random
        };
        let adjust_names =
            if names.adjust.is_empty() { (1..=a).map(|j| format!("a{j}")).collect() } else { names.adjust };
        if predictor_names.len() != p || random_names.len() != r || adjust_names.len() != a {
            return Err(Error::Dimension("column name counts do not match the design".into()));
        }
        if y.iter().chain(&x).chain(&v).chain(&adjust).any(|z| !z.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(Self {
            ids,
            offsets,
            y,
            x,
            v,
            adjust,
            p,
            r,
            a,
            predictor_names,
            random_names,
            adjust_names,
            standardization: None,
        })
    }

    /// Number of clusters `N`.
    pub fn n_clusters(&self) -> usize {
        self.ids.len()
    }

    /// Total observations `M = Σ n_i`.
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Number of adjustment covariates (fixed, non-sparse, no random effect).
    pub fn a(&self) -> usize {
        self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Column `k` of the stacked sparse design.
    #[inline]
    pub fn x_col(&self, k: usize) -> &[f64] {
        let m = self.n_obs();
        &self.x[k * m..(k + 1) * m]
    }

    #[inline]
    pub fn x_at(&self, row: usize, k: usize) -> f64 {
        self.x[k * self.n_obs() + row]
    }

    #[inline]
    pub fn v_row(&self, row: usize) -> &[f64] {
        &self.v[row * self.r..(row + 1) * self.r]
    }

    #[inline]
    pub fn adjust_row(&self, row: usize) -> &[f64] {
        &self.adjust[row * self.a..(row + 1) * self.a]
    }

    pub fn cluster_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn cluster_len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn cluster_id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn predictor_names(&self) -> &[String] {
        &self.predictor_names
    }

    pub fn random_names(&self) -> &[String] {
        &self.random_names
    }

    pub fn adjust_names(&self) -> &[String] {
        &self.adjust_names
    }

    pub fn standardization(&self) -> Option<&StandardizationRecord> {
        self.standardization.as_ref()
    }

    /// `V_i` as an `n_i × r` matrix.
    pub fn v_block(&self, i: usize) -> Matrix {
        let range = self.cluster_range(i);
        Matrix::from_row_major(range.len(), self.r, self.v[range.start * self.r..range.end * self.r].to_vec())
    }

    /// `V_i' V_i`.
    pub fn vtv_block(&self, i: usize) -> Matrix {
        let r = self.r;
        let mut out = Matrix::zeros(r, r);
        for row in self.cluster_range(i) {
            let vr = self.v_row(row);
            for s in 0..r {
                for t in 0..r {
                    out[(s, t)] += vr[s] * vr[t];
                }
            }
        }
        out
    }

    /// Back to row-major clusters (the inverse of [`Self::from_clusters`]).
    pub fn to_clusters(&self) -> Vec<Cluster> {
        (0..self.n_clusters())
            .map(|i| {
                let range = self.cluster_range(i);
                let mut x = Vec::with_capacity(range.len() * self.p);
                for row in range.clone() {
                    for k in 0..self.p {
                        x.push(self.x_at(row, k));
                    }
                }
                Cluster {
                    id: self.ids[i].clone(),
                    y: self.y[range.clone()].to_vec(),
                    x,
                    v: self.v[range.start * self.r..range.end * self.r].to_vec(),
                    adjust: self.adjust[range.start * self.a..range.end * self.a].to_vec(),
                }
            })
            .collect()
    }

    pub fn column_names(&self) -> ColumnNames {
        ColumnNames {
            predictors: self.predictor_names.clone(),
            random: self.random_names.clone(),
            adjust: self.adjust_names.clone(),
        }
    }

    /// New dataset made of the given `(cluster, row range within cluster)`
    /// pieces, in the given order. Empty pieces are dropped. The
    /// standardization record, if any, is carried over.
    pub fn select(&self, pieces: &[(usize, Range<usize>)]) -> Result<Self> {
        let all = self.to_clusters();
        let mut clusters = Vec::with_capacity(pieces.len());
        for (i, rows) in pieces {
            if rows.is_empty() {
                continue;
            }
            let c = all.get(*i).ok_or_else(|| Error::Data(format!("no cluster with index {i}")))?;
            if rows.end > c.len() {
                return Err(Error::Data(format!("row range {rows:?} outside cluster {}", c.id)));
            }
            clusters.push(Cluster {
                id: c.id.clone(),
                y: c.y[rows.clone()].to_vec(),
                x: c.x[rows.start * self.p..rows.end * self.p].to_vec(),
                v: c.v[rows.start * self.r..rows.end * self.r].to_vec(),
                adjust: c.adjust[rows.start * self.a..rows.end * self.a].to_vec(),
            });
        }
        let mut out = Self::from_clusters_named(clusters, self.p, self.column_names())?;
        out.standardization = self.standardization.clone();
        Ok(out)
    }

    /// Centers each sparse column to mean 0 and scales it to sample standard
    /// deviation 1, recording the transform. Standardizing twice composes the
    /// records.
    pub fn standardize(&self) -> Result<Self> {
        let m = self.n_obs();
        if m < 2 {
            return Err(Error::Data("standardization needs at least two observations".into()));
        }
        let mut means = Vec::with_capacity(self.p);
        let mut scales = Vec::with_capacity(self.p);
        let mut x = self.x.clone();
        for k in 0..self.p {
            let col = self.x_col(k);
            if col.iter().all(|&z| z == col[0]) {
                return Err(Error::ConstantColumn(self.predictor_names[k].clone()));
            }
            let mean = col.iter().sum::<f64>() / m as f64;
            let ss: f64 = col.iter().map(|z| (z - mean) * (z - mean)).sum();
            let sd = math::sqrt(ss / (m - 1) as f64);
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::ConstantColumn(self.predictor_names[k].clone()));
            }
            for z in &mut x[k * m..(k + 1) * m] {
                *z = (*z - mean) / sd;
            }
            means.push(mean);
            scales.push(sd);
        }
        let step = StandardizationRecord { means, scales };
        let record = match &self.standardization {
            Some(prev) => prev.then(&step),
            None => step,
        };
        Ok(Self { x, standardization: Some(record), ..self.clone() })
    }

    /// Applies this dataset's standardization record (if any) to a raw value.
    #[inline]
    pub fn standardize_value(&self, k: usize, raw: f64) -> f64 {
        match &self.standardization {
            Some(rec) => rec.apply(k, raw),
            None => raw,
        }
    }

    /// Structural diagnostics: collinear sparse columns, empty clusters, and
    /// rank deficiency of the stacked non-sparse design.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for i in 0..self.n_clusters() {
            if self.cluster_len(i) == 0 {
                out.push(Diagnostic::EmptyCluster { id: self.ids[i].clone() });
            }
        }
        let m = self.n_obs();
        let q = self.r + self.a;
        let design_row = |row: usize| -> Vec<f64> {
            let mut z = self.v_row(row).to_vec();
            z.extend_from_slice(self.adjust_row(row));
            z
        };
        let mut btb = Matrix::zeros(q, q);
        for row in 0..m {
            let z = design_row(row);
            for s in 0..q {
                for t in 0..q {
                    btb[(s, t)] += z[s] * z[t];
                }
            }
        }
        let Some(chol) = Cholesky::new_with_tolerance(&btb, 1e-10) else {
            out.push(Diagnostic::RankDeficientDesign { columns: q });
            return out;
        };
        for k in 0..self.p {
            let col = self.x_col(k);
            let mean = col.iter().sum::<f64>() / m as f64;
            let tss: f64 = col.iter().map(|z| (z - mean) * (z - mean)).sum();
            let xx = dot(col, col);
            let mut bx = vec![0.0; q];
            for (row, &xv) in col.iter().enumerate() {
                for (acc, z) in bx.iter_mut().zip(design_row(row)) {
                    *acc += z * xv;
                }
            }
            let coef = chol.solve(&bx);
            let rss = (xx - dot(&coef, &bx)).max(0.0);
            let corr = if tss <= f64::EPSILON * xx.max(f64::MIN_POSITIVE) {
                1.0
            } else {
                math::sqrt((1.0 - rss / tss).max(0.0))
            };
            if corr >= 1.0 - 1e-10 {
                out.push(Diagnostic::CollinearPredictor {
                    index: k,
                    name: self.predictor_names[k].clone(),
                    multiple_correlation: corr,
                });
            }
        }
        out
    }
}
