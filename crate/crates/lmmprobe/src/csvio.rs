//! Long-format CSV datasets: one row per observation.
//!
//! The schema names the cluster-id column, the response column, the extra
//! random-effect columns (the intercept is added automatically), and any
//! adjustment columns. Every other column is a sparse predictor.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use lmmprobe_core::data::{Cluster, ClusteredDataset, ColumnNames};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io: cannot open `{path}`: {source}")]
    Open { path: PathBuf, source: std::io::Error },
    #[error("io: cannot write `{path}`: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("io: {source_name}: malformed CSV: {source}")]
    Csv { source_name: String, source: csv::Error },
    #[error("io: {source_name}: row {row}, column `{column}`: {problem}")]
    Cell { source_name: String, row: usize, column: String, problem: String },
    #[error("io: {source_name}: duplicate column name `{name}`")]
    DuplicateColumn { source_name: String, name: String },
    #[error("io: {source_name}: missing column `{name}`")]
    MissingColumn { source_name: String, name: String },
    #[error("io: {source_name}: found {found} cluster(s), need at least 2")]
    TooFewClusters { source_name: String, found: usize },
    #[error("io: {source_name}: no predictor columns")]
    NoPredictors { source_name: String },
    #[error(transparent)]
    Core(#[from] lmmprobe_core::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub cluster: String,
    pub response: String,
    pub random: Vec<String>,
    pub adjust: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self { cluster: "cluster".into(), response: "y".into(), random: Vec::new(), adjust: Vec::new() }
    }
}

/// A dataset together with where each of its rows came from.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: ClusteredDataset,
    /// 0-based data-row index in the file for each dataset row.
    pub source_rows: Vec<usize>,
    pub has_response: bool,
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<LoadedData, IoError> {
    let file = File::open(path).map_err(|source| IoError::Open { path: path.to_path_buf(), source })?;
    read_dataset(file, schema, &path.display().to_string(), false)
}

/// Like [`load_dataset`] but the response column may be absent (responses
/// are then set to 0), as for rows that only need predictions.
pub fn load_prediction_rows(path: &Path, schema: &Schema) -> Result<LoadedData, IoError> {
    let file = File::open(path).map_err(|source| IoError::Open { path: path.to_path_buf(), source })?;
    read_dataset(file, schema, &path.display().to_string(), true)
}

pub fn read_dataset<R: Read>(
    reader: R,
    schema: &Schema,
    source_name: &str,
    response_optional: bool,
) -> Result<LoadedData, IoError> {
    let csv_err = |source| IoError::Csv { source_name: source_name.to_string(), source };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();

    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(IoError::DuplicateColumn { source_name: source_name.into(), name: h.clone() });
        }
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn { source_name: source_name.into(), name: name.into() })
    };
    let cluster_idx = find(&schema.cluster)?;
    let response_idx = match find(&schema.response) {
        Ok(i) => Some(i),
        Err(_) if response_optional => None,
        Err(e) => return Err(e),
    };
    let random_idx = schema.random.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;
    let adjust_idx = schema.adjust.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;
    let mut reserved: HashSet<usize> = random_idx.iter().chain(&adjust_idx).copied().collect();
    reserved.insert(cluster_idx);
    reserved.extend(response_idx);
    let predictor_idx: Vec<usize> = (0..headers.len()).filter(|i| !reserved.contains(i)).collect();
    if predictor_idx.is_empty() {
        return Err(IoError::NoPredictors { source_name: source_name.into() });
    }

    struct Rows {
        y: Vec<f64>,
        x: Vec<f64>,
        v: Vec<f64>,
        adjust: Vec<f64>,
        source: Vec<usize>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Rows> = HashMap::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let cell = |i: usize| -> Result<f64, IoError> {
            let raw = record.get(i).unwrap_or("").trim();
            let problem = if raw.is_empty() {
                Some("missing value".to_string())
            } else {
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => None,
                    Ok(_) => Some(format!("non-finite value `{raw}`")),
                    Err(_) => Some(format!("non-numeric value `{raw}`")),
                }
            };
            match problem {
                None => Ok(raw.parse().expect("checked above")),
                Some(problem) => Err(IoError::Cell {
                    source_name: source_name.into(),
                    row: row + 1,
                    column: headers[i].clone(),
                    problem,
                }),
            }
        };
        let id = record.get(cluster_idx).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(IoError::Cell {
                source_name: source_name.into(),
                row: row + 1,
                column: headers[cluster_idx].clone(),
                problem: "missing cluster id".into(),
            });
        }
        let y = match response_idx {
            Some(i) => cell(i)?,
            None => 0.0,
        };
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Rows { y: Vec::new(), x: Vec::new(), v: Vec::new(), adjust: Vec::new(), source: Vec::new() }
        });
        entry.y.push(y);
        for &i in &predictor_idx {
            entry.x.push(cell(i)?);
        }
        entry.v.push(1.0);
        for &i in &random_idx {
            entry.v.push(cell(i)?);
        }
        for &i in &adjust_idx {
            entry.adjust.push(cell(i)?);
        }
        entry.source.push(row);
    }
    if order.len() < 2 && !response_optional {
        return Err(IoError::TooFewClusters { source_name: source_name.into(), found: order.len() });
    }
    if order.is_empty() {
        return Err(IoError::TooFewClusters { source_name: source_name.into(), found: 0 });
    }

    let mut clusters = Vec::with_capacity(order.len());
    let mut source_rows = Vec::new();
    for id in order {
        let rows = groups.remove(&id).expect("grouped above");
        source_rows.extend(&rows.source);
        clusters.push(Cluster::new(id, rows.y, rows.x, rows.v).with_adjust(rows.adjust));
    }
    let mut random = vec!["(intercept)".to_string()];
    random.extend(schema.random.iter().cloned());
    let names = ColumnNames {
        predictors: predictor_idx.iter().map(|&i| headers[i].clone()).collect(),
        random,
        adjust: schema.adjust.clone(),
    };
    let dataset = ClusteredDataset::from_clusters_named(clusters, predictor_idx.len(), names)?;
    Ok(LoadedData { dataset, source_rows, has_response: response_idx.is_some() })
}

/// Header implied by a dataset: cluster, response, random (without the
/// intercept), adjustment, predictors.
pub fn dataset_header(ds: &ClusteredDataset, schema: &Schema) -> Vec<String> {
    let mut header = vec![schema.cluster.clone(), schema.response.clone()];
    header.extend(ds.random_names().iter().skip(1).cloned());
    header.extend(ds.adjust_names().iter().cloned());
    header.extend(ds.predictor_names().iter().cloned());
    header
}

/// Schema that reads back a file written by [`write_dataset`].
pub fn schema_for(ds: &ClusteredDataset, cluster: &str, response: &str) -> Schema {
    Schema {
        cluster: cluster.into(),
        response: response.into(),
        random: ds.random_names().iter().skip(1).cloned().collect(),
        adjust: ds.adjust_names().to_vec(),
    }
}

/// Writes the dataset with shortest round-trip float formatting, so
/// reloading reproduces every value exactly.
pub fn write_dataset<W: Write>(writer: W, ds: &ClusteredDataset, schema: &Schema) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset_header(ds, schema))?;
    let mut record: Vec<String> = Vec::new();
    for i in 0..ds.n_clusters() {
        for row in ds.cluster_range(i) {
            record.clear();
            record.push(ds.cluster_id(i).to_string());
            record.push(ds.y()[row].to_string());
            record.extend(ds.v_row(row).iter().skip(1).map(f64::to_string));
            record.extend(ds.adjust_row(row).iter().map(f64::to_string));
            record.extend((0..ds.p()).map(|k| ds.x_at(row, k).to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(path: &Path, ds: &ClusteredDataset, schema: &Schema) -> Result<(), IoError> {
    let file = File::create(path).map_err(|source| IoError::Write { path: path.to_path_buf(), source })?;
    write_dataset(std::io::BufWriter::new(file), ds, schema)
        .map_err(|source| IoError::Csv { source_name: path.display().to_string(), source })
}
