use std::fmt::Write as _;

use lmmprobe::csvio::{self, IoError, Schema};
use lmmprobe_core::data::{Cluster, ClusteredDataset, ColumnNames};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn read(text: &str, schema: &Schema) -> Result<csvio::LoadedData, IoError> {
    csvio::read_dataset(text.as_bytes(), schema, "input.csv", false)
}

#[test]
fn small_file_dimensions() {
    let text = "cluster,y,a,b,c,d\n1,0.5,1,2,3,4\n1,0.1,2,3,4,5\n1,0.2,3,1,2,2\n2,1,4,4,4,1\n2,2,5,5,1,0\n2,3,6,1,0,0\n";
    let ds = read(text, &Schema::default()).unwrap().dataset;
    assert_eq!((ds.n_clusters(), ds.n_obs(), ds.p(), ds.r()), (2, 6, 4, 1));
    assert_eq!(ds.predictor_names(), ["a", "b", "c", "d"]);
}

#[test]
fn rows_are_grouped_by_cluster_in_file_order() {
    let text = "id,y,x\nb,1,10\na,2,20\nb,3,30\na,4,40\n";
    let schema = Schema { cluster: "id".into(), ..Schema::default() };
    let loaded = read(text, &schema).unwrap();
    assert_eq!(loaded.dataset.cluster_ids(), ["b", "a"]);
    assert_eq!(loaded.dataset.y(), [1.0, 3.0, 2.0, 4.0]);
    assert_eq!(loaded.source_rows, [0, 2, 1, 3]);
}

#[test]
fn bad_cells_name_row_and_column() {
    let text = "cluster,y,x1,x2\n1,1,1,1\n1,2,2,2\n2,3,3,3\n2,4,4,4\n2,5,oops,5\n";
    let msg = read(text, &Schema::default()).unwrap_err().to_string();
    assert!(msg.contains("row 5") && msg.contains("`x1`") && msg.contains("oops"), "{msg}");
    let text = "cluster,y,x1\n1,1,1\n1,,2\n2,3,3\n";
    let msg = read(text, &Schema::default()).unwrap_err().to_string();
    assert!(msg.contains("row 2") && msg.contains("`y`") && msg.contains("missing"), "{msg}");
    let text = "cluster,y,x1\n1,1,inf\n2,3,3\n";
    assert!(read(text, &Schema::default()).unwrap_err().to_string().contains("non-finite"));
}

#[test]
fn structural_errors() {
    let s = Schema::default();
    assert!(matches!(read("cluster,y,x\n1,1,1\n1,2,2\n", &s), Err(IoError::TooFewClusters { found: 1, .. })));
    assert!(matches!(read("cluster,y,x,x\n1,1,1,1\n2,2,2,2\n", &s), Err(IoError::DuplicateColumn { .. })));
    assert!(matches!(read("cluster,x\n1,1\n2,2\n", &s), Err(IoError::MissingColumn { .. })));
    assert!(matches!(read("cluster,y\n1,1\n2,2\n", &s), Err(IoError::NoPredictors { .. })));
    let missing = std::path::Path::new("/nonexistent/data.csv");
    let msg = csvio::load_dataset(missing, &s).unwrap_err().to_string();
    assert!(msg.contains("/nonexistent/data.csv"), "{msg}");
}

#[test]
fn wide_file_with_time_column() {
    let (n_clusters, p) = (28, 4088);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut text = String::from("patient,y,time");
    for k in 0..p {
        write!(text, ",g{k}").unwrap();
    }
    text.push('\n');
    let mut rows = 0;
    for i in 0..n_clusters {
        let n = if i == 0 { 3 } else { 4 };
        for t in 0..n {
            write!(text, "P{i},{},{}", rng.random::<f64>(), t + 1).unwrap();
            for _ in 0..p {
                write!(text, ",{}", rng.random::<f64>()).unwrap();
            }
            text.push('\n');
            rows += 1;
        }
    }
    assert_eq!(rows, 111);
    let schema = Schema { cluster: "patient".into(), random: vec!["time".into()], ..Schema::default() };
    let ds = read(&text, &schema).unwrap().dataset;
    assert_eq!((ds.n_obs(), ds.n_clusters(), ds.p(), ds.r()), (111, 28, 4088, 2));
    assert_eq!(ds.random_names(), ["(intercept)", "time"]);
}

#[test]
fn write_then_read_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let awkward = [0.1 + 0.2, 1e-300, -2.5e300, 1.0 / 3.0, 5e-324, -0.0, 123456789.123456789];
    let clusters: Vec<Cluster> = (0..4)
        .map(|i| {
            let n = 2 + i;
            let y = (0..n).map(|j| awkward[(i + j) % awkward.len()]).collect();
            let x = (0..n * 3).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect();
            let v = (0..n).flat_map(|j| [1.0, j as f64 * 0.7]).collect();
            let adj = (0..n).map(|_| rng.random::<f64>()).collect();
            Cluster::new(format!("c {i}"), y, x, v).with_adjust(adj)
        })
        .collect();
    let names = ColumnNames {
        predictors: vec!["p1".into(), "p2".into(), "p3".into()],
        random: vec!["(intercept)".into(), "slope".into()],
        adjust: vec!["age".into()],
    };
    let ds = ClusteredDataset::from_clusters_named(clusters, 3, names).unwrap();
    let schema = csvio::schema_for(&ds, "cluster", "y");
    let mut buf = Vec::new();
    csvio::write_dataset(&mut buf, &ds, &schema).unwrap();
    let back = csvio::read_dataset(buf.as_slice(), &schema, "buffer", false).unwrap().dataset;
    assert_eq!(back.cluster_ids(), ds.cluster_ids());
    let bits = |d: &ClusteredDataset| {
        let mut v: Vec<u64> = d.y().iter().map(|x| x.to_bits()).collect();
        for row in 0..d.n_obs() {
            v.extend(d.v_row(row).iter().chain(d.adjust_row(row)).map(|x| x.to_bits()));
            v.extend((0..d.p()).map(|k| d.x_at(row, k).to_bits()));
        }
        v
    };
    assert_eq!(bits(&back), bits(&ds));
    assert_eq!(back.column_names(), ds.column_names());
}

#[test]
fn prediction_rows_may_omit_the_response() {
    let text = "cluster,x\na,1\nb,2\n";
    let loaded = csvio::read_dataset(text.as_bytes(), &Schema::default(), "new.csv", true).unwrap();
    assert!(!loaded.has_response);
    assert_eq!(loaded.dataset.y(), [0.0, 0.0]);
}

proptest::proptest! {
    #[test]
    fn any_finite_values_round_trip(
        cells in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 8..40),
    ) {
        let p = 2;
        let n = cells.len() / (p + 1);
        let clusters = (0..n)
            .map(|j| {
                let row = &cells[j * (p + 1)..(j + 1) * (p + 1)];
                Cluster::intercept_only(format!("g{}", 2 * j / n), vec![row[0]], row[1..].to_vec())
            })
            .collect();
        let ds = ClusteredDataset::from_clusters(clusters, p).unwrap();
        let schema = csvio::schema_for(&ds, "cluster", "y");
        let mut buf = Vec::new();
        csvio::write_dataset(&mut buf, &ds, &schema).unwrap();
        let back = csvio::read_dataset(buf.as_slice(), &schema, "buffer", false).unwrap().dataset;
        let bits = |d: &ClusteredDataset| -> Vec<u64> {
            d.y().iter().copied().chain((0..d.n_obs()).flat_map(|r| (0..p).map(move |k| (r, k))).map(|(r, k)| d.x_at(r, k))).map(f64::to_bits).collect()
        };
        proptest::prop_assert_eq!(bits(&back), bits(&ds));
    }
}
