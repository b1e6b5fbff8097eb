use std::path::Path;
use std::process::{Command, Output};

fn lmmprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmmprobe")).args(args).env_remove("LMMPROBE_WORKERS").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// Small random-intercept simulation (p = 49) in `dir/sim`.
fn simulate(dir: &Path, seed: &str) -> std::path::PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let cfg = dir.join("sim.toml");
    std::fs::write(&cfg, "sim_p = 49\nsim_clusters = 30\n").unwrap();
    let out = dir.join("sim");
    let o = lmmprobe(&["simulate", "--config", p(&cfg), "--seed", seed, "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn fit_writes_three_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "1");
    let out = dir.path().join("fit");
    let o = lmmprobe(&["fit", "--data", p(&sim.join("train.csv")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["coefficients.csv", "variance.json", "trace.csv", "effective_config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(read(&out.join("coefficients.csv")).starts_with("k,name,beta_tilde,s_tilde,p_tilde,beta_bar\n"));
    let v: serde_json::Value = serde_json::from_str(&read(&out.join("variance.json"))).unwrap();
    for key in ["sigma2", "G", "omega0", "alpha0", "tau0"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["converged"], true);
    assert!(read(&out.join("trace.csv")).starts_with("t,cc,loglik\n0,,"));
}

#[test]
fn hitting_the_iteration_cap_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "2");
    let out = dir.path().join("fit");
    let o = lmmprobe(&["fit", "--max-iter", "1", "--data", p(&sim.join("train.csv")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(&read(&out.join("variance.json"))).unwrap();
    assert_eq!(v["converged"], false);
    assert_eq!(v["iterations"], 1);
}

#[test]
fn missing_input_exits_with_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmmprobe(&["fit", "--data", "/no/such/file.csv", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/no/such/file.csv") && err.contains("io:"), "{err}");
}

#[test]
fn simulate_is_reproducible_and_lists_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(&dir.path().join("a"), "5");
    let b = simulate(&dir.path().join("b"), "5");
    for f in ["train.csv", "test.csv", "truth.csv", "params.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(read(&a.join("truth.csv")).starts_with("k,name,gamma_k,beta_k\n"));

    let grid = dir.path().join("grid");
    let o = lmmprobe(&["simulate", "--paper-grid", "--out", p(&grid)]);
    assert!(o.status.success());
    assert_eq!(read(&grid.join("grid.csv")).lines().count(), 97);
    assert!(!grid.join("train.csv").exists());

    let one = dir.path().join("one");
    let o = lmmprobe(&["simulate", "--paper-grid", "--setting", "0", "--out", p(&one)]);
    assert!(o.status.success());
    assert!(read(&one.join("effective_config.toml")).contains("sim_p = 225"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "sim_p = 200\n").unwrap();
    let o = lmmprobe(&["simulate", "--config", p(&bad), "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulation:"));
    let o = lmmprobe(&["simulate", "--setting", "3", "--out", p(&dir.path().join("y"))]);
    assert_ne!(o.status.code(), Some(0), "--setting requires --paper-grid");
}

#[test]
fn cv_writes_one_row_per_fold() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "3");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = lmmprobe(&["cv", "--data", p(&sim.join("train.csv")), "--truth", p(&sim.join("truth.csv")), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("cv1"), run("cv2"));
    assert_eq!(read(&a.join("metrics.csv")).lines().count(), 6);
    assert_eq!(read(&a.join("folds.csv")), read(&b.join("folds.csv")));
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
    let s: serde_json::Value = serde_json::from_str(&read(&a.join("summary.json"))).unwrap();
    assert_eq!(s["folds"], 5);
    assert!(s["mean"]["mcc"].as_f64().is_some());
    assert!(a.join("timing.csv").exists());
}

#[test]
fn predict_keeps_every_input_row() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "4");
    let fit = dir.path().join("fit");
    assert!(lmmprobe(&["fit", "--data", p(&sim.join("train.csv")), "--out", p(&fit)]).status.success());
    let out = dir.path().join("pred");
    let o = lmmprobe(&[
        "predict", "--fit", p(&fit), "--data", p(&sim.join("test.csv")), "--validation", p(&sim.join("train.csv")), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&out.join("predictions.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row,cluster,y_hat_full,y_hat_fixed"));
    assert_eq!(lines.count() + 1, read(&sim.join("test.csv")).lines().count());

    let other = dir.path().join("other.csv");
    std::fs::write(&other, "cluster,y,zz\n1,1,1\n2,2,2\n").unwrap();
    let o = lmmprobe(&["predict", "--fit", p(&fit), "--data", p(&other), "--out", p(&dir.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prediction:"));
}

#[test]
fn bench_writes_one_row_per_setting_and_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = lmmprobe(&["bench", "--p-values", "20,40", "--iterations", "3", "--clusters", "10", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&out.join("bench.csv"));
    assert!(text.starts_with("p,m,iteration,seconds\n"));
    // Two p values plus the doubled-M setting, three iterations each.
    assert_eq!(text.lines().count(), 1 + 3 * 3);
    let s: serde_json::Value = serde_json::from_str(&read(&out.join("scaling.json"))).unwrap();
    assert!(s["r_squared"].as_f64().is_some());
}

#[test]
fn flags_override_the_config_file_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "max_iterations = 7\nworkers = 3\nsim_p = 25\nsim_clusters = 8\n").unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_lmmprobe"))
        .args(["simulate", "--config", p(&cfg), "--max-iter", "9", "--out", p(&out)])
        .env("LMMPROBE_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    let echoed = read(&out.join("effective_config.toml"));
    assert!(echoed.contains("max_iterations = 9"));
    assert!(echoed.contains("workers = 2"), "environment beats the file");
    let o = Command::new(env!("CARGO_BIN_EXE_lmmprobe"))
        .args(["simulate", "--config", p(&cfg), "--workers", "1", "--out", p(&out)])
        .env("LMMPROBE_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(read(&out.join("effective_config.toml")).contains("workers = 1"));

    std::fs::write(&cfg, "max_iteration = 7\n").unwrap();
    let o = lmmprobe(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config:"));
}
