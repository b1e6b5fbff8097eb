mod common;

use common::random_dataset;
use lmmprobe_core::simulate::{generate, SimulationConfig};
use lmmprobe_core::{fit, predict, EcmConfig, PredictionRequest};

#[test]
fn raw_and_standardized_inputs_predict_the_same() {
    let g = random_dataset(3, 20, 5, 15, 2, 1);
    let raw = &g.dataset;
    let std = raw.standardize().unwrap();
    let f = fit(&std, &EcmConfig { max_iterations: 50, ..EcmConfig::default() }).unwrap();
    let a = predict(&f, &PredictionRequest { target: raw, validation: Some(raw) }).unwrap();
    let b = predict(&f, &PredictionRequest { target: &std, validation: Some(&std) }).unwrap();
    for (x, y) in a.y_hat_full.iter().zip(&b.y_hat_full).chain(a.y_hat_fixed.iter().zip(&b.y_hat_fixed)) {
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
    }
    // Back-transformed coefficients reproduce the signal part on the raw scale.
    let os = f.original_scale();
    for row in 0..raw.n_obs() {
        let on_raw: f64 = (0..raw.p()).map(|k| raw.x_at(row, k) * os.beta[k]).sum::<f64>() + os.intercept_shift;
        let on_std: f64 = (0..std.p()).map(|k| std.x_at(row, k) * f.beta_bar[k]).sum();
        assert!((on_raw - on_std).abs() <= 1e-10 * on_std.abs().max(1.0));
    }
}

#[test]
fn random_effects_only_shift_clusters_with_validation_rows() {
    let sim = generate(&SimulationConfig { seed: 1, ..SimulationConfig::default() }).unwrap();
    let f = fit(&sim.train.standardize().unwrap(), &EcmConfig::default()).unwrap();
    let without = predict(&f, &PredictionRequest { target: &sim.test, validation: None }).unwrap();
    assert_eq!(without.y_hat_full, without.y_hat_fixed);
    assert_eq!(without.y_hat_full.len(), sim.test.n_obs());
    let with = predict(&f, &PredictionRequest { target: &sim.test, validation: Some(&sim.train) }).unwrap();
    assert_eq!(with.y_hat_fixed, without.y_hat_fixed);
    assert_eq!(with.b_hat.len(), sim.test.n_clusters());
    let err = |p: &[f64]| lmmprobe_core::eval::mspe(sim.test.y(), p).unwrap();
    assert!(err(&with.y_hat_full) < err(&with.y_hat_fixed));
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = random_dataset(1, 10, 3, 6, 1, 0);
    let b = random_dataset(1, 10, 3, 7, 1, 0);
    let f = fit(&a.dataset, &EcmConfig { max_iterations: 10, ..EcmConfig::default() }).unwrap();
    let err = predict(&f, &PredictionRequest { target: &b.dataset, validation: None }).unwrap_err();
    assert!(err.to_string().starts_with("prediction:"), "{err}");
}
