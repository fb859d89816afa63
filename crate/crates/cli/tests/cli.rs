//! Black-box checks of the command-line interface: exit codes, file
//! formats and reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use stochstab::schema::{self, GainFile};
use stochstab_core::model::{
    CostWeights, DeterministicSwitchSpec, RegimeJumpSpec, RegimeSystem,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stochstab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn scalar_model() -> (RegimeSystem, CostWeights) {
    let system = RegimeSystem {
        state_dim: 1,
        control_dim: 1,
        n_regimes: 1,
        drift: vec![DMatrix::from_element(1, 1, -1.0)],
        input: vec![DMatrix::from_element(1, 1, 1.0)],
        diffusion: vec![Vec::new()],
        poisson: vec![Vec::new()],
        generator: DMatrix::zeros(1, 1),
        regime_jump: RegimeJumpSpec::identity(1, 1),
        det_switch: DeterministicSwitchSpec::empty(1),
    };
    let weights = CostWeights::autonomous(
        vec![DMatrix::from_element(1, 1, 1.0)],
        vec![DMatrix::from_element(1, 1, 1.0)],
    );
    (system, weights)
}

/// Two scalar regimes with a slow switching chain, suitable for the
/// rare-switching series method with eps = 0.01.
fn slow_switching_model() -> (RegimeSystem, CostWeights) {
    let system = RegimeSystem {
        state_dim: 1,
        control_dim: 1,
        n_regimes: 2,
        drift: vec![
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, -2.0),
        ],
        input: vec![DMatrix::from_element(1, 1, 1.0); 2],
        diffusion: vec![Vec::new(), Vec::new()],
        poisson: vec![Vec::new(), Vec::new()],
        generator: DMatrix::from_row_slice(2, 2, &[-0.01, 0.01, 0.02, -0.02]),
        regime_jump: RegimeJumpSpec::identity(2, 1),
        det_switch: DeterministicSwitchSpec::empty(1),
    };
    let weights = CostWeights::autonomous(
        vec![DMatrix::from_element(1, 1, 1.0); 2],
        vec![DMatrix::from_element(1, 1, 1.0); 2],
    );
    (system, weights)
}

fn write_model(dir: &Path, name: &str, system: &RegimeSystem, weights: &CostWeights) -> PathBuf {
    let path = dir.join(name);
    let file = schema::model_to_file(system, weights);
    std::fs::write(&path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
    path
}

fn read_gains(path: &Path) -> GainFile {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_accepts_a_good_model_and_rejects_a_bad_one() {
    let dir = tempfile::tempdir().unwrap();
    let (system, weights) = scalar_model();
    let good = write_model(dir.path(), "good.json", &system, &weights);
    let out = bin().arg("validate").arg("--model").arg(&good).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // Generator row no longer sums to zero.
    let mut bad_sys = system.clone();
    bad_sys.generator[(0, 0)] = 0.5;
    let bad = write_model(dir.path(), "bad.json", &bad_sys, &weights);
    let out = bin().arg("validate").arg("--model").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Q[0]"));
}

#[test]
fn usage_errors_exit_with_code_2() {
    // Missing required --model.
    assert_eq!(run(&["validate"]).status.code(), Some(2));
    // Unreadable model path.
    assert_eq!(
        run(&["validate", "--model", "/nonexistent/model.json"]).status.code(),
        Some(2)
    );
    // Unknown subcommand.
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn synthesize_writes_the_scalar_root_with_feedback_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let (system, weights) = scalar_model();
    let model = write_model(dir.path(), "model.json", &system, &weights);
    let out_path = dir.path().join("gains.json");
    let out = bin()
        .args(["synthesize", "--method", "care"])
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let gains = read_gains(&out_path);
    let g = gains.g[0][0][0][0];
    assert!((g - (2.0f64.sqrt() - 1.0)).abs() < 1e-10, "G = {g}");
    let f = gains.f.as_ref().unwrap()[0][0][0][0];
    assert!((f - g).abs() < 1e-12);
    assert!(gains.residual.iter().flatten().all(|&r| r <= 1e-10));
    let meta = gains.meta.as_ref().unwrap();
    assert_eq!(meta.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(meta.model_sha256.len(), 64);
}

#[test]
fn finite_horizon_method_approaches_the_algebraic_solution() {
    let dir = tempfile::tempdir().unwrap();
    let (system, weights) = scalar_model();
    let model = write_model(dir.path(), "model.json", &system, &weights);
    let care = dir.path().join("care.json");
    let ode = dir.path().join("ode.json");
    assert!(bin()
        .args(["synthesize", "--method", "care"])
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(&care)
        .status()
        .unwrap()
        .success());
    assert!(bin()
        .args(["synthesize", "--method", "riccati-ode", "--horizon", "20", "--dt-g", "0.001"])
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(&ode)
        .status()
        .unwrap()
        .success());
    let g_care = read_gains(&care).g[0][0][0][0];
    let g_ode = read_gains(&ode).g[0][0][0][0];
    assert!((g_care - g_ode).abs() < 1e-6, "care {g_care} vs ode {g_ode}");
}

#[test]
fn series_method_agrees_with_the_direct_solve_for_small_eps() {
    let dir = tempfile::tempdir().unwrap();
    let (system, weights) = slow_switching_model();
    let model = write_model(dir.path(), "model.json", &system, &weights);
    let care = dir.path().join("care.json");
    let series = dir.path().join("series.json");
    assert!(bin()
        .args(["synthesize", "--method", "care"])
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(&care)
        .status()
        .unwrap()
        .success());
    assert!(bin()
        .args(["synthesize", "--method", "perturb1", "--eps", "0.01", "--order", "2"])
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(&series)
        .status()
        .unwrap()
        .success());
    for i in 0..2 {
        let direct = read_gains(&care).g[i][0][0][0];
        let approx = read_gains(&series).g[i][0][0][0];
        assert!((direct - approx).abs() < 1e-6, "regime {i}: {direct} vs {approx}");
    }
}

#[test]
fn single_path_csv_has_the_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (system, weights) = scalar_model();
    let model = write_model(dir.path(), "model.json", &system, &weights);
    let out_path = dir.path().join("traj.csv");
    assert!(bin()
        .arg("simulate")
        .arg("--model")
        .arg(&model)
        .args(["--x0", "1", "--T", "1", "--dt", "0.01", "--seed", "5"])
        .arg("--out")
        .arg(&out_path)
        .status()
        .unwrap()
        .success());
    let text = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# version="));
    assert!(lines.next().unwrap().starts_with("# command="));
    assert!(lines.next().unwrap().starts_with("# model_sha256="));
    assert_eq!(lines.next().unwrap(), "time,x_0,regime,eta,u_0,event_kind");
    let rows: Vec<&str> = lines.collect();
    // No events in this model, so exactly the base grid.
    assert_eq!(rows.len(), 101);
    let first: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], "1");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (system, weights) = scalar_model();
    let model = write_model(dir.path(), "model.json", &system, &weights);
    let out_path = dir.path().join("batch.csv");
    let mut dumps = Vec::new();
    for _ in 0..2 {
        assert!(bin()
            .arg("simulate")
            .arg("--model")
            .arg(&model)
            .args(["--x0", "1", "--T", "1", "--dt", "0.01", "--seed", "5", "--paths", "4"])
            .arg("--out")
            .arg(&out_path)
            .status()
            .unwrap()
            .success());
        dumps.push(std::fs::read(&out_path).unwrap());
    }
    assert_eq!(dumps[0], dumps[1]);
}

#[test]
fn model_roundtrip_through_the_file_format_is_lossless() {
    let (system, weights) = slow_switching_model();
    let file = schema::model_to_file(&system, &weights);
    let json = serde_json::to_string(&file).unwrap();
    let parsed: schema::ModelFile = serde_json::from_str(&json).unwrap();
    let (system2, weights2) = schema::file_to_model(&parsed).unwrap();
    assert_eq!(system, system2);
    assert_eq!(weights, weights2);
}
