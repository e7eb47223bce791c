//! End-to-end runs of the `splinehmm` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use splinehmm::estimation::ModelSpec;
use splinehmm::io::{load_model, save_model, ColumnScaling, DatasetSchema, ModelArtifact, Standardization};
use splinehmm::simulation::{ScenarioConfig, ScenarioEmissions};
use splinehmm::{
    CovariateTransition, Emission, HmmModel, InitialLaw, SplineBasis, TensorEmission, Transition, TransitionMatrix,
};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splinehmm"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed");
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

/// Simulated Gaussian-scenario run 0 with `length` observations; returns the observation file.
fn gaussian_data(dir: &Path, length: usize) -> PathBuf {
    ok(
        dir,
        &["simulate", "--preset", "gaussian", "--runs", "1", "--length", &length.to_string(), "--out", "sim"],
    );
    dir.join("sim/run_000_observations.csv")
}

fn report_ll(path: &Path) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["log_likelihood"].as_f64().unwrap()
}

#[test]
fn simulate_is_deterministic_and_sized() {
    let tmp = TempDir::new().unwrap();
    for out in ["a", "b"] {
        ok(tmp.path(), &["simulate", "--runs", "3", "--length", "2000", "--seed", "1", "--out", out]);
    }
    let files: Vec<_> = fs::read_dir(tmp.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 6);
    for f in files {
        let a = fs::read(tmp.path().join("a").join(&f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&f)).unwrap();
        assert_eq!(a, b, "{f:?} differs");
    }
    assert_eq!(csv_rows(&tmp.path().join("a/run_002_observations.csv")).len(), 2000);
    let states = csv_rows(&tmp.path().join("a/run_000_states.csv"));
    assert_eq!(states.len(), 2000);
    assert!(states.iter().all(|r| r[2] == *"1" || r[2] == *"2"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    let args = ["simulate", "--runs", "1", "--length", "50", "--out", "sim"];
    ok(tmp.path(), &args);
    let again = run(tmp.path(), &args);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(tmp.path(), &forced);
}

#[test]
fn fit_writes_artifact_and_report_and_warm_start_does_not_lose() {
    let tmp = TempDir::new().unwrap();
    let data = gaussian_data(tmp.path(), 400);
    let data = data.to_str().unwrap();
    ok(
        tmp.path(),
        &["fit", "--data", data, "--obs", "y1,y2", "--states", "2", "--basis", "6", "--restarts", "0", "--out", "m.json"],
    );
    let first = report_ll(&tmp.path().join("m.report.json"));
    assert!(first.is_finite());
    let art = load_model(&tmp.path().join("m.json")).unwrap();
    assert_eq!(art.spec.num_basis(), Some(vec![6, 6]));
    assert!((art.fit.unwrap().log_likelihood - first).abs() < 1e-12);

    ok(tmp.path(), &["fit", "--data", data, "--init", "m.json", "--restarts", "0", "--out", "m2.json"]);
    let second = report_ll(&tmp.path().join("m2.report.json"));
    assert!(second >= first - 1e-9, "{second} < {first}");
}

#[test]
fn missing_input_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["fit", "--data", "absent.csv", "--obs", "y1", "--states", "2", "--basis", "6", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
    assert!(!tmp.path().join("m.json").exists());
}

#[test]
fn iteration_cap_exits_with_one_unless_allowed() {
    let tmp = TempDir::new().unwrap();
    let data = gaussian_data(tmp.path(), 200);
    let data = data.to_str().unwrap();
    let base = ["fit", "--data", data, "--obs", "y1,y2", "--states", "2", "--family", "gaussian", "--max-iter", "2"];
    let mut capped = base.to_vec();
    capped.extend(["--restarts", "0", "--out", "a.json"]);
    assert_eq!(run(tmp.path(), &capped).status.code(), Some(1));
    assert!(tmp.path().join("a.json").exists());
    let mut allowed = base.to_vec();
    allowed.extend(["--restarts", "0", "--out", "b.json", "--allow-nonconverged"]);
    ok(tmp.path(), &allowed);
}

#[test]
fn config_file_supplies_settings_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let data = gaussian_data(tmp.path(), 300);
    let config = format!(
        "[data]\npath = {:?}\nobservations = [\"y1\", \"y2\"]\n\n[model]\nstates = 3\nfamily = \"gaussian\"\n\n[optimizer]\nrestarts = 0\n",
        data.to_str().unwrap()
    );
    fs::write(tmp.path().join("run.toml"), config).unwrap();
    ok(tmp.path(), &["--config", "run.toml", "fit", "--states", "2", "--out", "m.json"]);
    let art = load_model(&tmp.path().join("m.json")).unwrap();
    assert_eq!(art.spec.n_states, 2);
    assert!(matches!(art.model.emissions[0], Emission::Gaussian(_)));

    fs::write(tmp.path().join("bad.toml"), "[model]\nstatez = 2\n").unwrap();
    let out = run(tmp.path(), &["--config", "bad.toml", "fit", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cv_table_has_one_row_per_candidate_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = gaussian_data(tmp.path(), 300);
    let data = data.to_str().unwrap();
    let common = ["cv", "--data", data, "--obs", "y1,y2", "--states", "2", "--folds", "2", "--seed", "4", "--restarts", "0"];
    for (table, model) in [("t1.csv", "m1.json"), ("t2.csv", "m2.json")] {
        let mut args = common.to_vec();
        args.extend(["--candidates", "7..15", "--table", table, "--out", model]);
        ok(tmp.path(), &args);
    }
    let rows = csv_rows(&tmp.path().join("t1.csv"));
    assert_eq!(rows.len(), 9);
    assert_eq!(rows.iter().filter(|r| &r[4] == "true").count(), 1);
    assert_eq!(fs::read(tmp.path().join("t1.csv")).unwrap(), fs::read(tmp.path().join("t2.csv")).unwrap());

    let mut single = common.to_vec();
    single.extend(["--candidates", "6", "--table", "t3.csv", "--out", "m3.json"]);
    ok(tmp.path(), &single);
    let rows = csv_rows(&tmp.path().join("t3.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "6x6");
    let art = load_model(&tmp.path().join("m3.json")).unwrap();
    assert_eq!(art.spec.num_basis(), Some(vec![6, 6]));
}

fn schema(obs: &[&str], covariates: &[&str]) -> DatasetSchema {
    DatasetSchema {
        id_column: Some("sequence".into()),
        observations: obs.iter().map(|s| s.to_string()).collect(),
        covariates: covariates.iter().map(|s| s.to_string()).collect(),
        ..DatasetSchema::default()
    }
}

#[test]
fn decoding_with_the_generating_model_recovers_the_states() {
    let tmp = TempDir::new().unwrap();
    let data = gaussian_data(tmp.path(), 1000);
    let scenario = ScenarioConfig::gaussian_default();
    let ScenarioEmissions::Gaussian { states } = &scenario.emissions else {
        unreachable!("gaussian preset")
    };
    let emissions = states.iter().cloned().map(Emission::Gaussian).collect();
    let model = HmmModel::stationary(scenario.tpm.clone(), emissions).unwrap();
    let mut art = ModelArtifact::new(ModelSpec::gaussian(2, 2).unwrap(), model);
    art.schema = Some(schema(&["y1", "y2"], &[]));
    save_model(&art, &tmp.path().join("truth.json")).unwrap();

    ok(tmp.path(), &["decode", "--model", "truth.json", "--data", data.to_str().unwrap(), "--out", "dec.csv"]);
    let decoded = csv_rows(&tmp.path().join("dec.csv"));
    let truth = csv_rows(&tmp.path().join("sim/run_000_states.csv"));
    assert_eq!(decoded.len(), 1000);
    let hits = decoded.iter().zip(&truth).filter(|(d, t)| d[2] == t[2]).count();
    assert!(hits as f64 / 1000.0 >= 0.9, "accuracy {}", hits as f64 / 1000.0);
}

#[test]
fn one_state_model_decodes_to_ones() {
    let tmp = TempDir::new().unwrap();
    let data = gaussian_data(tmp.path(), 120);
    let data = data.to_str().unwrap();
    ok(
        tmp.path(),
        &["fit", "--data", data, "--obs", "y1,y2", "--id-column", "sequence", "--states", "1", "--basis", "5", "--restarts", "0", "--out", "one.json"],
    );
    ok(tmp.path(), &["decode", "--model", "one.json", "--data", data, "--out", "dec.csv"]);
    let rows = csv_rows(&tmp.path().join("dec.csv"));
    assert_eq!(rows.len(), 120);
    assert!(rows.iter().all(|r| &r[2] == "1"));
}

fn spline_emissions(bases: &[SplineBasis]) -> Vec<Emission> {
    let n: usize = bases.iter().map(|b| b.num_basis()).product();
    (0..2)
        .map(|s| {
            let beta = (0..n).map(|k| if k == 0 { 0.0 } else { ((k * 5 + 3 * s) % 7) as f64 / 3.0 - 1.0 }).collect();
            Emission::Spline(TensorEmission::from_beta(bases.to_vec(), beta).unwrap())
        })
        .collect()
}

/// Trapezoid-weighted sum over an equispaced 2-D grid file.
fn riemann(path: &Path, points: usize) -> f64 {
    let rows = csv_rows(path);
    let x: Vec<[f64; 3]> = rows.iter().map(|r| [0, 1, 2].map(|k| r[k].parse().unwrap())).collect();
    let dx = (x[x.len() - 1][0] - x[0][0]) / (points - 1) as f64;
    let dy = (x[x.len() - 1][1] - x[0][1]) / (points - 1) as f64;
    let w = |k: usize| if k == 0 || k == points - 1 { 0.5 } else { 1.0 };
    x.iter()
        .enumerate()
        .map(|(k, p)| w(k / points) * w(k % points) * p[2])
        .sum::<f64>()
        * dx
        * dy
}

#[test]
fn exported_grids_have_the_requested_size_and_unit_mass() {
    let tmp = TempDir::new().unwrap();
    let bases = vec![SplineBasis::build(0, 6, 0.0, 4.0).unwrap(), SplineBasis::build(1, 7, -1.0, 3.0).unwrap()];
    let tpm = TransitionMatrix::new(vec![vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
    let model = HmmModel::stationary(tpm, spline_emissions(&bases)).unwrap();
    let mut art = ModelArtifact::new(ModelSpec::spline(2, bases).unwrap(), model);
    art.schema = Some(schema(&["speed", "angle"], &[]));
    save_model(&art, &tmp.path().join("m.json")).unwrap();

    ok(tmp.path(), &["export-density", "--model", "m.json", "--points", "100", "--out", "grid"]);
    for i in 1..=2 {
        let path = tmp.path().join(format!("grid/density_state{i}.csv"));
        let header = csv::Reader::from_path(&path).unwrap().headers().unwrap().clone();
        assert_eq!(header.iter().collect::<Vec<_>>(), ["speed", "angle", "density"]);
        assert_eq!(csv_rows(&path).len(), 10_000);
        let mass = riemann(&path, 100);
        assert!((mass - 1.0).abs() < 1e-2, "state {i} mass {mass}");
    }
    assert!(!tmp.path().join("grid/steady_state.csv").exists());
    let out = run(tmp.path(), &["export-density", "--model", "m.json", "--out", "g2", "--curve-from", "0", "--curve-to", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn covariate_model_exports_a_steady_state_curve() {
    let tmp = TempDir::new().unwrap();
    let bases = vec![SplineBasis::build(0, 5, 0.0, 1.0).unwrap(), SplineBasis::build(1, 5, 0.0, 1.0).unwrap()];
    let gamma = TransitionMatrix::new(vec![vec![0.948, 0.052], vec![0.034, 0.966]]).unwrap();
    let mut c = CovariateTransition::from_matrix(&gamma, 1).unwrap();
    let mut slopes = c.slopes().to_vec();
    slopes[1] = 0.8;
    c = CovariateTransition::new(2, 1, c.intercepts().to_vec(), slopes).unwrap();
    let model = HmmModel::new(Transition::Covariate { model: c.clone() }, InitialLaw::Stationary, spline_emissions(&bases)).unwrap();
    let mut art = ModelArtifact::new(ModelSpec::spline(2, bases).unwrap().with_covariates(1), model);
    art.schema = Some(schema(&["y1", "y2"], &["minute"]));
    art.standardization = Standardization {
        columns: vec![ColumnScaling {
            column: "minute".into(),
            mean: 45.0,
            sd: 20.0,
        }],
    };
    save_model(&art, &tmp.path().join("cov.json")).unwrap();

    ok(
        tmp.path(),
        &["export-density", "--model", "cov.json", "--points", "20", "--out", "grid", "--curve-from", "0", "--curve-to", "90", "--curve-points", "31"],
    );
    let rows = csv_rows(&tmp.path().join("grid/steady_state.csv"));
    assert_eq!(rows.len(), 31);
    for r in &rows {
        let minute: f64 = r[0].parse().unwrap();
        let p: Vec<f64> = (1..=2).map(|k| r[k].parse().unwrap()).collect();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        let expected = c.steady_state_curve(&[vec![(minute - 45.0) / 20.0]]).unwrap();
        assert!((p[0] - expected[0][0]).abs() < 1e-12);
    }
}
