//! Model artifact persistence and the checked-in golden file.

use std::fs;
use std::path::PathBuf;

use splinehmm::estimation::{estimate, ModelSpec, OptimizerConfig};
use splinehmm::io::{load_model, save_model, ColumnScaling, FitMetadata, ModelArtifact, Standardization, MODEL_FORMAT};
use splinehmm::simulation::ScenarioConfig;
use splinehmm::{Emission, Error, HmmModel, SequenceSet, SplineBasis, TensorEmission, TransitionMatrix};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_model.json")
}

fn golden_artifact() -> ModelArtifact {
    let bases = vec![
        SplineBasis::build(0, 5, 0.0, 10.0).unwrap(),
        SplineBasis::build(1, 5, -2.0, 2.0).unwrap(),
    ];
    let emission = |shift: usize| {
        let beta: Vec<f64> = (0..25)
            .map(|k| if k == 0 { 0.0 } else { ((k * 7 + shift) % 11) as f64 / 4.0 - 1.25 })
            .collect();
        Emission::Spline(TensorEmission::from_beta(bases.clone(), beta).unwrap())
    };
    let tpm = TransitionMatrix::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    let model = HmmModel::stationary(tpm, vec![emission(0), emission(5)]).unwrap();
    let mut a = ModelArtifact::new(ModelSpec::spline(2, bases).unwrap(), model);
    a.standardization = Standardization {
        columns: vec![ColumnScaling {
            column: "angle".into(),
            mean: 0.125,
            sd: 1.5,
        }],
    };
    a
}

#[test]
fn golden_file_matches_the_writer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    save_model(&golden_artifact(), &out).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::copy(&out, golden_path()).unwrap();
    }
    assert_eq!(fs::read_to_string(&out).unwrap(), fs::read_to_string(golden_path()).unwrap());
    assert_eq!(load_model(&golden_path()).unwrap(), golden_artifact());
}

#[test]
fn fitted_model_round_trips_exactly() {
    let scenario = ScenarioConfig {
        length: 400,
        ..ScenarioConfig::copula_gamma_default()
    };
    let run = scenario.simulate("r", &mut scenario.run_rng(0)).unwrap();
    let data = SequenceSet::single(run.sequence);
    let spec = ModelSpec::spline_for_data(&data, 2, &[6, 6], 0.01).unwrap();
    let rep = estimate(&data, &spec, &OptimizerConfig { restarts: 0, ..Default::default() }).unwrap();
    let mut artifact = ModelArtifact::new(spec, rep.model.clone());
    artifact.fit = Some(FitMetadata::from(&rep));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit.json");
    save_model(&artifact, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, artifact);
    let ll = back.model.joint_log_likelihood(&data).unwrap();
    assert!((ll - rep.model.joint_log_likelihood(&data).unwrap()).abs() <= 1e-10);
}

#[test]
fn wrong_version_and_truncation_are_reported() {
    let text = fs::read_to_string(golden_path()).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let other = dir.path().join("v.json");
    fs::write(&other, text.replace(MODEL_FORMAT, "splinehmm-model/0")).unwrap();
    assert!(matches!(load_model(&other), Err(Error::VersionMismatch { found, .. }) if found == "splinehmm-model/0"));

    let cut = dir.path().join("t.json");
    fs::write(&cut, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_model(&cut), Err(Error::CorruptFile(_))));

    // structurally valid JSON whose spline coefficients do not match the bases
    let bad = dir.path().join("b.json");
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["model"]["emissions"][0]["beta"].as_array_mut().unwrap().pop();
    fs::write(&bad, v.to_string()).unwrap();
    assert!(matches!(load_model(&bad), Err(Error::CorruptFile(_))));
}
