//! End-to-end behavior of the fitting routines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splinehmm::estimation::kmeans::cluster_spline;
use splinehmm::estimation::{estimate, fit, fit_iid_spline, refit, BfgsConfig, IidSplineObjective, ModelSpec, OptimizerConfig};
use splinehmm::simulation::ScenarioConfig;
use splinehmm::{Emission, SequenceSet, Sequence, TensorEmission};

#[test]
fn gaussian_hmm_recovers_persistent_diagonal() {
    let scenario = ScenarioConfig::gaussian_default();
    let run = scenario.simulate("g", &mut scenario.run_rng(3)).unwrap();
    let data = SequenceSet::single(run.sequence);
    let rep = estimate(&data, &ModelSpec::gaussian(2, 2).unwrap(), &OptimizerConfig::default()).unwrap();
    assert!(rep.converged);
    let m = rep.model.transition_matrix().unwrap();
    for i in 0..2 {
        assert!((m.get(i, i) - 0.97).abs() <= 0.02, "gamma_{i}{i} = {}", m.get(i, i));
    }
}

#[test]
fn single_state_fit_equals_iid_density_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let rows: Vec<Vec<f64>> = (0..400)
        .map(|_| {
            let a: f64 = rng.random::<f64>();
            vec![a * a, 0.5 * a + 0.5 * rng.random::<f64>()]
        })
        .collect();
    let data = SequenceSet::single(Sequence::from_rows("iid", &rows).unwrap());
    let spec = ModelSpec::spline_for_data(&data, 1, &[6, 6], 0.01).unwrap();
    let cfg = OptimizerConfig {
        restarts: 0,
        init_blend: 0.0,
        ..Default::default()
    };
    let zeros = vec![0.0; spec.n_params()];
    let hmm = fit(&data, &spec, &zeros, &cfg).unwrap();

    let splinehmm::estimation::EmissionSpec::Spline { bases } = &spec.emission else { unreachable!() };
    let pooled = data.pooled();
    let iid = IidSplineObjective::new(TensorEmission::uniform(bases.clone()).unwrap(), &pooled).unwrap();
    let (_, ll, _) = fit_iid_spline(&iid, zeros.clone(), &cfg.bfgs()).unwrap();
    assert!((hmm.log_likelihood - ll).abs() <= 1e-6, "{} vs {ll}", hmm.log_likelihood);
}

#[test]
fn restarting_at_the_optimum_is_immediate() {
    let scenario = ScenarioConfig {
        length: 600,
        ..ScenarioConfig::copula_gamma_default()
    };
    let run = scenario.simulate("c", &mut scenario.run_rng(0)).unwrap();
    let data = SequenceSet::single(run.sequence);
    let spec = ModelSpec::spline_for_data(&data, 2, &[6, 6], 0.01).unwrap();
    let cfg = OptimizerConfig {
        restarts: 0,
        rel_tol: 0.0,
        ..Default::default()
    };
    let first = estimate(&data, &spec, &cfg).unwrap();
    assert!(first.converged);
    let again = fit(&data, &spec, &first.parameters, &cfg).unwrap();
    assert!(again.iterations <= 2, "{} iterations", again.iterations);
    assert!((again.log_likelihood - first.log_likelihood).abs() < 1e-8);
}

#[test]
fn warm_start_never_lowers_the_likelihood() {
    let scenario = ScenarioConfig {
        length: 500,
        ..ScenarioConfig::gaussian_default()
    };
    let run = scenario.simulate("w", &mut scenario.run_rng(1)).unwrap();
    let data = SequenceSet::single(run.sequence);
    let spec = ModelSpec::spline_for_data(&data, 2, &[5, 5], 0.01).unwrap();
    let cfg = OptimizerConfig {
        restarts: 1,
        max_iter: 30,
        ..Default::default()
    };
    let first = estimate(&data, &spec, &cfg).unwrap();
    let second = refit(&data, &spec, &first.model, &cfg).unwrap();
    assert!(second.log_likelihood >= first.log_likelihood);
}

#[test]
fn non_finite_start_is_an_init_failure() {
    let rows = vec![vec![0.5, 0.5]; 10];
    let data = SequenceSet::single(Sequence::from_rows("s", &rows).unwrap());
    let spec = ModelSpec::gaussian(2, 2).unwrap();
    let mut init = vec![0.0; spec.n_params()];
    init[0] = f64::NAN;
    assert!(matches!(
        fit(&data, &spec, &init, &OptimizerConfig::default()),
        Err(splinehmm::Error::InitFailure)
    ));
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let scenario = ScenarioConfig {
        length: 400,
        ..ScenarioConfig::copula_gamma_default()
    };
    let run = scenario.simulate("c", &mut scenario.run_rng(2)).unwrap();
    let data = SequenceSet::single(run.sequence);
    let spec = ModelSpec::spline_for_data(&data, 2, &[7, 7], 0.01).unwrap();
    let cfg = OptimizerConfig {
        restarts: 0,
        max_iter: 3,
        ..Default::default()
    };
    let rep = estimate(&data, &spec, &cfg).unwrap();
    assert!(!rep.converged);
    assert!(rep.log_likelihood.is_finite());
}

#[test]
fn cluster_spline_init_is_a_valid_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let b = |d| splinehmm::SplineBasis::build(d, 6, -0.01, 1.01).unwrap();
    let template = TensorEmission::uniform(vec![b(0), b(1)]).unwrap();
    let t = cluster_spline(&template, &refs, &BfgsConfig::default()).unwrap();
    assert!((t.integral() - 1.0).abs() < 1e-9);
    let model_emission = Emission::Spline(t);
    assert!(model_emission.in_support(&[0.5, 0.5]));
}
