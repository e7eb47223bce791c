//! Analytic log-likelihood gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splinehmm::estimation::{unpack, ModelSpec, Objective};
use splinehmm::{SequenceSet, Sequence, SplineBasis};

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, covariates: usize) -> Sequence {
    let rows: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]).collect();
    let s = Sequence::from_rows("s", &rows).unwrap();
    if covariates == 0 {
        return s;
    }
    let x = (0..len).map(|_| (0..covariates).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    s.with_covariates(x).unwrap()
}

/// Largest relative error between the analytic and central-difference gradient.
fn max_rel_error(spec: &ModelSpec, data: &SequenceSet, theta: &[f64]) -> f64 {
    let obj = Objective::new(spec, data).unwrap();
    let e = obj.evaluate(theta).unwrap();
    // objective agrees with the model-level likelihood
    let direct = unpack(theta, spec).unwrap().joint_log_likelihood(data).unwrap();
    assert!((direct - e.log_likelihood).abs() < 1e-9 * direct.abs(), "{direct} vs {}", e.log_likelihood);
    let mut worst = 0.0f64;
    let scale = e.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-3);
    for k in 0..theta.len() {
        let h = 1e-5;
        let mut up = theta.to_vec();
        up[k] += h;
        let mut dn = theta.to_vec();
        dn[k] -= h;
        let fd = (obj.value(&up).unwrap() - obj.value(&dn).unwrap()) / (2.0 * h);
        let err = (fd - e.gradient[k]).abs() / (fd.abs().max(e.gradient[k].abs()).max(1e-2 * scale));
        worst = worst.max(err);
    }
    worst
}

fn spline_spec(n_states: usize) -> ModelSpec {
    let b = |d| SplineBasis::build(d, 5, 0.0, 1.0).unwrap();
    ModelSpec::spline(n_states, vec![b(0), b(1)]).unwrap()
}

#[test]
fn spline_homogeneous_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let data = SequenceSet::new(vec![random_sequence(&mut rng, 50, 0), random_sequence(&mut rng, 30, 0)]).unwrap();
        let spec = spline_spec(2);
        let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let err = max_rel_error(&spec, &data, &theta);
        assert!(err <= 1e-4, "relative error {err}");
    }
}

#[test]
fn spline_with_missing_and_three_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = SequenceSet::single(random_sequence(&mut rng, 50, 0).with_missing(&[0, 7, 8, 49]));
    let spec = spline_spec(3);
    let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert!(max_rel_error(&spec, &data, &theta) <= 1e-4);
}

#[test]
fn gaussian_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = SequenceSet::single(random_sequence(&mut rng, 50, 0));
    let spec = ModelSpec::gaussian(2, 2).unwrap();
    let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.random_range(-0.8..0.8)).collect();
    assert!(max_rel_error(&spec, &data, &theta) <= 1e-4);
}

#[test]
fn covariate_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data = SequenceSet::single(random_sequence(&mut rng, 50, 2));
    let spec = spline_spec(2).with_covariates(2);
    let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert!(max_rel_error(&spec, &data, &theta) <= 1e-4);
}
