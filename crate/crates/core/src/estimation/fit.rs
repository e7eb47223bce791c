//! Maximum-likelihood fitting with jittered restarts.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{HmmModel, SequenceSet};

use super::kmeans::{kmeans_init, InitConfig};
use super::objective::{IidSplineObjective, Objective};
use super::optim::{maximize, BfgsConfig, StopReason};
use super::params::{unpack, ModelSpec, ParameterVector};

/// All optimizer knobs exposed to users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub patience: usize,
    pub max_iter: usize,
    /// Jittered restarts in addition to the unperturbed start.
    pub restarts: usize,
    /// Standard deviation of the Gaussian noise added to the start of each restart.
    pub jitter: f64,
    pub seed: u64,
    /// Iteration cap of the per-cluster spline fits used for starting values.
    pub init_max_iter: usize,
    pub kmeans_seedings: usize,
    /// Weight of the uniform density mixed into each starting spline density.
    pub init_blend: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            grad_tol: 1e-5,
            rel_tol: 1e-8,
            patience: 10,
            max_iter: 2000,
            restarts: 5,
            jitter: 0.25,
            seed: 0,
            init_max_iter: 200,
            kmeans_seedings: 10,
            init_blend: 0.5,
        }
    }
}

impl OptimizerConfig {
    pub fn bfgs(&self) -> BfgsConfig {
        BfgsConfig {
            grad_tol: self.grad_tol,
            rel_tol: self.rel_tol,
            patience: self.patience,
            max_iter: self.max_iter,
            ..BfgsConfig::default()
        }
    }

    pub fn init(&self) -> InitConfig {
        InitConfig {
            seedings: self.kmeans_seedings,
            cluster_fit: BfgsConfig {
                max_iter: self.init_max_iter,
                ..self.bfgs()
            },
            uniform_blend: self.init_blend,
            ..InitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_tol >= 0.0
            && self.rel_tol >= 0.0
            && self.max_iter > 0
            && self.jitter.is_finite()
            && self.jitter >= 0.0
            && self.kmeans_seedings > 0
            && (0.0..=1.0).contains(&self.init_blend);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer configuration {self:?}")))
        }
    }
}

/// Outcome of one fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub model: HmmModel,
    pub parameters: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub status: StopReason,
    /// Observed points outside the spline support at the final parameters.
    pub support_escapes: usize,
    /// Observed points whose mixture density hit the floor at the final parameters.
    pub floored: usize,
    /// Which start produced this fit (0 is the unperturbed start).
    pub restart_index: usize,
    /// Restarts that ended in an error.
    pub failed_restarts: usize,
    pub wall_time_secs: f64,
}

/// Maximizes the joint log-likelihood from `init`.
pub fn fit(data: &SequenceSet, spec: &ModelSpec, init: &[f64], cfg: &OptimizerConfig) -> Result<FitReport> {
    let started = Instant::now();
    let obj = Objective::new(spec, data)?;
    if init.len() != obj.n_params() {
        return Err(Error::DimensionMismatch {
            expected: obj.n_params(),
            got: init.len(),
            context: "initial parameter vector".into(),
        });
    }
    match obj.evaluate(init) {
        Ok(e) if e.log_likelihood.is_finite() && e.gradient.iter().all(|g| g.is_finite()) => {}
        Ok(_) => return Err(Error::InitFailure),
        Err(Error::InvalidArgument(_)) => return Err(Error::InitFailure),
        Err(e) => return Err(e),
    }
    let r = maximize(
        |x| obj.evaluate(x).map(|e| (e.log_likelihood, e.gradient)),
        init.to_vec(),
        &cfg.bfgs(),
    )?;
    let last = obj.evaluate(&r.x)?;
    let model = unpack(&r.x, spec)?;
    Ok(FitReport {
        model,
        converged: r.reason.converged() && r.value.is_finite(),
        parameters: r.x,
        log_likelihood: r.value,
        iterations: r.iterations,
        evaluations: r.evaluations,
        grad_norm: r.grad_norm,
        status: r.reason,
        support_escapes: last.out_of_support,
        floored: last.floored,
        restart_index: 0,
        failed_restarts: 0,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Fits from `init` and from `cfg.restarts` jittered copies of it; keeps the
/// highest log-likelihood, ties going to the lower restart index.
pub fn fit_with_restarts(data: &SequenceSet, spec: &ModelSpec, init: &[f64], cfg: &OptimizerConfig) -> Result<FitReport> {
    cfg.validate()?;
    let started = Instant::now();
    let starts: Vec<Vec<f64>> = (0..=cfg.restarts)
        .map(|r| {
            if r == 0 || cfg.jitter == 0.0 {
                return init.to_vec();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
            let noise = Normal::new(0.0, cfg.jitter).expect("validated jitter");
            init.iter().map(|v| v + noise.sample(&mut rng)).collect()
        })
        .collect();
    let outcomes: Vec<Result<FitReport>> = starts.par_iter().map(|s| fit(data, spec, s, cfg)).collect();
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    let mut best: Option<FitReport> = None;
    let mut first_err = None;
    for (idx, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(mut rep) => {
                rep.restart_index = idx;
                if best.as_ref().is_none_or(|b| rep.log_likelihood > b.log_likelihood) {
                    best = Some(rep);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(mut rep) => {
            rep.failed_restarts = failed;
            rep.wall_time_secs = started.elapsed().as_secs_f64();
            Ok(rep)
        }
        None => Err(first_err.unwrap_or(Error::InitFailure)),
    }
}

/// k-means starting values followed by [`fit_with_restarts`].
pub fn estimate(data: &SequenceSet, spec: &ModelSpec, cfg: &OptimizerConfig) -> Result<FitReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init: ParameterVector = kmeans_init(data, spec, &cfg.init(), &mut rng)?;
    let mut rep = fit_with_restarts(data, spec, &init.values, cfg)?;
    rep.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(rep)
}

/// Standalone i.i.d. spline density fit; returns the free coefficients and
/// the log-likelihood.
pub fn fit_iid_spline(objective: &IidSplineObjective, init: Vec<f64>, cfg: &BfgsConfig) -> Result<(Vec<f64>, f64, StopReason)> {
    let r = maximize(|x| objective.evaluate(x), init, cfg)?;
    Ok((r.x, r.value, r.reason))
}

/// Fitted model paired with the structure it was fitted under.
pub fn refit(data: &SequenceSet, spec: &ModelSpec, start: &HmmModel, cfg: &OptimizerConfig) -> Result<FitReport> {
    let init = ParameterVector::from_model(start, spec)?;
    fit_with_restarts(data, spec, &init.values, cfg)
}
