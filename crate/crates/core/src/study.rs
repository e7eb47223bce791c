//! Monte Carlo comparison of the spline HMM with a Gaussian HMM on simulated data.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::DEFAULT_SUPPORT_MARGIN;
use crate::emission::{DensityFn, GridSpec, TensorEmission};
use crate::error::{Error, Result};
use crate::estimation::{estimate, FitReport, ModelSpec, OptimizerConfig, TransitionSpec};
use crate::evaluation::{best_alignment, cross_validate, kld, CvPlan, CvResult};
use crate::hmm::{Emission, HmmModel, SequenceSet};
use crate::simulation::{ScenarioConfig, SimulatedRun};

/// Cross-validation settings of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyCv {
    /// Candidate basis counts, used in both dimensions.
    pub candidates: Vec<usize>,
    pub n_folds: usize,
    pub holdout_fraction: f64,
    /// Jittered restarts of every fold fit.
    pub restarts: usize,
}

impl Default for StudyCv {
    fn default() -> Self {
        StudyCv {
            candidates: (7..=15).collect(),
            n_folds: 10,
            holdout_fraction: 0.1,
            restarts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub cv: StudyCv,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Points per dimension of the KLD grid over the fitted spline support.
    #[serde(default = "default_kld_points")]
    pub kld_points: usize,
    /// Points per dimension of the nonnegativity check of fitted spline densities.
    #[serde(default = "default_validity_points")]
    pub validity_points: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_kld_points() -> usize {
    200
}

fn default_validity_points() -> usize {
    400
}

fn default_margin() -> f64 {
    DEFAULT_SUPPORT_MARGIN
}

impl StudyConfig {
    pub fn new(scenario: ScenarioConfig) -> Self {
        StudyConfig {
            scenario,
            cv: StudyCv::default(),
            optimizer: OptimizerConfig::default(),
            kld_points: default_kld_points(),
            validity_points: default_validity_points(),
            margin: default_margin(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.optimizer.validate()?;
        if self.cv.candidates.is_empty() || self.cv.candidates.iter().any(|&c| c < 4) {
            return Err(Error::invalid("study needs basis-count candidates of at least 4"));
        }
        if self.kld_points < 2 || self.validity_points < 2 {
            return Err(Error::invalid("grids need at least 2 points per dimension"));
        }
        Ok(())
    }

    fn run_seed(&self, run: usize) -> u64 {
        self.scenario.seed.wrapping_add(run as u64)
    }
}

/// Per-run, per-model outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub run: usize,
    pub model: String,
    /// Selected basis count per dimension (spline model only).
    pub basis_counts: Vec<usize>,
    pub converged: bool,
    pub log_likelihood: f64,
    pub accuracy: f64,
    /// KLD of each aligned fitted state from the true state.
    pub kld: Vec<f64>,
    /// Diagonal of the aligned fitted t.p.m.
    pub gamma_diag: Vec<f64>,
    /// Largest |integral - 1| over the fitted spline states (0 for Gaussian).
    pub integral_error: f64,
    /// Smallest density value on the validity grid.
    pub grid_min: f64,
}

impl ModelRecord {
    /// Integrates to one within 1e-6 and is nonnegative on the grid.
    pub fn density_valid(&self) -> bool {
        self.integral_error <= 1e-6 && self.grid_min >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub run: usize,
    pub counts: Vec<usize>,
    pub mean_score: f64,
    pub failed_folds: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub runs: usize,
    pub converged: usize,
    pub mean_accuracy: f64,
    pub median_accuracy: f64,
    pub mean_kld: Vec<f64>,
    pub median_kld: Vec<f64>,
    pub mean_gamma_diag: Vec<f64>,
    pub all_densities_valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResults {
    pub records: Vec<ModelRecord>,
    pub cv: Vec<CvRecord>,
    pub failures: Vec<RunFailure>,
    pub summaries: Vec<ModelSummary>,
}

pub const SPLINE: &str = "spline";
pub const GAUSSIAN: &str = "gaussian";

struct RunOutcome {
    records: Vec<ModelRecord>,
    cv: Vec<CvRecord>,
}

fn score_model(
    run: usize,
    name: &str,
    rep: &FitReport,
    sim: &SimulatedRun,
    cfg: &StudyConfig,
    kld_grid: &GridSpec,
    counts: Vec<usize>,
) -> Result<ModelRecord> {
    let n = cfg.scenario.tpm.n_states();
    let decoded = rep.model.viterbi(&sim.sequence)?;
    let (perm, accuracy) = best_alignment(&sim.states, &decoded, n)?;
    let model = rep.model.permuted(&perm)?;
    let kld = (0..n)
        .map(|i| kld(cfg.scenario.emissions.state_density(i), &model.emissions[i] as &dyn DensityFn, kld_grid))
        .collect::<Result<Vec<_>>>()?;
    let gamma_diag = match model.transition_matrix() {
        Some(m) => (0..n).map(|i| m.get(i, i)).collect(),
        None => Vec::new(),
    };
    let (integral_error, grid_min) = density_validity(&model, cfg.validity_points)?;
    Ok(ModelRecord {
        run,
        model: name.to_string(),
        basis_counts: counts,
        converged: rep.converged,
        log_likelihood: rep.log_likelihood,
        accuracy,
        kld,
        gamma_diag,
        integral_error,
        grid_min,
    })
}

/// Largest integral error and smallest grid value over the spline states of `model`.
pub fn density_validity(model: &HmmModel, points: usize) -> Result<(f64, f64)> {
    let mut err: f64 = 0.0;
    let mut min = f64::INFINITY;
    for e in &model.emissions {
        if let Emission::Spline(t) = e {
            err = err.max((t.integral() - 1.0).abs());
            let grid = t.support_grid(points);
            min = t.density_grid(&grid)?.into_iter().fold(min, f64::min);
        }
    }
    if min == f64::INFINITY {
        min = 0.0;
    }
    Ok((err, min))
}

fn run_once(cfg: &StudyConfig, run: usize) -> Result<RunOutcome> {
    let seed = cfg.run_seed(run);
    let sim = cfg.scenario.simulate(&format!("run{run}"), &mut cfg.scenario.run_rng(run))?;
    let data = SequenceSet::single(sim.sequence.clone());
    let n = cfg.scenario.tpm.n_states();
    let dim = data.dim();

    let plan = CvPlan {
        holdout_fraction: cfg.cv.holdout_fraction,
        margin: cfg.margin,
        ..CvPlan::within(dim, &cfg.cv.candidates, cfg.cv.n_folds, seed)
    };
    let cv_opt = OptimizerConfig {
        restarts: cfg.cv.restarts,
        seed,
        ..cfg.optimizer
    };
    let cv: CvResult = cross_validate(&data, &plan, n, TransitionSpec::Homogeneous, &cv_opt)?;

    let opt = OptimizerConfig { seed, ..cfg.optimizer };
    let spline_spec = ModelSpec::spline_for_data(&data, n, &cv.selected, cfg.margin)?;
    let spline = estimate(&data, &spline_spec, &opt)?;
    let gauss = estimate(&data, &ModelSpec::gaussian(n, dim)?, &opt)?;

    // shared KLD grid: the fitted spline support rectangle
    let template = TensorEmission::uniform(match &spline_spec.emission {
        crate::estimation::EmissionSpec::Spline { bases } => bases.clone(),
        crate::estimation::EmissionSpec::Gaussian { .. } => unreachable!("spline spec"),
    })?;
    let kld_grid = template.support_grid(cfg.kld_points);

    let records = vec![
        score_model(run, SPLINE, &spline, &sim, cfg, &kld_grid, cv.selected.clone())?,
        score_model(run, GAUSSIAN, &gauss, &sim, cfg, &kld_grid, Vec::new())?,
    ];
    let cv = cv
        .rows
        .iter()
        .map(|r| CvRecord {
            run,
            counts: r.counts.clone(),
            mean_score: r.mean_score,
            failed_folds: r.failed_folds,
            selected: r.counts == cv.selected,
        })
        .collect();
    Ok(RunOutcome { records, cv })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn summarize(records: &[ModelRecord], name: &str, n_states: usize) -> Option<ModelSummary> {
    let rs: Vec<&ModelRecord> = records.iter().filter(|r| r.model == name).collect();
    if rs.is_empty() {
        return None;
    }
    let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
    let per_state = |f: &dyn Fn(&ModelRecord) -> &Vec<f64>, agg: fn(&[f64]) -> f64| -> Vec<f64> {
        (0..n_states)
            .map(|i| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r).get(i).copied()).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    agg(&v)
                }
            })
            .collect()
    };
    Some(ModelSummary {
        model: name.to_string(),
        runs: rs.len(),
        converged: rs.iter().filter(|r| r.converged).count(),
        mean_accuracy: mean(&acc),
        median_accuracy: median(&acc),
        mean_kld: per_state(&|r| &r.kld, mean),
        median_kld: per_state(&|r| &r.kld, median),
        mean_gamma_diag: per_state(&|r| &r.gamma_diag, mean),
        all_densities_valid: rs.iter().all(|r| r.density_valid()),
    })
}

/// Runs every simulation run in parallel; failed runs are listed and left out
/// of the summaries.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResults> {
    cfg.validate()?;
    let outcomes: Vec<Result<RunOutcome>> = (0..cfg.scenario.runs).into_par_iter().map(|r| run_once(cfg, r)).collect();
    let mut records = Vec::new();
    let mut cv = Vec::new();
    let mut failures = Vec::new();
    for (run, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                records.extend(o.records);
                cv.extend(o.cv);
            }
            Err(e) => failures.push(RunFailure {
                run,
                message: e.to_string(),
            }),
        }
    }
    let n = cfg.scenario.tpm.n_states();
    let summaries = [SPLINE, GAUSSIAN]
        .iter()
        .filter_map(|m| summarize(&records, m, n))
        .collect();
    Ok(StudyResults {
        records,
        cv,
        failures,
        summaries,
    })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

impl StudyResults {
    pub fn summary(&self, model: &str) -> Option<&ModelSummary> {
        self.summaries.iter().find(|s| s.model == model)
    }

    /// Writes `runs.csv`, `cv.csv`, `summary.csv` and `failures.csv` into `dir`.
    /// Only deterministic quantities are written.
    pub fn write_csv(&self, dir: &Path, n_states: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        let state_cols = |prefix: &str| (1..=n_states).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();

        let mut w = csv::Writer::from_path(dir.join("runs.csv"))?;
        let mut header = vec!["run".to_string(), "model".into(), "basis_counts".into(), "converged".into()];
        header.extend(["log_likelihood".into(), "accuracy".into()]);
        header.extend(state_cols("kld_state"));
        header.extend(state_cols("gamma_"));
        header.extend(["integral_error".into(), "grid_min".into(), "density_valid".into()]);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.run.to_string(), r.model.clone(), join(&r.basis_counts), r.converged.to_string()];
            row.push(r.log_likelihood.to_string());
            row.push(r.accuracy.to_string());
            row.extend(r.kld.iter().map(|v| v.to_string()));
            row.extend((0..n_states).map(|i| r.gamma_diag.get(i).map_or(String::new(), |v| v.to_string())));
            row.extend([r.integral_error.to_string(), r.grid_min.to_string(), r.density_valid().to_string()]);
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("cv.csv"))?;
        w.write_record(["run", "basis_counts", "mean_score", "failed_folds", "selected"])?;
        for c in &self.cv {
            w.write_record([
                c.run.to_string(),
                join(&c.counts),
                c.mean_score.to_string(),
                c.failed_folds.to_string(),
                c.selected.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        let mut header = vec!["model".to_string(), "runs".into(), "converged".into(), "mean_accuracy".into(), "median_accuracy".into()];
        header.extend(state_cols("mean_kld_state"));
        header.extend(state_cols("median_kld_state"));
        header.extend(state_cols("mean_gamma_"));
        header.push("all_densities_valid".into());
        w.write_record(&header)?;
        for s in &self.summaries {
            let mut row = vec![
                s.model.clone(),
                s.runs.to_string(),
                s.converged.to_string(),
                s.mean_accuracy.to_string(),
                s.median_accuracy.to_string(),
            ];
            row.extend(s.mean_kld.iter().map(|v| v.to_string()));
            row.extend(s.median_kld.iter().map(|v| v.to_string()));
            row.extend(s.mean_gamma_diag.iter().map(|v| v.to_string()));
            row.push(s.all_densities_valid.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
        w.write_record(["run", "message"])?;
        for f in &self.failures {
            w.write_record([f.run.to_string(), f.message.clone()])?;
        }
        w.flush()?;
        Ok(())
    }
}
