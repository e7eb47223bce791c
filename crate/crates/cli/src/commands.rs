//! Subcommand implementations. Each resolves its settings as flag, then
//! config file, then built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use splinehmm::basis::DEFAULT_SUPPORT_MARGIN;
use splinehmm::estimation::{estimate, refit, ModelSpec, OptimizerConfig};
use splinehmm::evaluation::{cross_validate, CvMode, CvPlan};
use splinehmm::io::{load_dataset, load_model, save_model, DatasetSchema, FitMetadata, ModelArtifact, Standardization};
use splinehmm::simulation::ScenarioConfig;
use splinehmm::study::{run_study, StudyConfig, GAUSSIAN, SPLINE};
use splinehmm::{Emission, GridAxis, GridSpec, SequenceSet, Transition};

use crate::config::{basis_counts, Family, FileConfig, Preset};

pub struct Context {
    pub config: FileConfig,
    pub force: bool,
}

pub enum Outcome {
    Done,
    NotConverged,
}

/// 1 for modeling failures, 2 for everything else (bad input, I/O, usage).
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<splinehmm::Error>() {
            return match err {
                splinehmm::Error::InitFailure | splinehmm::Error::EmptyCluster { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Observation columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    obs: Vec<String>,
    /// Column identifying independent sequences.
    #[arg(long)]
    id_column: Option<String>,
    /// Covariate columns driving the transition probabilities.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Interaction terms written `a:b`.
    #[arg(long, value_delimiter = ',')]
    interactions: Vec<String>,
    /// Columns centered and scaled before fitting.
    #[arg(long, value_delimiter = ',')]
    standardize: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Number of hidden states.
    #[arg(long)]
    states: Option<usize>,
    #[arg(long, value_enum)]
    family: Option<Family>,
    /// Basis functions per dimension: one count for all, or one per dimension.
    #[arg(long, value_delimiter = ',')]
    basis: Vec<usize>,
    /// Fraction of the data range added to each side of the spline support.
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OptimizerArgs {
    /// Jittered restarts besides the unperturbed start.
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    rel_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    runs: Option<usize>,
    /// Observations per run.
    #[arg(long)]
    length: Option<usize>,
    /// Base seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: OptimizerArgs,
    /// Optimizer seed (k-means and restart jitter).
    #[arg(long)]
    seed: Option<u64>,
    /// Start from a saved model instead of k-means.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Model artifact to write.
    #[arg(long)]
    out: PathBuf,
    /// Fit report (default: the artifact path with extension `report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Exit 0 even when the optimizer did not converge.
    #[arg(long)]
    allow_nonconverged: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Within,
    Between,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Candidate basis counts, as `7..15` (inclusive) or `7,9,11`.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Share of time points held out per fold (within-sequence mode).
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Seed of the folds and of the optimizer.
    #[arg(long)]
    seed: Option<u64>,
    /// Jittered restarts of each fold fit.
    #[arg(long)]
    cv_restarts: Option<usize>,
    #[command(flatten)]
    opt: OptimizerArgs,
    /// Cross-validation table to write.
    #[arg(long)]
    table: PathBuf,
    /// Artifact of the selected model fitted on all data.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    allow_nonconverged: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Data flags override the schema stored in the model.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Grid points per dimension.
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Covariate varied along the steady-state curve (default: the first).
    /// Other covariates are held at zero, which is their mean when standardized.
    #[arg(long)]
    curve_column: Option<String>,
    /// Start of the curve on the raw covariate scale.
    #[arg(long, requires = "curve_to")]
    curve_from: Option<f64>,
    #[arg(long, requires = "curve_from")]
    curve_to: Option<f64>,
    #[arg(long, default_value_t = 101)]
    curve_points: usize,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Candidate basis counts, as `7..15` (inclusive) or `7,9,11`.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    /// Jittered restarts of each fold fit.
    #[arg(long)]
    cv_restarts: Option<usize>,
    #[command(flatten)]
    opt: OptimizerArgs,
    /// Output directory for the result tables.
    #[arg(long)]
    out: PathBuf,
}

fn ensure_new(paths: &[&Path], force: bool) -> Result<()> {
    if !force {
        for p in paths {
            if p.exists() {
                bail!("refusing to overwrite {} (pass --force)", p.display());
            }
        }
    }
    for p in paths {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Parses `a..b` (inclusive) or a comma-separated list.
fn parse_candidates(s: &str) -> Result<Vec<usize>> {
    let bad = || anyhow!("cannot parse candidates `{s}`; expected `7..15` or `7,9,11`");
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn resolve_data(ctx: &Context, a: &DataArgs, stored: Option<&DatasetSchema>) -> Result<(PathBuf, DatasetSchema)> {
    let section = ctx.config.data.as_ref();
    let path = a
        .data
        .clone()
        .or_else(|| section.and_then(|d| d.path.clone()))
        .ok_or_else(|| anyhow!("no input data: pass --data or set `path` in the [data] section"))?;
    let mut schema = match section {
        Some(d) if !d.observations.is_empty() => d.schema(),
        _ => stored.cloned().unwrap_or_default(),
    };
    if !a.obs.is_empty() {
        schema.observations = a.obs.clone();
    }
    if a.id_column.is_some() {
        schema.id_column = a.id_column.clone();
    }
    if !a.covariates.is_empty() {
        schema.covariates = a.covariates.clone();
    }
    if !a.interactions.is_empty() {
        schema.interactions = a
            .interactions
            .iter()
            .map(|t| {
                t.split_once(':')
                    .map(|(x, y)| (x.to_string(), y.to_string()))
                    .ok_or_else(|| anyhow!("interaction `{t}` must be written `a:b`"))
            })
            .collect::<Result<_>>()?;
    }
    if !a.standardize.is_empty() {
        schema.standardize = a.standardize.clone();
    }
    if schema.observations.is_empty() {
        bail!("no observation columns: pass --obs or set `observations` in the [data] section");
    }
    Ok((path, schema))
}

fn optimizer(ctx: &Context, a: &OptimizerArgs, seed: Option<u64>) -> Result<OptimizerConfig> {
    let mut o = ctx.config.optimizer.unwrap_or_default();
    if let Some(v) = a.restarts {
        o.restarts = v;
    }
    if let Some(v) = a.max_iter {
        o.max_iter = v;
    }
    if let Some(v) = a.grad_tol {
        o.grad_tol = v;
    }
    if let Some(v) = a.rel_tol {
        o.rel_tol = v;
    }
    if let Some(v) = seed {
        o.seed = v;
    }
    o.validate()?;
    Ok(o)
}

fn scenario(ctx: &Context, a: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut s = ctx.config.scenario.build(a.preset)?;
    if let Some(v) = a.runs {
        s.runs = v;
    }
    if let Some(v) = a.length {
        s.length = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    s.validate()?;
    Ok(s)
}

fn states(ctx: &Context, flag: Option<usize>) -> Result<usize> {
    flag.or(ctx.config.model.states)
        .ok_or_else(|| anyhow!("number of states missing: pass --states or set `states` in the [model] section"))
}

fn margin(ctx: &Context, flag: Option<f64>) -> f64 {
    flag.or(ctx.config.model.margin).unwrap_or(DEFAULT_SUPPORT_MARGIN)
}

fn with_covariates(spec: ModelSpec, data: &SequenceSet) -> ModelSpec {
    match data.n_covariates() {
        0 => spec,
        p => spec.with_covariates(p),
    }
}

fn load_data(path: &Path, schema: &DatasetSchema, stored: Option<&Standardization>) -> Result<splinehmm::io::LoadedDataset> {
    if !path.exists() {
        bail!("input file {} does not exist", path.display());
    }
    load_dataset(path, schema, stored).with_context(|| format!("reading data {}", path.display()))
}

fn open_model(path: &Path) -> Result<ModelArtifact> {
    load_model(path).with_context(|| format!("reading model {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

fn join(counts: &[usize]) -> String {
    counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("x")
}

fn print_fit(log_likelihood: f64, iterations: usize, converged: bool, status: &impl std::fmt::Debug) {
    println!("log-likelihood {log_likelihood:.6} after {iterations} iterations ({status:?}, converged: {converged})");
}

pub fn simulate(ctx: &Context, a: SimulateArgs) -> Result<Outcome> {
    let s = scenario(ctx, &a.scenario)?;
    let dim = s.emissions.dim();
    let paths: Vec<(PathBuf, PathBuf)> = (0..s.runs)
        .map(|r| {
            (
                a.out.join(format!("run_{r:03}_observations.csv")),
                a.out.join(format!("run_{r:03}_states.csv")),
            )
        })
        .collect();
    let all: Vec<&Path> = paths.iter().flat_map(|(o, st)| [o.as_path(), st.as_path()]).collect();
    ensure_new(&all, ctx.force)?;
    for (r, (obs_path, state_path)) in paths.iter().enumerate() {
        let run = s.simulate(&format!("run{r}"), &mut s.run_rng(r))?;
        let seq = &run.sequence;
        let mut w = csv_writer(obs_path)?;
        let mut header = vec!["sequence".to_string()];
        header.extend((1..=dim).map(|d| format!("y{d}")));
        w.write_record(&header)?;
        for t in 0..seq.len() {
            let y = seq.obs(t).expect("simulated records are complete");
            let mut row = vec![seq.id().to_string()];
            row.extend(y.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        let mut w = csv_writer(state_path)?;
        w.write_record(["sequence", "t", "state"])?;
        for (t, st) in run.states.iter().enumerate() {
            w.write_record([seq.id().to_string(), (t + 1).to_string(), (st + 1).to_string()])?;
        }
        w.flush()?;
    }
    println!("wrote {} runs of {} observations to {}", s.runs, s.length, a.out.display());
    Ok(Outcome::Done)
}

pub fn fit(ctx: &Context, a: FitArgs) -> Result<Outcome> {
    let report_path = a.report.clone().unwrap_or_else(|| a.out.with_extension("report.json"));
    ensure_new(&[&a.out, &report_path], ctx.force)?;
    let opt = optimizer(ctx, &a.opt, a.seed)?;
    let init = a.init.as_deref().map(open_model).transpose()?;
    let (path, schema) = resolve_data(ctx, &a.data, init.as_ref().and_then(|i| i.schema.as_ref()))?;
    let loaded = load_data(&path, &schema, init.as_ref().map(|i| &i.standardization))?;
    let data = &loaded.data;

    let (spec, rep) = match &init {
        Some(art) => {
            if let Some(n) = a.model.states.filter(|&n| n != art.spec.n_states) {
                bail!("--states {n} conflicts with the {} states of the starting model", art.spec.n_states);
            }
            art.spec.check_data(data)?;
            (art.spec.clone(), refit(data, &art.spec, &art.model, &opt)?)
        }
        None => {
            let n = states(ctx, a.model.states)?;
            let family = a.model.family.or(ctx.config.model.family).unwrap_or(Family::Spline);
            let spec = match family {
                Family::Spline => {
                    let counts = if a.model.basis.is_empty() {
                        ctx.config
                            .model
                            .basis
                            .clone()
                            .ok_or_else(|| anyhow!("spline fits need --basis (or use the cv subcommand)"))?
                    } else {
                        a.model.basis.clone()
                    };
                    let counts = basis_counts(&counts, data.dim())?;
                    ModelSpec::spline_for_data(data, n, &counts, margin(ctx, a.model.margin))?
                }
                Family::Gaussian => ModelSpec::gaussian(n, data.dim())?,
            };
            let spec = with_covariates(spec, data);
            let rep = estimate(data, &spec, &opt)?;
            (spec, rep)
        }
    };

    let artifact = ModelArtifact {
        schema: Some(schema),
        standardization: loaded.standardization.clone(),
        fit: Some(FitMetadata::from(&rep)),
        ..ModelArtifact::new(spec, rep.model.clone())
    };
    save_model(&artifact, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    write_json(&report_path, &rep)?;
    print_fit(rep.log_likelihood, rep.iterations, rep.converged, &rep.status);
    Ok(if rep.converged || a.allow_nonconverged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}

pub fn cv(ctx: &Context, a: CvArgs) -> Result<Outcome> {
    ensure_new(&[&a.table, &a.out], ctx.force)?;
    let section = &ctx.config.cv;
    let seed = a.seed.or(section.seed);
    let opt = optimizer(ctx, &a.opt, seed)?;
    let (path, schema) = resolve_data(ctx, &a.data, None)?;
    let loaded = load_data(&path, &schema, None)?;
    let data = &loaded.data;
    let n = states(ctx, a.states)?;
    let margin = margin(ctx, a.margin);

    let counts = match &a.candidates {
        Some(s) => parse_candidates(s)?,
        None => section.study_cv().candidates,
    };
    let mode = match a.mode {
        Some(ModeArg::Within) => CvMode::WithinSequence,
        Some(ModeArg::Between) => CvMode::BetweenSequence,
        None => section.mode.unwrap_or(CvMode::WithinSequence),
    };
    let defaults = section.study_cv();
    let plan = CvPlan {
        mode,
        holdout_fraction: a.holdout_fraction.unwrap_or(defaults.holdout_fraction),
        margin,
        ..CvPlan::within(data.dim(), &counts, a.folds.unwrap_or(defaults.n_folds), opt.seed)
    };
    let template = with_covariates(ModelSpec::gaussian(n, data.dim())?, data);
    let fold_opt = OptimizerConfig {
        restarts: a.cv_restarts.unwrap_or(defaults.restarts),
        ..opt
    };
    let result = cross_validate(data, &plan, n, template.transition, &fold_opt)?;

    let mut w = csv_writer(&a.table)?;
    let mut header = vec!["basis_counts".to_string(), "mean_score".into(), "failed_folds".into()];
    header.extend(["disqualified".into(), "selected".into()]);
    header.extend((1..=plan.n_folds).map(|f| format!("fold_{f}")));
    w.write_record(&header)?;
    for r in &result.rows {
        let mut row = vec![join(&r.counts), r.mean_score.to_string(), r.failed_folds.to_string()];
        row.extend([r.disqualified.to_string(), (r.counts == result.selected).to_string()]);
        row.extend(r.fold_scores.iter().map(|s| s.map_or(String::new(), |v| v.to_string())));
        w.write_record(&row)?;
    }
    w.flush()?;
    println!("selected basis counts {}", join(&result.selected));

    let spec = with_covariates(ModelSpec::spline_for_data(data, n, &result.selected, margin)?, data);
    let rep = estimate(data, &spec, &opt)?;
    let artifact = ModelArtifact {
        schema: Some(schema),
        standardization: loaded.standardization.clone(),
        fit: Some(FitMetadata::from(&rep)),
        ..ModelArtifact::new(spec, rep.model.clone())
    };
    save_model(&artifact, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    print_fit(rep.log_likelihood, rep.iterations, rep.converged, &rep.status);
    Ok(if rep.converged || a.allow_nonconverged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}

pub fn decode(ctx: &Context, a: DecodeArgs) -> Result<Outcome> {
    ensure_new(&[&a.out], ctx.force)?;
    let art = open_model(&a.model)?;
    let (path, schema) = resolve_data(ctx, &a.data, art.schema.as_ref())?;
    let loaded = load_data(&path, &schema, Some(&art.standardization))?;
    art.spec.check_data(&loaded.data)?;
    let paths = loaded
        .data
        .sequences()
        .par_iter()
        .map(|s| art.model.viterbi(s))
        .collect::<splinehmm::Result<Vec<_>>>()?;
    let mut w = csv_writer(&a.out)?;
    w.write_record(["sequence", "t", "state"])?;
    for (seq, path) in loaded.data.sequences().iter().zip(&paths) {
        for (t, s) in path.iter().enumerate() {
            w.write_record([seq.id().to_string(), (t + 1).to_string(), (s + 1).to_string()])?;
        }
    }
    w.flush()?;
    println!("decoded {} rows in {} sequences", loaded.rows, paths.len());
    Ok(Outcome::Done)
}

/// Grid over the spline support, or four standard deviations around a Gaussian mean.
fn state_grid(e: &Emission, points: usize) -> Result<GridSpec> {
    Ok(match e {
        Emission::Spline(t) => t.support_grid(points),
        Emission::Gaussian(g) => {
            let cov = g.covariance();
            let axes = g
                .mean()
                .iter()
                .enumerate()
                .map(|(d, m)| {
                    let r = 4.0 * cov[d][d].sqrt();
                    GridAxis::new(m - r, m + r, points)
                })
                .collect();
            GridSpec::new(axes)?
        }
    })
}

pub fn export_density(ctx: &Context, a: ExportArgs) -> Result<Outcome> {
    if a.points < 2 {
        bail!("--points must be at least 2");
    }
    let art = open_model(&a.model)?;
    let model = &art.model;
    let curve = match (a.curve_from, a.curve_to) {
        (Some(lo), Some(hi)) => match &model.transition {
            Transition::Covariate { model: c } => Some((c, lo, hi)),
            Transition::Homogeneous { .. } => bail!("the model has no covariates; a steady-state curve needs a covariate model"),
        },
        _ => None,
    };
    let density_paths: Vec<PathBuf> = (1..=model.n_states())
        .map(|i| a.out.join(format!("density_state{i}.csv")))
        .collect();
    let curve_path = a.out.join("steady_state.csv");
    let mut all: Vec<&Path> = density_paths.iter().map(PathBuf::as_path).collect();
    if curve.is_some() {
        all.push(&curve_path);
    }
    ensure_new(&all, ctx.force)?;

    let names: Vec<String> = match &art.schema {
        Some(s) => s.observations.clone(),
        None => (1..=model.dim()).map(|d| format!("y{d}")).collect(),
    };
    for (e, path) in model.emissions.iter().zip(&density_paths) {
        let grid = state_grid(e, a.points)?;
        let values = grid.evaluate(e)?;
        let mut w = csv_writer(path)?;
        let mut header = names.clone();
        header.push("density".into());
        w.write_record(&header)?;
        let mut y = vec![0.0; grid.dim()];
        for (k, v) in values.iter().enumerate() {
            grid.point(k, &mut y);
            let mut row: Vec<String> = y.iter().map(|x| x.to_string()).collect();
            row.push(v.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
    }

    if let Some((c, lo, hi)) = curve {
        if a.curve_points < 2 {
            bail!("--curve-points must be at least 2");
        }
        let (raw, interactions) = match &art.schema {
            Some(s) => (s.covariates.clone(), s.interactions.clone()),
            None => ((1..=c.n_covariates()).map(|k| format!("x{k}")).collect(), Vec::new()),
        };
        let column = a.curve_column.clone().unwrap_or_else(|| raw[0].clone());
        let pos = raw
            .iter()
            .position(|r| *r == column)
            .ok_or_else(|| anyhow!("`{column}` is not a covariate of the model (covariates: {})", raw.join(", ")))?;
        let scale = art.standardization.get(&column).map_or((0.0, 1.0), |s| (s.mean, s.sd));
        let axis = GridAxis::new(lo, hi, a.curve_points);
        let inputs: Vec<f64> = (0..a.curve_points).map(|k| axis.point(k)).collect();
        let grid: Vec<Vec<f64>> = inputs
            .iter()
            .map(|&v| {
                let mut x = vec![0.0; raw.len()];
                x[pos] = (v - scale.0) / scale.1;
                let value = |name: &str| raw.iter().position(|r| r == name).map_or(0.0, |i| x[i]);
                let products: Vec<f64> = interactions.iter().map(|(p, q)| value(p) * value(q)).collect();
                x.extend(products);
                x
            })
            .collect();
        let probs = c.steady_state_curve(&grid)?;
        let mut w = csv_writer(&curve_path)?;
        let mut header = vec![column];
        header.extend((1..=c.n_states()).map(|i| format!("state{i}")));
        w.write_record(&header)?;
        for (v, p) in inputs.iter().zip(&probs) {
            let mut row = vec![v.to_string()];
            row.extend(p.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    println!("wrote {} density grids to {}", model.n_states(), a.out.display());
    Ok(Outcome::Done)
}

pub fn study(ctx: &Context, a: StudyArgs) -> Result<Outcome> {
    let tables = ["runs.csv", "cv.csv", "summary.csv", "failures.csv"].map(|f| a.out.join(f));
    ensure_new(&tables.iter().map(PathBuf::as_path).collect::<Vec<_>>(), ctx.force)?;
    let mut cfg = StudyConfig::new(scenario(ctx, &a.scenario)?);
    cfg.cv = ctx.config.cv.study_cv();
    if let Some(s) = &a.candidates {
        cfg.cv.candidates = parse_candidates(s)?;
    }
    if let Some(v) = a.folds {
        cfg.cv.n_folds = v;
    }
    if let Some(v) = a.holdout_fraction {
        cfg.cv.holdout_fraction = v;
    }
    if let Some(v) = a.cv_restarts {
        cfg.cv.restarts = v;
    }
    cfg.optimizer = optimizer(ctx, &a.opt, None)?;
    if let Some(v) = ctx.config.study.kld_points {
        cfg.kld_points = v;
    }
    if let Some(v) = ctx.config.study.validity_points {
        cfg.validity_points = v;
    }
    if let Some(v) = ctx.config.model.margin {
        cfg.margin = v;
    }
    cfg.validate()?;

    let results = run_study(&cfg)?;
    results.write_csv(&a.out, cfg.scenario.tpm.n_states())?;
    for name in [SPLINE, GAUSSIAN] {
        if let Some(s) = results.summary(name) {
            println!(
                "{name}: {} runs, {} converged, mean accuracy {:.4}, mean KLD {:?}, mean diagonal {:?}",
                s.runs, s.converged, s.mean_accuracy, s.mean_kld, s.mean_gamma_diag
            );
        }
    }
    if !results.failures.is_empty() {
        eprintln!("{} runs failed; see failures.csv", results.failures.len());
    }
    Ok(Outcome::Done)
}
