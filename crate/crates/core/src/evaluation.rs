//! Kullback-Leibler divergence, decoding accuracy and cross-validated choice
//! of the number of basis functions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emission::{DensityFn, GridSpec, DENSITY_FLOOR};
use crate::error::{Error, Result};
use crate::estimation::{estimate, ModelSpec, OptimizerConfig, TransitionSpec};
use crate::hmm::SequenceSet;

/// Trapezoid weights of a grid, product over axes.
fn trapezoid_weight(grid: &GridSpec, flat: usize) -> f64 {
    let mut w = 1.0;
    let mut rest = flat;
    for axis in grid.axes.iter().rev() {
        let k = rest % axis.count;
        rest /= axis.count;
        let edge = k == 0 || k == axis.count - 1;
        w *= axis.step() * if edge { 0.5 } else { 1.0 };
    }
    w
}

/// `sum p log(p / q)` with trapezoid weights over precomputed grid values;
/// `q` is floored at the density floor.
pub fn kld_values(p: &[f64], q: &[f64], grid: &GridSpec) -> Result<f64> {
    if p.len() != grid.len() || q.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: p.len().min(q.len()),
            context: "density values on the KLD grid".into(),
        });
    }
    let mut total = 0.0;
    for (k, (&pv, &qv)) in p.iter().zip(q).enumerate() {
        if pv > 0.0 {
            total += trapezoid_weight(grid, k) * pv * (pv.ln() - qv.max(DENSITY_FLOOR).ln());
        }
    }
    Ok(total)
}

/// KL divergence of `q` from `p` on `grid`.
pub fn kld(p: &dyn DensityFn, q: &dyn DensityFn, grid: &GridSpec) -> Result<f64> {
    grid.validate()?;
    if p.dim() != grid.dim() || q.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: if p.dim() != grid.dim() { p.dim() } else { q.dim() },
            context: "density dimension versus grid".into(),
        });
    }
    kld_values(&grid.evaluate(p)?, &grid.evaluate(q)?, grid)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Label matching that maximizes agreement: `perm[k]` is the decoded label
/// matched to true label `k`. Ties go to the lexicographically smallest permutation.
pub fn best_alignment(truth: &[usize], decoded: &[usize], n_states: usize) -> Result<(Vec<usize>, f64)> {
    if truth.len() != decoded.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: decoded.len(),
            context: "decoded path length".into(),
        });
    }
    if truth.iter().chain(decoded).any(|&s| s >= n_states) {
        return Err(Error::invalid(format!("state label outside 0..{n_states}")));
    }
    if n_states > 8 {
        return Err(Error::invalid("label alignment is exhaustive and limited to 8 states"));
    }
    let mut confusion = vec![0usize; n_states * n_states];
    for (&t, &d) in truth.iter().zip(decoded) {
        confusion[t * n_states + d] += 1;
    }
    let mut best = (Vec::new(), 0usize);
    for p in permutations(n_states) {
        let hits: usize = (0..n_states).map(|k| confusion[k * n_states + p[k]]).sum();
        if best.0.is_empty() || hits > best.1 {
            best = (p, hits);
        }
    }
    let acc = if truth.is_empty() { 1.0 } else { best.1 as f64 / truth.len() as f64 };
    Ok((best.0, acc))
}

/// Fraction of correctly decoded states, maximized over label permutations.
pub fn decoding_accuracy(truth: &[usize], decoded: &[usize]) -> Result<f64> {
    let n = truth.iter().chain(decoded).copied().max().map_or(1, |m| m + 1);
    best_alignment(truth, decoded, n).map(|(_, a)| a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    /// Random time points of every sequence are held out and treated as missing.
    WithinSequence,
    /// Whole sequences are held out.
    BetweenSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub mode: CvMode,
    pub n_folds: usize,
    pub holdout_fraction: f64,
    /// Basis counts per dimension for every candidate.
    pub candidates: Vec<Vec<usize>>,
    pub seed: u64,
    /// Support margin (fraction of the data range added on each side).
    pub margin: f64,
}

impl CvPlan {
    /// Within-sequence plan with equal counts in every dimension.
    pub fn within(dim: usize, counts: &[usize], n_folds: usize, seed: u64) -> Self {
        CvPlan {
            mode: CvMode::WithinSequence,
            n_folds,
            holdout_fraction: 0.1,
            candidates: counts.iter().map(|&c| vec![c; dim]).collect(),
            seed,
            margin: crate::basis::DEFAULT_SUPPORT_MARGIN,
        }
    }

    pub fn validate(&self, data: &SequenceSet) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::invalid("cross-validation needs at least one candidate"));
        }
        if self.candidates.iter().any(|c| c.len() != data.dim()) {
            return Err(Error::invalid("candidate basis counts must list one count per dimension"));
        }
        if self.n_folds == 0 {
            return Err(Error::invalid("cross-validation needs at least one fold"));
        }
        match self.mode {
            CvMode::WithinSequence => {
                if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
                    return Err(Error::invalid("holdout fraction must lie in (0, 0.5]"));
                }
            }
            CvMode::BetweenSequence => {
                if self.n_folds < 2 || data.len() < self.n_folds {
                    return Err(Error::invalid(format!(
                        "between-sequence cross-validation needs 2 <= folds <= sequences ({} folds, {} sequences)",
                        self.n_folds,
                        data.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub counts: Vec<usize>,
    /// Mean held-out log-likelihood over successful folds (NaN if none).
    pub mean_score: f64,
    pub fold_scores: Vec<Option<f64>>,
    pub failed_folds: usize,
    pub disqualified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub rows: Vec<CvRow>,
    pub selected: Vec<usize>,
}

struct Fold {
    train: SequenceSet,
    /// Within-sequence: the full data; between-sequence: the held-out sequences.
    test: SequenceSet,
}

fn make_folds(data: &SequenceSet, plan: &CvPlan) -> Result<Vec<Fold>> {
    match plan.mode {
        CvMode::WithinSequence => (0..plan.n_folds)
            .map(|f| {
                let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(f as u64));
                let train = data
                    .sequences()
                    .iter()
                    .map(|s| {
                        let mut times: Vec<usize> = s.observed().map(|(t, _)| t).collect();
                        let k = ((times.len() as f64) * plan.holdout_fraction).round() as usize;
                        times.shuffle(&mut rng);
                        times.truncate(k.max(1).min(times.len()));
                        times.sort_unstable();
                        s.with_missing(&times)
                    })
                    .collect();
                Ok(Fold {
                    train: SequenceSet::new(train)?,
                    test: data.clone(),
                })
            })
            .collect(),
        CvMode::BetweenSequence => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
            (0..plan.n_folds)
                .map(|f| {
                    let test: Vec<usize> = order.iter().copied().skip(f).step_by(plan.n_folds).collect();
                    let train: Vec<usize> = order.iter().copied().filter(|i| !test.contains(i)).collect();
                    Ok(Fold {
                        train: data.subset(&train)?,
                        test: data.subset(&test)?,
                    })
                })
                .collect()
        }
    }
}

/// Highest mean score among qualified rows; equal scores go to the smaller basis.
pub fn select_candidate(rows: &[CvRow]) -> Option<Vec<usize>> {
    let size = |r: &CvRow| r.counts.iter().product::<usize>();
    let mut selected: Option<&CvRow> = None;
    for row in rows.iter().filter(|r| !r.disqualified) {
        let better = match selected {
            None => true,
            Some(b) => row.mean_score > b.mean_score || (row.mean_score == b.mean_score && size(row) < size(b)),
        };
        if better {
            selected = Some(row);
        }
    }
    selected.map(|r| r.counts.clone())
}

fn fold_score(fold: &Fold, spec: &ModelSpec, mode: CvMode, cfg: &OptimizerConfig) -> Result<f64> {
    let rep = estimate(&fold.train, spec, cfg)?;
    let score = match mode {
        CvMode::WithinSequence => {
            let (full, _) = rep.model.joint_log_likelihood_with(&fold.test, true)?;
            let (train, _) = rep.model.joint_log_likelihood_with(&fold.train, true)?;
            full - train
        }
        CvMode::BetweenSequence => rep.model.joint_log_likelihood_with(&fold.test, true)?.0,
    };
    if score.is_finite() {
        Ok(score)
    } else {
        Err(Error::invalid("non-finite held-out log-likelihood"))
    }
}

/// Scores every candidate basis count on the same folds and selects the one
/// with the highest mean held-out log-likelihood (ties to the smaller count).
/// Bases span the full data with `plan.margin`.
pub fn cross_validate(
    data: &SequenceSet,
    plan: &CvPlan,
    n_states: usize,
    transition: TransitionSpec,
    cfg: &OptimizerConfig,
) -> Result<CvResult> {
    plan.validate(data)?;
    let folds = make_folds(data, plan)?;
    let specs = plan
        .candidates
        .iter()
        .map(|c| {
            let mut s = ModelSpec::spline_for_data(data, n_states, c, plan.margin)?;
            s.transition = transition;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
        .collect();
    let scores: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(c, f)| fold_score(&folds[f], &specs[c], plan.mode, cfg).ok())
        .collect();

    let mut rows = Vec::with_capacity(specs.len());
    for (c, counts) in plan.candidates.iter().enumerate() {
        let fold_scores = scores[c * folds.len()..(c + 1) * folds.len()].to_vec();
        let ok: Vec<f64> = fold_scores.iter().flatten().copied().collect();
        let failed = folds.len() - ok.len();
        let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
        rows.push(CvRow {
            counts: counts.clone(),
            mean_score: mean,
            fold_scores,
            failed_folds: failed,
            disqualified: 2 * failed > folds.len() || ok.is_empty(),
        });
    }
    let selected = select_candidate(&rows)
        .ok_or_else(|| Error::invalid("every cross-validation candidate failed on more than half of its folds"))?;
    Ok(CvResult { rows, selected })
}
