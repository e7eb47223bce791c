//! Hidden Markov model structure, scaled forward likelihood and Viterbi decoding.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariate::CovariateTransition;
use crate::emission::{DensityFn, TensorEmission, DENSITY_FLOOR};
use crate::error::{Error, Result};
use crate::gaussian::GaussianEmission;

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic `N x N` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for TransitionMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<TransitionMatrix> for Vec<Vec<f64>> {
    fn from(m: TransitionMatrix) -> Self {
        m.rows()
    }
}

impl TransitionMatrix {
    /// Validates a matrix given by rows. Rows summing to one within 1e-9 are
    /// renormalized so that the stored rows sum to one to rounding.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("transition matrix must be square and non-empty"));
        }
        Self::from_row_major(n, rows.into_iter().flatten().collect())
    }

    pub fn from_row_major(n: usize, mut data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::invalid("transition matrix must be square and non-empty"));
        }
        for i in 0..n {
            let row = &mut data[i * n..(i + 1) * n];
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::invalid(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {i} sums to {s}, not 1")));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(TransitionMatrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        TransitionMatrix { n, data }
    }

    /// `diag` on the diagonal, remaining mass spread evenly over each row.
    pub fn persistent(n: usize, diag: f64) -> Result<Self> {
        if n == 1 {
            return Ok(Self::identity(1));
        }
        let off = (1.0 - diag) / (n - 1) as f64;
        let rows = (0..n)
            .map(|i| (0..n).map(|j| if i == j { diag } else { off }).collect())
            .collect();
        Self::new(rows)
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    /// Same chain with states relabeled: new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                data[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        TransitionMatrix { n, data }
    }
}

fn check_irreducible(n: usize, data: &[f64]) -> Result<()> {
    for start in 0..n {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !seen[j] && data[i * n + j] > 0.0 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::DegenerateChain(format!(
                "chain is reducible: state {} cannot reach state {}",
                start + 1,
                j + 1
            )));
        }
    }
    Ok(())
}

/// Stationary law and `A^{-1}` with `A = I - Gamma + 1 1'`, so that `delta = 1' A^{-1}`.
pub(crate) fn stationary_system(n: usize, data: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_irreducible(n, data)?;
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - data[i * n + j] + 1.0);
    let inv = a
        .try_inverse()
        .ok_or_else(|| Error::DegenerateChain("singular stationary system".into()))?;
    let mut delta: Vec<f64> = (0..n).map(|k| (0..n).map(|j| inv[(j, k)]).sum()).collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateChain("non-finite stationary solution".into()));
    }
    delta.iter_mut().for_each(|v| *v = v.max(0.0));
    let s: f64 = delta.iter().sum();
    delta.iter_mut().for_each(|v| *v /= s);
    Ok((delta, inv))
}

/// `delta` solving `delta Gamma = delta`, `sum(delta) = 1`, `delta >= 0`.
pub fn stationary_distribution(transition: &TransitionMatrix) -> Result<Vec<f64>> {
    stationary_system(transition.n, &transition.data).map(|(d, _)| d)
}

/// One observation sequence. Records are either fully observed or fully missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    id: String,
    dim: usize,
    values: Vec<f64>,
    missing: Vec<bool>,
    n_covariates: usize,
    covariates: Vec<f64>,
}

impl Sequence {
    /// Fully observed sequence from row vectors.
    pub fn from_rows(id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        Self::from_records(id, dim, rows.iter().map(|r| Some(r.clone())).collect())
    }

    /// `None` marks a missing observation. A record containing both NaN and
    /// finite values is rejected as partially missing.
    pub fn from_records(id: impl Into<String>, dim: usize, records: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("sequence must contain at least one record"));
        }
        if dim == 0 {
            return Err(Error::invalid("observation dimension must be at least 1"));
        }
        let mut values = Vec::with_capacity(records.len() * dim);
        let mut missing = Vec::with_capacity(records.len());
        for (t, r) in records.into_iter().enumerate() {
            match r {
                None => {
                    values.extend(std::iter::repeat_n(f64::NAN, dim));
                    missing.push(true);
                }
                Some(v) => {
                    if v.len() != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            got: v.len(),
                            context: format!("record {t}"),
                        });
                    }
                    let nan = v.iter().filter(|x| x.is_nan()).count();
                    if nan == dim {
                        missing.push(true);
                    } else if nan > 0 {
                        return Err(Error::PartialMissing { time: t });
                    } else if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::invalid(format!("record {t} is not finite")));
                    } else {
                        missing.push(false);
                    }
                    values.extend(v);
                }
            }
        }
        Ok(Sequence {
            id: id.into(),
            dim,
            values,
            missing,
            n_covariates: 0,
            covariates: Vec::new(),
        })
    }

    /// Attaches one covariate vector per time point.
    pub fn with_covariates(mut self, covariates: Vec<Vec<f64>>) -> Result<Self> {
        if covariates.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: covariates.len(),
                context: "covariate rows".into(),
            });
        }
        let p = covariates.first().map(|c| c.len()).unwrap_or(0);
        if covariates.iter().any(|c| c.len() != p) {
            return Err(Error::invalid("covariate rows differ in length"));
        }
        if covariates.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite covariate value"));
        }
        self.n_covariates = p;
        self.covariates = covariates.into_iter().flatten().collect();
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.missing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn is_missing(&self, t: usize) -> bool {
        self.missing[t]
    }

    pub fn obs(&self, t: usize) -> Option<&[f64]> {
        if self.missing[t] {
            None
        } else {
            Some(&self.values[t * self.dim..(t + 1) * self.dim])
        }
    }

    pub fn covariates(&self, t: usize) -> &[f64] {
        &self.covariates[t * self.n_covariates..(t + 1) * self.n_covariates]
    }

    pub fn n_observed(&self) -> usize {
        self.missing.iter().filter(|m| !**m).count()
    }

    /// Observed points in time order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        (0..self.len()).filter_map(move |t| self.obs(t).map(|y| (t, y)))
    }

    /// Copy with the given time points additionally marked missing.
    pub fn with_missing(&self, times: &[usize]) -> Self {
        let mut s = self.clone();
        for &t in times {
            s.missing[t] = true;
            s.values[t * s.dim..(t + 1) * s.dim].fill(f64::NAN);
        }
        s
    }
}

/// A collection of independent sequences sharing dimension and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    sequences: Vec<Sequence>,
}

impl SequenceSet {
    pub fn new(sequences: Vec<Sequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::invalid("sequence set is empty"))?;
        let (d, p) = (first.dim, first.n_covariates);
        for s in &sequences {
            if s.dim != d || s.n_covariates != p {
                return Err(Error::invalid(format!(
                    "sequence `{}` has dimension {}/{} covariates, expected {d}/{p}",
                    s.id, s.dim, s.n_covariates
                )));
            }
        }
        Ok(SequenceSet { sequences })
    }

    pub fn single(sequence: Sequence) -> Self {
        SequenceSet {
            sequences: vec![sequence],
        }
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sequences[0].dim
    }

    pub fn n_covariates(&self) -> usize {
        self.sequences[0].n_covariates
    }

    pub fn total_len(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// All observed points of all sequences, in order.
    pub fn pooled(&self) -> Vec<&[f64]> {
        self.sequences
            .iter()
            .flat_map(|s| s.observed().map(|(_, y)| y))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.sequences[i].clone()).collect())
    }
}

/// Per-state emission density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Emission {
    Spline(TensorEmission),
    Gaussian(GaussianEmission),
}

impl Emission {
    pub fn dim(&self) -> usize {
        match self {
            Emission::Spline(e) => e.dim(),
            Emission::Gaussian(g) => g.dim(),
        }
    }

    pub fn in_support(&self, y: &[f64]) -> bool {
        match self {
            Emission::Spline(e) => e.in_support(y),
            Emission::Gaussian(_) => true,
        }
    }
}

impl DensityFn for Emission {
    fn dim(&self) -> usize {
        Emission::dim(self)
    }

    fn pdf(&self, y: &[f64]) -> f64 {
        match self {
            Emission::Spline(e) => e.pdf(y),
            Emission::Gaussian(g) => g.pdf(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Homogeneous { matrix: TransitionMatrix },
    Covariate { model: CovariateTransition },
}

impl Transition {
    pub fn n_states(&self) -> usize {
        match self {
            Transition::Homogeneous { matrix } => matrix.n_states(),
            Transition::Covariate { model } => model.n_states(),
        }
    }

    pub fn n_covariates(&self) -> usize {
        match self {
            Transition::Homogeneous { .. } => 0,
            Transition::Covariate { model } => model.n_covariates(),
        }
    }
}

/// How the distribution of the first state is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "delta", rename_all = "snake_case")]
pub enum InitialLaw {
    /// Stationary law of the t.p.m. (for covariate models, the t.p.m. at the first time point).
    Stationary,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub transition: Transition,
    pub initial: InitialLaw,
    pub emissions: Vec<Emission>,
}

/// Events recorded while evaluating a likelihood.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodDiagnostics {
    /// Times at which every state density vanished (likelihood zero).
    pub zero_density_times: Vec<usize>,
    /// Observations outside the support of at least one spline emission.
    pub out_of_support: usize,
    /// Density values raised to the floor (floored evaluation only).
    pub floored: usize,
}

impl LikelihoodDiagnostics {
    pub fn merge(&mut self, other: &LikelihoodDiagnostics, time_offset: usize) {
        self.zero_density_times
            .extend(other.zero_density_times.iter().map(|t| t + time_offset));
        self.out_of_support += other.out_of_support;
        self.floored += other.floored;
    }
}

impl HmmModel {
    pub fn new(transition: Transition, initial: InitialLaw, emissions: Vec<Emission>) -> Result<Self> {
        let n = transition.n_states();
        if emissions.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: emissions.len(),
                context: "number of emissions".into(),
            });
        }
        let d = emissions[0].dim();
        if emissions.iter().any(|e| e.dim() != d) {
            return Err(Error::invalid("emissions differ in dimension"));
        }
        if let InitialLaw::Fixed(delta) = &initial {
            if delta.len() != n || delta.iter().any(|v| !(0.0..=1.0).contains(v)) || (delta.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid("initial distribution must be a probability vector over the states"));
            }
        }
        Ok(HmmModel {
            transition,
            initial,
            emissions,
        })
    }

    /// Homogeneous model with stationary initial law.
    pub fn stationary(matrix: TransitionMatrix, emissions: Vec<Emission>) -> Result<Self> {
        Self::new(Transition::Homogeneous { matrix }, InitialLaw::Stationary, emissions)
    }

    pub fn n_states(&self) -> usize {
        self.emissions.len()
    }

    pub fn dim(&self) -> usize {
        self.emissions[0].dim()
    }

    /// The t.p.m. of a homogeneous chain.
    pub fn transition_matrix(&self) -> Option<&TransitionMatrix> {
        match &self.transition {
            Transition::Homogeneous { matrix } => Some(matrix),
            Transition::Covariate { .. } => None,
        }
    }

    fn check_sequence(&self, seq: &Sequence) -> Result<()> {
        if seq.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: seq.dim(),
                context: format!("observation dimension of sequence `{}`", seq.id()),
            });
        }
        let p = self.transition.n_covariates();
        if matches!(self.transition, Transition::Covariate { .. }) && seq.n_covariates() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: seq.n_covariates(),
                context: format!("covariates of sequence `{}`", seq.id()),
            });
        }
        Ok(())
    }

    /// Row-major t.p.m. governing the transition into time `t` (t >= 1).
    fn fill_tpm(&self, seq: &Sequence, t: usize, out: &mut [f64]) {
        match &self.transition {
            Transition::Homogeneous { matrix } => out.copy_from_slice(matrix.as_slice()),
            Transition::Covariate { model } => model.fill_tpm(seq.covariates(t), out),
        }
    }

    /// Distribution of the first state of `seq`.
    pub fn initial_distribution(&self, seq: &Sequence) -> Result<Vec<f64>> {
        match &self.initial {
            InitialLaw::Fixed(d) => Ok(d.clone()),
            InitialLaw::Stationary => {
                let n = self.n_states();
                let mut g = vec![0.0; n * n];
                self.fill_tpm(seq, 0, &mut g);
                stationary_system(n, &g).map(|(d, _)| d)
            }
        }
    }

    /// `T x N` state densities (1 for missing records) plus diagnostics.
    pub fn emission_matrix(&self, seq: &Sequence, floor: bool) -> (Vec<f64>, LikelihoodDiagnostics) {
        let n = self.n_states();
        let mut p = vec![1.0; seq.len() * n];
        let mut diag = LikelihoodDiagnostics::default();
        for (t, y) in seq.observed() {
            let row = &mut p[t * n..(t + 1) * n];
            let mut escaped = false;
            for (i, e) in self.emissions.iter().enumerate() {
                let mut f = e.pdf(y);
                escaped |= !e.in_support(y);
                if floor && f < DENSITY_FLOOR {
                    f = DENSITY_FLOOR;
                    diag.floored += 1;
                }
                row[i] = f;
            }
            if escaped {
                diag.out_of_support += 1;
            }
            if row.iter().all(|&f| f == 0.0) {
                diag.zero_density_times.push(t);
            }
        }
        (p, diag)
    }

    fn forward_scaled(&self, seq: &Sequence, p: &[f64]) -> Result<f64> {
        let n = self.n_states();
        let delta = self.initial_distribution(seq)?;
        let mut phi: Vec<f64> = (0..n).map(|i| delta[i] * p[i]).collect();
        let mut log_l = 0.0;
        let mut g = vec![0.0; n * n];
        let mut next = vec![0.0; n];
        for t in 0..seq.len() {
            if t > 0 {
                self.fill_tpm(seq, t, &mut g);
                for j in 0..n {
                    let s: f64 = (0..n).map(|i| phi[i] * g[i * n + j]).sum();
                    next[j] = s * p[t * n + j];
                }
                std::mem::swap(&mut phi, &mut next);
            }
            let c: f64 = phi.iter().sum();
            if c <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            log_l += c.ln();
            phi.iter_mut().for_each(|v| *v /= c);
        }
        Ok(log_l)
    }

    /// Log-likelihood of one sequence with per-step rescaling.
    ///
    /// Missing records contribute an identity emission matrix. Returns `-inf`
    /// if the likelihood vanishes; `log_likelihood_with` reports where.
    pub fn log_likelihood(&self, seq: &Sequence) -> Result<f64> {
        self.log_likelihood_with(seq, false).map(|(l, _)| l)
    }

    /// As [`Self::log_likelihood`]; with `floor` every density is raised to
    /// at least `DENSITY_FLOOR`, which keeps the result finite.
    pub fn log_likelihood_with(&self, seq: &Sequence, floor: bool) -> Result<(f64, LikelihoodDiagnostics)> {
        self.check_sequence(seq)?;
        let (p, diag) = self.emission_matrix(seq, floor);
        if !floor && !diag.zero_density_times.is_empty() {
            return Ok((f64::NEG_INFINITY, diag));
        }
        Ok((self.forward_scaled(seq, &p)?, diag))
    }

    /// Sum of per-sequence log-likelihoods in sequence order.
    pub fn joint_log_likelihood(&self, data: &SequenceSet) -> Result<f64> {
        self.joint_log_likelihood_with(data, false).map(|(l, _)| l)
    }

    pub fn joint_log_likelihood_with(&self, data: &SequenceSet, floor: bool) -> Result<(f64, LikelihoodDiagnostics)> {
        use rayon::prelude::*;
        let parts: Vec<Result<(f64, LikelihoodDiagnostics)>> = data
            .sequences()
            .par_iter()
            .map(|s| self.log_likelihood_with(s, floor))
            .collect();
        let mut total = 0.0;
        let mut diag = LikelihoodDiagnostics::default();
        let mut offset = 0;
        for (part, s) in parts.into_iter().zip(data.sequences()) {
            let (l, d) = part?;
            total += l;
            diag.merge(&d, offset);
            offset += s.len();
        }
        Ok((total, diag))
    }

    /// Most probable state path (0-based labels); ties go to the lower state index.
    pub fn viterbi(&self, seq: &Sequence) -> Result<Vec<usize>> {
        self.check_sequence(seq)?;
        let n = self.n_states();
        let t_len = seq.len();
        let (p, _) = self.emission_matrix(seq, false);
        let delta = self.initial_distribution(seq)?;
        let mut score: Vec<f64> = (0..n).map(|i| delta[i].ln() + p[i].ln()).collect();
        let mut back = vec![0usize; t_len * n];
        let mut g = vec![0.0; n * n];
        let mut next = vec![0.0; n];
        for t in 1..t_len {
            self.fill_tpm(seq, t, &mut g);
            for j in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for i in 0..n {
                    let v = score[i] + g[i * n + j].ln();
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                next[j] = best + p[t * n + j].ln();
                back[t * n + j] = arg;
            }
            std::mem::swap(&mut score, &mut next);
        }
        let mut state = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &v) in score.iter().enumerate() {
            if v > best {
                best = v;
                state = i;
            }
        }
        let mut path = vec![0; t_len];
        path[t_len - 1] = state;
        for t in (1..t_len).rev() {
            state = back[t * n + state];
            path[t - 1] = state;
        }
        Ok(path)
    }

    /// Same model with states relabeled: new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let transition = match &self.transition {
            Transition::Homogeneous { matrix } => Transition::Homogeneous {
                matrix: matrix.permuted(perm),
            },
            Transition::Covariate { model } => {
                let n = model.n_states();
                let p = model.n_covariates();
                let nn = n * n;
                let remap = |src: &[f64]| {
                    let mut out = vec![0.0; nn];
                    for a in 0..n {
                        for b in 0..n {
                            out[a * n + b] = src[perm[a] * n + perm[b]];
                        }
                    }
                    out
                };
                // diagonal maps to diagonal, so the nu_ii = 0 reference is preserved
                let intercepts = remap(model.intercepts());
                let slopes: Vec<f64> = (0..p).flat_map(|l| remap(&model.slopes()[l * nn..(l + 1) * nn])).collect();
                Transition::Covariate {
                    model: CovariateTransition::new(n, p, intercepts, slopes)?,
                }
            }
        };
        let initial = match &self.initial {
            InitialLaw::Stationary => InitialLaw::Stationary,
            InitialLaw::Fixed(d) => InitialLaw::Fixed(perm.iter().map(|&k| d[k]).collect()),
        };
        let emissions = perm.iter().map(|&k| self.emissions[k].clone()).collect();
        Self::new(transition, initial, emissions)
    }
}
