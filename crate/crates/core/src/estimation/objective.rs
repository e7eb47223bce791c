//! Joint log-likelihood and its analytic gradient in the unconstrained parameters.
//!
//! The gradient is obtained from scaled forward and backward variables:
//! `dlogL/dlog f_i(y_t)` is the smoothed state probability `u_t(i)`,
//! `dlogL/dGamma_t(i,j) = phi_{t-1}(i) f_j(y_t) psi_t(j) / c_t`, and the
//! stationary initial law is differentiated through `delta = 1' (I - Gamma + U)^{-1}`.

use rayon::prelude::*;

use crate::basis::LOCAL;
use crate::emission::{softmax, TensorEmission, DENSITY_FLOOR};
use crate::error::{Error, Result};
use crate::gaussian::GaussianEmission;
use crate::hmm::{stationary_system, Sequence, SequenceSet};

use super::params::{tpm_from_logits, EmissionSpec, ModelSpec, TransitionSpec};

/// Value, gradient and evaluation events of the log-likelihood.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub log_likelihood: f64,
    pub gradient: Vec<f64>,
    pub floored: usize,
    pub out_of_support: usize,
}

/// Precomputed tensor-basis products for every observed point of one sequence.
struct SplineDesign {
    cells: usize,
    /// Per observed time: flat coefficient indices (`cells` of them).
    idx: Vec<u32>,
    val: Vec<f64>,
    /// Per observed time: false if the point lies outside the basis support.
    inside: Vec<bool>,
}

impl SplineDesign {
    fn build(seq: &Sequence, template: &TensorEmission) -> Self {
        let cells = LOCAL.pow(template.dim() as u32);
        let n_obs = seq.n_observed();
        let mut idx = Vec::with_capacity(n_obs * cells);
        let mut val = Vec::with_capacity(n_obs * cells);
        let mut inside = Vec::with_capacity(n_obs);
        for (_, y) in seq.observed() {
            let before = idx.len();
            let ok = template.for_each_local(y, |flat, b| {
                idx.push(flat as u32);
                val.push(b);
            });
            if !ok {
                idx.truncate(before);
                val.truncate(before);
                idx.extend(std::iter::repeat_n(0, cells));
                val.extend(std::iter::repeat_n(0.0, cells));
            }
            inside.push(ok);
        }
        SplineDesign { cells, idx, val, inside }
    }
}

enum StateEmissions {
    Spline(Vec<Vec<f64>>),
    Gaussian(Vec<GaussianEmission>),
}

/// Log-likelihood of a fixed dataset as a function of the flat parameter vector.
pub struct Objective<'a> {
    spec: &'a ModelSpec,
    data: &'a SequenceSet,
    designs: Vec<SplineDesign>,
}

struct SeqResult {
    log_l: f64,
    grad: Vec<f64>,
    floored: usize,
    out_of_support: usize,
}

impl<'a> Objective<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a SequenceSet) -> Result<Self> {
        spec.check_data(data)?;
        let designs = match &spec.emission {
            EmissionSpec::Spline { bases } => {
                let template = TensorEmission::uniform(bases.clone())?;
                data.sequences()
                    .iter()
                    .map(|s| SplineDesign::build(s, &template))
                    .collect()
            }
            EmissionSpec::Gaussian { .. } => Vec::new(),
        };
        Ok(Objective { spec, data, designs })
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    /// Log-likelihood only.
    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        self.evaluate_impl(theta, false).map(|e| e.log_likelihood)
    }

    /// Log-likelihood with gradient.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        self.evaluate_impl(theta, true)
    }

    fn evaluate_impl(&self, theta: &[f64], want_grad: bool) -> Result<Evaluation> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
                context: "parameter vector".into(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        let layout = self.spec.layout();
        let n = self.spec.n_states;
        let emissions = match &self.spec.emission {
            EmissionSpec::Spline { .. } => StateEmissions::Spline(
                layout
                    .emissions
                    .iter()
                    .map(|r| {
                        let mut beta = Vec::with_capacity(r.len() + 1);
                        beta.push(0.0);
                        beta.extend_from_slice(&theta[r.clone()]);
                        softmax(&beta)
                    })
                    .collect(),
            ),
            EmissionSpec::Gaussian { dim } => StateEmissions::Gaussian(
                layout
                    .emissions
                    .iter()
                    .map(|r| {
                        let b = &theta[r.clone()];
                        GaussianEmission::from_unconstrained(b[..*dim].to_vec(), b[*dim..].to_vec())
                    })
                    .collect::<Result<_>>()?,
            ),
        };

        // homogeneous chains share one stationary system across sequences
        let shared = match self.spec.transition {
            TransitionSpec::Homogeneous => {
                let g = tpm_from_logits(n, &theta[layout.tpm.clone()]);
                let (delta, inv) = stationary_system(n, &g)?;
                Some((g, delta, inv))
            }
            TransitionSpec::Covariate { .. } => None,
        };

        let parts: Vec<Result<SeqResult>> = self
            .data
            .sequences()
            .par_iter()
            .enumerate()
            .map(|(s, seq)| self.sequence_term(s, seq, theta, &emissions, shared.as_ref(), want_grad))
            .collect();

        // extra trailing slots hold sum_t u_t(i) per state (spline gradient bookkeeping)
        let mut gradient = vec![0.0; if want_grad { theta.len() + n } else { 0 }];
        let mut log_likelihood = 0.0;
        let mut floored = 0;
        let mut out_of_support = 0;
        for p in parts {
            let p = p?;
            log_likelihood += p.log_l;
            floored += p.floored;
            out_of_support += p.out_of_support;
            for (g, v) in gradient.iter_mut().zip(&p.grad) {
                *g += v;
            }
        }
        if want_grad {
            if let StateEmissions::Spline(coefs) = &emissions {
                // free slots hold w_k = sum_t u_t B_k / f; d/d beta_k = a_k (w_k - sum_t u_t)
                for (i, r) in layout.emissions.iter().enumerate() {
                    let usum = gradient[theta.len() + i];
                    let a = &coefs[i];
                    for (k, g) in gradient[r.clone()].iter_mut().enumerate() {
                        *g = a[k + 1] * (*g - usum);
                    }
                }
            }
            gradient.truncate(theta.len());
        }
        Ok(Evaluation {
            log_likelihood,
            gradient,
            floored,
            out_of_support,
        })
    }

    fn sequence_term(
        &self,
        s: usize,
        seq: &Sequence,
        theta: &[f64],
        emissions: &StateEmissions,
        shared: Option<&(Vec<f64>, Vec<f64>, nalgebra::DMatrix<f64>)>,
        want_grad: bool,
    ) -> Result<SeqResult> {
        let n = self.spec.n_states;
        let t_len = seq.len();
        let layout = self.spec.layout();

        // emission matrix and floor flags
        let mut p = vec![1.0; t_len * n];
        let mut floored_flag = vec![false; t_len * n];
        let mut floored = 0;
        let mut out_of_support = 0;
        let obs_times: Vec<usize> = (0..t_len).filter(|&t| !seq.is_missing(t)).collect();
        match emissions {
            StateEmissions::Spline(coefs) => {
                let d = &self.designs[s];
                for (k, &t) in obs_times.iter().enumerate() {
                    if !d.inside[k] {
                        out_of_support += 1;
                    }
                    let idx = &d.idx[k * d.cells..(k + 1) * d.cells];
                    let val = &d.val[k * d.cells..(k + 1) * d.cells];
                    for i in 0..n {
                        let a = &coefs[i];
                        let f: f64 = idx.iter().zip(val).map(|(&j, &b)| a[j as usize] * b).sum();
                        p[t * n + i] = f;
                    }
                }
            }
            StateEmissions::Gaussian(gs) => {
                for &t in &obs_times {
                    let y = seq.obs(t).expect("observed");
                    for (i, g) in gs.iter().enumerate() {
                        p[t * n + i] = crate::emission::DensityFn::pdf(g, y);
                    }
                }
            }
        }
        for &t in &obs_times {
            for i in 0..n {
                if p[t * n + i] < DENSITY_FLOOR {
                    p[t * n + i] = DENSITY_FLOOR;
                    floored_flag[t * n + i] = true;
                    floored += 1;
                }
            }
        }

        // transition matrices: homogeneous chains share one, covariate chains have one per time
        let owned;
        let (gammas, delta, inv) = match (self.spec.transition, shared) {
            (TransitionSpec::Homogeneous, Some((g, delta, inv))) => (Gammas::Shared(g.as_slice()), delta, inv),
            (TransitionSpec::Covariate { n_covariates }, _) => {
                let coeffs = &theta[layout.tpm.clone()];
                let all: Vec<f64> = (0..t_len)
                    .flat_map(|t| covariate_tpm(n, n_covariates, coeffs, seq.covariates(t)))
                    .collect();
                let (delta, inv) = stationary_system(n, &all[..n * n])?;
                owned = (delta, inv);
                (Gammas::PerTime(all, n * n), &owned.0, &owned.1)
            }
            _ => unreachable!("homogeneous chains always carry a shared system"),
        };

        // scaled forward pass
        let mut phi = vec![0.0; t_len * n];
        let mut c = vec![0.0; t_len];
        for t in 0..t_len {
            if t == 0 {
                for i in 0..n {
                    phi[i] = delta[i] * p[i];
                }
            } else {
                let g = gammas.at(t);
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += phi[(t - 1) * n + i] * g[i * n + j];
                    }
                    phi[t * n + j] = acc * p[t * n + j];
                }
            }
            let ct: f64 = phi[t * n..(t + 1) * n].iter().sum();
            if !(ct > 0.0) || !ct.is_finite() {
                return Ok(SeqResult {
                    log_l: f64::NEG_INFINITY,
                    grad: Vec::new(),
                    floored,
                    out_of_support,
                });
            }
            c[t] = ct;
            phi[t * n..(t + 1) * n].iter_mut().for_each(|v| *v /= ct);
        }
        let log_l: f64 = c.iter().map(|v| v.ln()).sum();
        if !want_grad {
            return Ok(SeqResult {
                log_l,
                grad: Vec::new(),
                floored,
                out_of_support,
            });
        }

        // gradient buffer: full parameter vector plus one slot per state for sum_t u_t(i)
        let mut grad = vec![0.0; theta.len() + n];
        let mut gsum = vec![0.0; n * n];
        let mut psi = vec![1.0; n];
        let mut psi_prev = vec![0.0; n];
        let mut gt = vec![0.0; n * n];
        let mut obs_k = obs_times.len();
        for t in (0..t_len).rev() {
            let observed = !seq.is_missing(t);
            if observed {
                obs_k -= 1;
                for i in 0..n {
                    if floored_flag[t * n + i] {
                        continue;
                    }
                    let u = phi[t * n + i] * psi[i];
                    let f = p[t * n + i];
                    let r = layout.emissions[i].clone();
                    match emissions {
                        StateEmissions::Spline(_) => {
                            let d = &self.designs[s];
                            let coef = u / f;
                            let idx = &d.idx[obs_k * d.cells..(obs_k + 1) * d.cells];
                            let val = &d.val[obs_k * d.cells..(obs_k + 1) * d.cells];
                            // free coefficient j (>= 1) sits at r.start + j - 1
                            for (&j, &b) in idx.iter().zip(val) {
                                if j != 0 {
                                    grad[r.start + j as usize - 1] += coef * b;
                                }
                            }
                            grad[theta.len() + i] += u;
                        }
                        StateEmissions::Gaussian(gs) => {
                            let y = seq.obs(t).expect("observed");
                            let gl = gs[i].grad_log_density(y);
                            for (slot, v) in grad[r].iter_mut().zip(gl) {
                                *slot += u * v;
                            }
                        }
                    }
                }
            }
            if t > 0 {
                let g = gammas.at(t);
                let inv_c = 1.0 / c[t];
                for j in 0..n {
                    let pj = p[t * n + j] * psi[j] * inv_c;
                    for i in 0..n {
                        gt[i * n + j] = phi[(t - 1) * n + i] * pj;
                    }
                }
                for i in 0..n {
                    psi_prev[i] = (0..n).map(|j| g[i * n + j] * p[t * n + j] * psi[j]).sum::<f64>() * inv_c;
                }
                std::mem::swap(&mut psi, &mut psi_prev);
                match self.spec.transition {
                    TransitionSpec::Homogeneous => gsum.iter_mut().zip(&gt).for_each(|(a, b)| *a += b),
                    TransitionSpec::Covariate { .. } => {
                        accumulate_logit_grad(n, g, &gt, seq.covariates(t), &mut grad[layout.tpm.clone()]);
                    }
                }
            } else {
                // initial law: d logL / d delta_i, pushed through the stationary solve
                let gdelta: Vec<f64> = (0..n).map(|i| p[i] * psi[i] / c[0]).collect();
                let w: Vec<f64> = (0..n).map(|j| (0..n).map(|k| inv[(j, k)] * gdelta[k]).sum()).collect();
                for i in 0..n {
                    for j in 0..n {
                        gt[i * n + j] = delta[i] * w[j];
                    }
                }
                match self.spec.transition {
                    TransitionSpec::Homogeneous => gsum.iter_mut().zip(&gt).for_each(|(a, b)| *a += b),
                    TransitionSpec::Covariate { .. } => {
                        accumulate_logit_grad(n, gammas.at(0), &gt, seq.covariates(0), &mut grad[layout.tpm.clone()]);
                    }
                }
            }
        }
        if let TransitionSpec::Homogeneous = self.spec.transition {
            accumulate_logit_grad(n, gammas.at(0), &gsum, &[], &mut grad[layout.tpm.clone()]);
        }
        Ok(SeqResult {
            log_l,
            grad,
            floored,
            out_of_support,
        })
    }
}

enum Gammas<'g> {
    Shared(&'g [f64]),
    PerTime(Vec<f64>, usize),
}

impl Gammas<'_> {
    fn at(&self, t: usize) -> &[f64] {
        match self {
            Gammas::Shared(g) => g,
            Gammas::PerTime(all, nn) => &all[t * nn..(t + 1) * nn],
        }
    }
}

/// Row-major t.p.m. of a covariate model stored as a flat coefficient block.
fn covariate_tpm(n: usize, p: usize, coeffs: &[f64], x: &[f64]) -> Vec<f64> {
    let off = n * (n - 1);
    let mut nu = coeffs[..off].to_vec();
    for l in 0..p {
        for (v, w) in nu.iter_mut().zip(&coeffs[off * (l + 1)..off * (l + 2)]) {
            *v += w * x[l];
        }
    }
    tpm_from_logits(n, &nu)
}

/// Chains `dlogL/dGamma` through the row softmax into the off-diagonal logit
/// block, and for covariate models into the slopes via `x`.
fn accumulate_logit_grad(n: usize, gamma: &[f64], dgamma: &[f64], x: &[f64], out: &mut [f64]) {
    let off = n * (n - 1);
    let mut k = 0;
    for i in 0..n {
        let row_dot: f64 = (0..n).map(|m| dgamma[i * n + m] * gamma[i * n + m]).sum();
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = gamma[i * n + j] * (dgamma[i * n + j] - row_dot);
            out[k] += g;
            for (l, &xl) in x.iter().enumerate() {
                out[off * (l + 1) + k] += g * xl;
            }
            k += 1;
        }
    }
}

/// I.i.d. log-likelihood `sum log f(y)` of a spline density in its free coefficients.
pub struct IidSplineObjective {
    template: TensorEmission,
    design: SplineDesign,
}

impl IidSplineObjective {
    pub fn new(template: TensorEmission, points: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        let seq = Sequence::from_rows("iid", &rows)?;
        let design = SplineDesign::build(&seq, &template);
        Ok(IidSplineObjective { template, design })
    }

    pub fn n_params(&self) -> usize {
        self.template.beta().len() - 1
    }

    pub fn template(&self) -> &TensorEmission {
        &self.template
    }

    pub fn evaluate(&self, free: &[f64]) -> Result<(f64, Vec<f64>)> {
        if free.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: free.len(),
                context: "free coefficients".into(),
            });
        }
        let mut beta = Vec::with_capacity(free.len() + 1);
        beta.push(0.0);
        beta.extend_from_slice(free);
        let a = softmax(&beta);
        let cells = self.design.cells;
        let mut w = vec![0.0; a.len()];
        let mut count = 0.0;
        let mut ll = 0.0;
        for k in 0..self.design.inside.len() {
            let idx = &self.design.idx[k * cells..(k + 1) * cells];
            let val = &self.design.val[k * cells..(k + 1) * cells];
            let f: f64 = idx.iter().zip(val).map(|(&j, &b)| a[j as usize] * b).sum();
            if f < DENSITY_FLOOR {
                ll += DENSITY_FLOOR.ln();
                continue;
            }
            ll += f.ln();
            count += 1.0;
            for (&j, &b) in idx.iter().zip(val) {
                w[j as usize] += b / f;
            }
        }
        let grad = (1..a.len()).map(|k| a[k] * (w[k] - count)).collect();
        Ok((ll, grad))
    }
}
