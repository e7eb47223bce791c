//! Synthetic data: Markov state paths with copula-gamma or Gaussian emissions.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::emission::DensityFn;
use crate::error::{Error, Result};
use crate::gaussian::GaussianEmission;
use crate::hmm::{Sequence, TransitionMatrix};

/// Draws `g_1 ~ delta`, `g_t | g_{t-1} ~ Gamma[g_{t-1}, .]`; states are 0-based.
pub fn simulate_chain<R: Rng>(gamma: &TransitionMatrix, delta: &[f64], len: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = gamma.n_states();
    if delta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: delta.len(),
            context: "initial distribution".into(),
        });
    }
    let total: f64 = delta.iter().sum();
    if delta.iter().any(|&d| !(d >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("initial distribution must be nonnegative and sum to 1"));
    }
    let mut path = Vec::with_capacity(len);
    if len == 0 {
        return Ok(path);
    }
    let mut state = draw_categorical(delta, rng);
    path.push(state);
    for _ in 1..len {
        state = draw_categorical(&gamma.as_slice()[state * n..(state + 1) * n], rng);
        path.push(state);
    }
    Ok(path)
}

fn draw_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the cumulative sum: last positive entry
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Gamma quantile from a lower-tail probability `p`.
pub fn gamma_quantile(p: f64, shape: f64, scale: f64) -> f64 {
    if p <= 0.5 {
        scale * gamma_quantile_std(p, 1.0 - p, shape, false)
    } else {
        scale * gamma_quantile_std(p, 1.0 - p, shape, true)
    }
}

/// Solves `P(k, x) = p` (or `Q(k, x) = q` when `upper`, for accuracy near 1)
/// by Newton steps kept inside a bisection bracket.
fn gamma_quantile_std(p: f64, q: f64, k: f64, upper: bool) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if q <= 0.0 {
        return f64::INFINITY;
    }
    // increasing in x
    let f = |x: f64| if upper { q - gamma_ur(k, x) } else { gamma_lr(k, x) - p };
    let log_norm = ln_gamma(k);
    let mut lo = 0.0;
    let mut hi = k.max(1.0);
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = ((k - 1.0) * x.ln() - x - log_norm).exp();
        let mut next = x - fx / dens;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-12 * x.max(1e-300) || hi - lo <= 1e-12 * hi {
            return next;
        }
        x = next;
    }
    x
}

/// One state of the copula-gamma scenario: gamma marginals joined by a
/// Gaussian copula with correlation `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopulaGammaState {
    pub shape: [f64; 2],
    pub scale: [f64; 2],
    pub rho: f64,
}

impl CopulaGammaState {
    pub fn validate(&self) -> Result<()> {
        let ok = self.shape.iter().chain(&self.scale).all(|&v| v.is_finite() && v > 0.0)
            && self.rho > -1.0
            && self.rho < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid copula-gamma parameters {self:?}")))
        }
    }

    /// Normal score of a gamma margin, computed from the smaller tail.
    fn normal_score(&self, d: usize, y: f64) -> f64 {
        let x = y / self.scale[d];
        let lower = gamma_lr(self.shape[d], x);
        if lower <= 0.5 {
            norm_quantile(lower)
        } else {
            -norm_quantile(gamma_ur(self.shape[d], x))
        }
    }

    fn log_gamma_pdf(&self, d: usize, y: f64) -> f64 {
        let (k, s) = (self.shape[d], self.scale[d]);
        (k - 1.0) * y.ln() - y / s - ln_gamma(k) - k * s.ln()
    }

    /// Joint density: copula density times both gamma densities.
    pub fn density(&self, y: &[f64]) -> f64 {
        if !(y[0] > 0.0 && y[1] > 0.0) {
            return 0.0;
        }
        let z1 = self.normal_score(0, y[0]);
        let z2 = self.normal_score(1, y[1]);
        let r = self.rho;
        let om = 1.0 - r * r;
        let log_c = -0.5 * om.ln() - (r * r * (z1 * z1 + z2 * z2) - 2.0 * r * z1 * z2) / (2.0 * om);
        (log_c + self.log_gamma_pdf(0, y[0]) + self.log_gamma_pdf(1, y[1])).exp()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let z = [a, self.rho * a + (1.0 - self.rho * self.rho).sqrt() * b];
        let mut out = [0.0; 2];
        for d in 0..2 {
            // u = Phi(z); the upper tail is passed directly when z > 0
            let x = if z[d] <= 0.0 {
                gamma_quantile_std(norm_cdf(z[d]), 1.0 - norm_cdf(z[d]), self.shape[d], false)
            } else {
                let q = norm_cdf(-z[d]);
                gamma_quantile_std(1.0 - q, q, self.shape[d], true)
            };
            out[d] = x * self.scale[d];
        }
        out
    }

    pub fn mean(&self) -> [f64; 2] {
        [self.shape[0] * self.scale[0], self.shape[1] * self.scale[1]]
    }
}

impl DensityFn for CopulaGammaState {
    fn dim(&self) -> usize {
        2
    }

    fn pdf(&self, y: &[f64]) -> f64 {
        self.density(y)
    }
}

/// Draws one 2-vector from a copula-gamma state.
pub fn sample_copula_gamma<R: Rng>(state: &CopulaGammaState, rng: &mut R) -> [f64; 2] {
    state.sample(rng)
}

/// Spearman rank correlation of a Gaussian copula with correlation `rho`.
pub fn gaussian_copula_spearman(rho: f64) -> f64 {
    6.0 / PI * (rho / 2.0).asin()
}

/// Per-state emission law of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScenarioEmissions {
    CopulaGamma { states: Vec<CopulaGammaState> },
    Gaussian { states: Vec<GaussianEmission> },
}

impl ScenarioEmissions {
    pub fn n_states(&self) -> usize {
        match self {
            ScenarioEmissions::CopulaGamma { states } => states.len(),
            ScenarioEmissions::Gaussian { states } => states.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ScenarioEmissions::CopulaGamma { .. } => 2,
            ScenarioEmissions::Gaussian { states } => states.first().map_or(0, |g| g.dim()),
        }
    }

    pub fn state_density(&self, i: usize) -> &dyn DensityFn {
        match self {
            ScenarioEmissions::CopulaGamma { states } => &states[i],
            ScenarioEmissions::Gaussian { states } => &states[i],
        }
    }

    fn sample<R: Rng>(&self, i: usize, rng: &mut R) -> Vec<f64> {
        match self {
            ScenarioEmissions::CopulaGamma { states } => states[i].sample(rng).to_vec(),
            ScenarioEmissions::Gaussian { states } => {
                let z: Vec<f64> = (0..states[i].dim()).map(|_| rng.sample(StandardNormal)).collect();
                states[i].from_standard(&z)
            }
        }
    }

    /// Default copula-gamma states: overlapping, differently oriented.
    pub fn default_copula_gamma() -> Self {
        ScenarioEmissions::CopulaGamma {
            states: vec![
                CopulaGammaState {
                    shape: [2.5, 2.5],
                    scale: [1.0, 1.0],
                    rho: 0.5,
                },
                CopulaGammaState {
                    shape: [6.0, 6.0],
                    scale: [0.8, 0.8],
                    rho: -0.4,
                },
            ],
        }
    }

    /// Default Gaussian states: means (1, 1) and (-1, -1), unit variances, correlations 0.3 and -0.3.
    pub fn default_gaussian() -> Self {
        let g = |m: f64, r: f64| GaussianEmission::new(vec![m, m], &[vec![1.0, r], vec![r, 1.0]]).expect("valid defaults");
        ScenarioEmissions::Gaussian {
            states: vec![g(1.0, 0.3), g(-1.0, -0.3)],
        }
    }
}

/// One simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub tpm: TransitionMatrix,
    pub emissions: ScenarioEmissions,
    pub length: usize,
    pub runs: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn copula_gamma_default() -> Self {
        ScenarioConfig {
            tpm: TransitionMatrix::persistent(2, 0.97).expect("valid defaults"),
            emissions: ScenarioEmissions::default_copula_gamma(),
            length: 2000,
            runs: 100,
            seed: 1,
        }
    }

    pub fn gaussian_default() -> Self {
        ScenarioConfig {
            emissions: ScenarioEmissions::default_gaussian(),
            ..Self::copula_gamma_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.runs == 0 {
            return Err(Error::invalid("scenario needs length >= 1 and runs >= 1"));
        }
        if self.emissions.n_states() != self.tpm.n_states() {
            return Err(Error::DimensionMismatch {
                expected: self.tpm.n_states(),
                got: self.emissions.n_states(),
                context: "emission states versus t.p.m.".into(),
            });
        }
        match &self.emissions {
            ScenarioEmissions::CopulaGamma { states } => states.iter().try_for_each(|s| s.validate())?,
            ScenarioEmissions::Gaussian { states } => {
                let d = self.emissions.dim();
                if states.iter().any(|g| g.dim() != d) {
                    return Err(Error::invalid("Gaussian states differ in dimension"));
                }
            }
        }
        crate::hmm::stationary_distribution(&self.tpm).map(|_| ())
    }

    /// Generator of run `run`: seeded with `seed + run`.
    pub fn run_rng(&self, run: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(run as u64))
    }

    /// Simulates one run (chain started from the stationary law).
    pub fn simulate<R: Rng>(&self, id: &str, rng: &mut R) -> Result<SimulatedRun> {
        self.validate()?;
        let delta = crate::hmm::stationary_distribution(&self.tpm)?;
        let states = simulate_chain(&self.tpm, &delta, self.length, rng)?;
        let rows: Vec<Vec<f64>> = states.iter().map(|&s| self.emissions.sample(s, rng)).collect();
        Ok(SimulatedRun {
            sequence: Sequence::from_rows(id, &rows)?,
            states,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub sequence: Sequence,
    pub states: Vec<usize>,
}
