//! Covariate-dependent transition probabilities through a row-wise multinomial
//! logit with the diagonal as reference category.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{stationary_distribution, TransitionMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransition {
    n_states: usize,
    n_covariates: usize,
    /// Intercepts, `N x N` row-major; diagonal entries are held at 0.
    intercepts: Vec<f64>,
    /// Slopes, `P` consecutive `N x N` blocks; diagonal entries are held at 0.
    slopes: Vec<f64>,
}

impl CovariateTransition {
    pub fn new(n_states: usize, n_covariates: usize, mut intercepts: Vec<f64>, mut slopes: Vec<f64>) -> Result<Self> {
        let nn = n_states * n_states;
        if n_states == 0 || intercepts.len() != nn || slopes.len() != nn * n_covariates {
            return Err(Error::invalid(format!(
                "covariate t.p.m. with {n_states} states and {n_covariates} covariates needs {nn} intercepts and {} slopes",
                nn * n_covariates
            )));
        }
        if intercepts.iter().chain(&slopes).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite covariate coefficient"));
        }
        for i in 0..n_states {
            intercepts[i * n_states + i] = 0.0;
            for l in 0..n_covariates {
                slopes[l * nn + i * n_states + i] = 0.0;
            }
        }
        Ok(CovariateTransition {
            n_states,
            n_covariates,
            intercepts,
            slopes,
        })
    }

    /// All coefficients zero: uniform rows at every covariate value.
    pub fn zeros(n_states: usize, n_covariates: usize) -> Self {
        let nn = n_states * n_states;
        CovariateTransition {
            n_states,
            n_covariates,
            intercepts: vec![0.0; nn],
            slopes: vec![0.0; nn * n_covariates],
        }
    }

    /// Intercept-only coefficients reproducing `gamma` (slopes zero).
    pub fn from_matrix(gamma: &TransitionMatrix, n_covariates: usize) -> Result<Self> {
        let n = gamma.n_states();
        let mut intercepts = vec![0.0; n * n];
        for i in 0..n {
            let gii = gamma.get(i, i);
            for j in 0..n {
                let gij = gamma.get(i, j);
                if gij <= 0.0 || gii <= 0.0 {
                    return Err(Error::invalid("logit inversion needs strictly positive transition probabilities"));
                }
                if i != j {
                    intercepts[i * n + j] = (gij / gii).ln();
                }
            }
        }
        Self::new(n, n_covariates, intercepts, vec![0.0; n * n * n_covariates])
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Linear predictor `nu_ij(x)`.
    pub fn logit(&self, i: usize, j: usize, x: &[f64]) -> f64 {
        if i == j {
            return 0.0;
        }
        let n = self.n_states;
        let nn = n * n;
        let mut v = self.intercepts[i * n + j];
        for (l, &xl) in x.iter().enumerate() {
            v += self.slopes[l * nn + i * n + j] * xl;
        }
        v
    }

    /// Writes the row-major transition matrix at `x` into `out` (no input checks).
    pub(crate) fn fill_tpm(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_states;
        for i in 0..n {
            let row = &mut out[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r = self.logit(i, j, x);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            row.iter_mut().for_each(|r| *r /= total);
        }
    }

    pub fn tpm_at(&self, x: &[f64]) -> Result<TransitionMatrix> {
        if x.len() != self.n_covariates {
            return Err(Error::DimensionMismatch {
                expected: self.n_covariates,
                got: x.len(),
                context: "covariate vector".into(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite covariate value"));
        }
        let mut data = vec![0.0; self.n_states * self.n_states];
        self.fill_tpm(x, &mut data);
        TransitionMatrix::from_row_major(self.n_states, data)
    }

    /// Stationary distribution of the t.p.m. frozen at each grid point.
    pub fn steady_state_curve(&self, grid: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        grid.iter()
            .map(|x| {
                let tpm = self.tpm_at(x)?;
                stationary_distribution(&tpm).map_err(|e| match e {
                    Error::DegenerateChain(msg) => Error::DegenerateChain(format!("at covariates {x:?}: {msg}")),
                    other => other,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case_study() -> TransitionMatrix {
        TransitionMatrix::new(vec![vec![0.948, 0.052], vec![0.034, 0.966]]).unwrap()
    }

    #[test]
    fn zero_coefficients_give_uniform_rows() {
        let c = CovariateTransition::zeros(2, 1);
        let g = c.tpm_at(&[3.0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(g.get(i, j), 0.5);
            }
        }
        let curve = c.steady_state_curve(&[vec![-1.0], vec![0.0], vec![2.0]]).unwrap();
        assert!(curve.iter().all(|d| (d[0] - 0.5).abs() < 1e-14));
    }

    #[test]
    fn intercept_only_reproduces_case_study_matrix() {
        let c = CovariateTransition::new(
            2,
            0,
            vec![0.0, (0.052f64 / 0.948).ln(), (0.034f64 / 0.966).ln(), 0.0],
            vec![],
        )
        .unwrap();
        let g = c.tpm_at(&[]).unwrap();
        let target = case_study();
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.get(i, j) - target.get(i, j)).abs() < 1e-12);
            }
        }
        let curve = c.steady_state_curve(&[vec![], vec![]]).unwrap();
        for d in curve {
            assert!((d[0] - 0.034 / 0.086).abs() < 1e-12);
            assert!((d[1] - 0.052 / 0.086).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_slope_is_monotone() {
        let c = CovariateTransition::new(2, 1, vec![0.0, -2.0, -1.0, 0.0], vec![0.0, 0.8, 0.0, 0.0]).unwrap();
        let mut prev = 0.0;
        for k in 0..20 {
            let x = -3.0 + 0.3 * k as f64;
            let g12 = c.tpm_at(&[x]).unwrap().get(0, 1);
            assert!(g12 > prev);
            prev = g12;
        }
        assert!(c.tpm_at(&[f64::NAN]).is_err());
        assert!(c.tpm_at(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_point_curve_equals_stationary() {
        let c = CovariateTransition::new(3, 1, vec![0.0, -1.0, -2.0, 0.5, 0.0, -1.0, -0.3, 0.2, 0.0], vec![0.0, 0.3, -0.2, 0.1, 0.0, 0.4, -0.5, 0.6, 0.0]).unwrap();
        let x = vec![0.7];
        let curve = c.steady_state_curve(std::slice::from_ref(&x)).unwrap();
        let direct = stationary_distribution(&c.tpm_at(&x).unwrap()).unwrap();
        assert_eq!(curve[0], direct);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn logit_inversion_round_trips(raw in prop::collection::vec(0.05f64..1.0, 9), x in prop::collection::vec(-2.0f64..2.0, 2)) {
                let rows: Vec<Vec<f64>> = raw.chunks(3).map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                }).collect();
                let g = TransitionMatrix::new(rows).unwrap();
                let c = CovariateTransition::from_matrix(&g, 0).unwrap();
                let back = c.tpm_at(&[]).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        prop_assert!((back.get(i, j) - g.get(i, j)).abs() < 1e-14);
                    }
                }
                // any covariate value yields a valid matrix
                let c2 = CovariateTransition::new(3, 2, c.intercepts().to_vec(), raw.iter().chain(&raw).map(|v| v - 0.5).collect()).unwrap();
                let m = c2.tpm_at(&x).unwrap();
                for i in 0..3 {
                    let s: f64 = (0..3).map(|j| m.get(i, j)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!((0..3).all(|j| m.get(i, j) > 0.0 && m.get(i, j) < 1.0));
                }
            }
        }
    }
}
