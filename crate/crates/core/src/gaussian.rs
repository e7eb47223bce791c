//! Multivariate normal emissions, the parametric comparison model.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::emission::DensityFn;
use crate::error::{Error, Result};

/// Multivariate normal density parameterized by the Cholesky factor `L` of its
/// covariance. The diagonal of `L` is stored on the log scale so every stored
/// value is unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmission {
    mean: Vec<f64>,
    /// Lower triangle of `L`, row-major (`(0,0), (1,0), (1,1), ...`), diagonal as `ln L_aa`.
    factor: Vec<f64>,
}

pub(crate) fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[inline]
fn tri(a: usize, b: usize) -> usize {
    a * (a + 1) / 2 + b
}

impl GaussianEmission {
    /// Builds from a mean and an SPD covariance (Cholesky-factored here).
    pub fn new(mean: Vec<f64>, covariance: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("covariance shape does not match the mean"));
        }
        if mean.iter().chain(covariance.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite Gaussian parameter"));
        }
        for a in 0..d {
            for b in 0..a {
                if (covariance[a][b] - covariance[b][a]).abs() > 1e-12 * (1.0 + covariance[a][b].abs()) {
                    return Err(Error::invalid("covariance is not symmetric"));
                }
            }
        }
        let mut l = vec![0.0; tri_len(d)];
        for a in 0..d {
            for b in 0..=a {
                let mut s = covariance[a][b];
                for k in 0..b {
                    s -= l[tri(a, k)] * l[tri(b, k)];
                }
                if a == b {
                    if s <= 0.0 {
                        return Err(Error::invalid("covariance is not positive definite"));
                    }
                    l[tri(a, a)] = s.sqrt();
                } else {
                    l[tri(a, b)] = s / l[tri(b, b)];
                }
            }
        }
        for a in 0..d {
            l[tri(a, a)] = l[tri(a, a)].ln();
        }
        Ok(GaussianEmission { mean, factor: l })
    }

    /// Builds directly from unconstrained parameters (mean, then factor with log diagonal).
    pub fn from_unconstrained(mean: Vec<f64>, factor: Vec<f64>) -> Result<Self> {
        if factor.len() != tri_len(mean.len()) {
            return Err(Error::DimensionMismatch {
                expected: tri_len(mean.len()),
                got: factor.len(),
                context: "Cholesky factor length".into(),
            });
        }
        if mean.iter().chain(&factor).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite Gaussian parameter"));
        }
        Ok(GaussianEmission { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn unconstrained_factor(&self) -> &[f64] {
        &self.factor
    }

    fn l(&self, a: usize, b: usize) -> f64 {
        let v = self.factor[tri(a, b)];
        if a == b {
            v.exp()
        } else {
            v
        }
    }

    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut c = vec![vec![0.0; d]; d];
        for a in 0..d {
            for b in 0..=a {
                let s: f64 = (0..=b).map(|k| self.l(a, k) * self.l(b, k)).sum();
                c[a][b] = s;
                c[b][a] = s;
            }
        }
        c
    }

    /// `mean + L z`: maps a standard normal vector to a draw from this density.
    pub fn from_standard(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|a| self.mean[a] + (0..=a).map(|k| self.l(a, k) * z[k]).sum::<f64>())
            .collect()
    }

    /// `z = L^{-1}(y - mean)`.
    fn whiten(&self, y: &[f64], z: &mut [f64]) {
        for a in 0..self.dim() {
            let mut s = y[a] - self.mean[a];
            for k in 0..a {
                s -= self.l(a, k) * z[k];
            }
            z[a] = s / self.l(a, a);
        }
    }

    fn log_pdf_unchecked(&self, y: &[f64]) -> f64 {
        let d = self.dim();
        let mut z = [0.0; 16];
        let z = &mut z[..d];
        self.whiten(y, z);
        let quad: f64 = z.iter().map(|v| v * v).sum();
        let log_det: f64 = (0..d).map(|a| self.factor[tri(a, a)]).sum();
        -0.5 * d as f64 * (2.0 * PI).ln() - log_det - 0.5 * quad
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: y.len(),
                context: "observation dimension".into(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("density at non-finite point"));
        }
        Ok(self.log_pdf_unchecked(y))
    }

    pub fn density(&self, y: &[f64]) -> Result<f64> {
        self.log_density(y).map(f64::exp)
    }

    /// Gradient of `log f(y)` with respect to (mean, unconstrained factor).
    pub fn grad_log_density(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut z = vec![0.0; d];
        self.whiten(y, &mut z);
        // w = L^{-T} z = Sigma^{-1}(y - mean)
        let mut w = vec![0.0; d];
        for a in (0..d).rev() {
            let mut s = z[a];
            for k in a + 1..d {
                s -= self.l(k, a) * w[k];
            }
            w[a] = s / self.l(a, a);
        }
        let mut g = Vec::with_capacity(d + tri_len(d));
        g.extend_from_slice(&w);
        for a in 0..d {
            for b in 0..=a {
                let dl = w[a] * z[b];
                g.push(if a == b { dl * self.l(a, a) - 1.0 } else { dl });
            }
        }
        g
    }
}

impl DensityFn for GaussianEmission {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn pdf(&self, y: &[f64]) -> f64 {
        self.log_pdf_unchecked(y).exp()
    }
}
