//! Tensor-product B-spline emission densities with softmax-constrained coefficients.

use serde::{Deserialize, Serialize};

use crate::basis::{SplineBasis, LOCAL};
use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, integrate_with};

/// Floor applied before taking logs of a density value.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Anything that can be evaluated as a density on `R^D`.
pub trait DensityFn: Sync {
    fn dim(&self) -> usize;
    /// Density at `y`; `y` is assumed finite and of length `dim()`.
    fn pdf(&self, y: &[f64]) -> f64;
}

/// Softmax over the whole coefficient tensor, shifted by the maximum before exponentiation.
pub fn coefficients_from_beta(beta: &[f64]) -> Result<Vec<f64>> {
    if beta.is_empty() {
        return Err(Error::invalid("empty coefficient tensor"));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::invalid("non-finite beta"));
    }
    Ok(softmax(beta))
}

pub(crate) fn softmax(beta: &[f64]) -> Vec<f64> {
    let max = beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = beta.iter().map(|b| (b - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|a| *a /= total);
    out
}

/// One axis of a Cartesian evaluation grid: `count` equally spaced points on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Self {
        GridAxis { lo, hi, count }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        if k + 1 == self.count {
            self.hi
        } else {
            self.lo + k as f64 * self.step()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        let g = GridSpec { axes };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::invalid("grid has no axes"));
        }
        for (d, a) in self.axes.iter().enumerate() {
            if a.count < 2 || !a.lo.is_finite() || !a.hi.is_finite() || a.lo >= a.hi {
                return Err(Error::invalid(format!(
                    "degenerate grid axis {d}: [{}, {}] with {} points",
                    a.lo, a.hi, a.count
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major multi-index (first axis slowest) of flat position `flat`.
    pub fn point(&self, mut flat: usize, out: &mut [f64]) {
        for d in (0..self.axes.len()).rev() {
            let c = self.axes[d].count;
            out[d] = self.axes[d].point(flat % c);
            flat /= c;
        }
    }

    /// Evaluates `f` at every grid point in row-major order.
    pub fn evaluate(&self, f: &dyn DensityFn) -> Result<Vec<f64>> {
        self.validate()?;
        if f.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: f.dim(),
                got: self.dim(),
                context: "grid dimension".into(),
            });
        }
        let mut y = vec![0.0; self.dim()];
        Ok((0..self.len())
            .map(|k| {
                self.point(k, &mut y);
                f.pdf(&y)
            })
            .collect())
    }
}

/// Emission density `f(y) = sum_j a_j prod_d B_{j_d}(y_d)` of one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorDef", into = "TensorDef")]
pub struct TensorEmission {
    bases: Vec<SplineBasis>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    beta: Vec<f64>,
    coefficients: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorDef {
    bases: Vec<SplineBasis>,
    beta: Vec<f64>,
}

impl TryFrom<TensorDef> for TensorEmission {
    type Error = Error;

    fn try_from(d: TensorDef) -> Result<Self> {
        Self::from_beta(d.bases, d.beta)
    }
}

impl From<TensorEmission> for TensorDef {
    fn from(e: TensorEmission) -> Self {
        TensorDef {
            bases: e.bases,
            beta: e.beta,
        }
    }
}

impl TensorEmission {
    /// Uniform coefficients (`beta = 0`).
    pub fn uniform(bases: Vec<SplineBasis>) -> Result<Self> {
        let len = bases.iter().map(|b| b.num_basis()).product();
        Self::from_beta(bases, vec![0.0; len])
    }

    /// `beta` is the full row-major tensor (first dimension slowest); its first
    /// entry is the reference category and must be 0.
    pub fn from_beta(bases: Vec<SplineBasis>, beta: Vec<f64>) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::invalid("emission needs at least one dimension"));
        }
        let shape: Vec<usize> = bases.iter().map(|b| b.num_basis()).collect();
        let len: usize = shape.iter().product();
        if beta.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: beta.len(),
                context: "beta tensor length".into(),
            });
        }
        if beta[0] != 0.0 {
            return Err(Error::invalid("reference coefficient beta[0] must be 0"));
        }
        let mut strides = vec![1; shape.len()];
        for d in (0..shape.len() - 1).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        let coefficients = coefficients_from_beta(&beta)?;
        Ok(TensorEmission {
            bases,
            shape,
            strides,
            beta,
            coefficients,
        })
    }

    pub fn set_beta(&mut self, beta: Vec<f64>) -> Result<()> {
        *self = Self::from_beta(std::mem::take(&mut self.bases), beta)?;
        Ok(())
    }

    /// Free coefficients, i.e. `beta` without the pinned reference entry.
    pub fn free_beta(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn bases(&self) -> &[SplineBasis] {
        &self.bases
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn dim(&self) -> usize {
        self.bases.len()
    }

    pub fn in_support(&self, y: &[f64]) -> bool {
        self.bases.iter().zip(y).all(|(b, &v)| b.contains(v))
    }

    fn check_point(&self, y: &[f64]) -> Result<()> {
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
        Ok(())
    }

    pub fn density(&self, y: &[f64]) -> Result<f64> {
        self.check_point(y)?;
        Ok(self.pdf_unchecked(y))
    }

    /// `(log max(f, floor), floored)`.
    pub fn log_density(&self, y: &[f64]) -> Result<(f64, bool)> {
        let f = self.density(y)?;
        Ok(if f < DENSITY_FLOOR {
            (DENSITY_FLOOR.ln(), true)
        } else {
            (f.ln(), false)
        })
    }

    /// Calls `visit(flat_index, product_of_basis_values)` for each of the 4^D
    /// locally supported tensor cells at `y`. Returns false if `y` is outside the support.
    pub fn for_each_local(&self, y: &[f64], mut visit: impl FnMut(usize, f64)) -> bool {
        let dim = self.dim();
        let mut starts = [0usize; 8];
        let mut vals = [[0.0; LOCAL]; 8];
        assert!(dim <= 8, "tensor emissions support at most 8 dimensions");
        for d in 0..dim {
            match self.bases[d].local_values(y[d]) {
                Some((s, v)) => {
                    starts[d] = s;
                    vals[d] = v;
                }
                None => return false,
            }
        }
        let cells = LOCAL.pow(dim as u32);
        for cell in 0..cells {
            let mut rem = cell;
            let mut flat = 0;
            let mut prod = 1.0;
            for d in (0..dim).rev() {
                let k = rem % LOCAL;
                rem /= LOCAL;
                flat += (starts[d] + k) * self.strides[d];
                prod *= vals[d][k];
            }
            visit(flat, prod);
        }
        true
    }

    fn pdf_unchecked(&self, y: &[f64]) -> f64 {
        if self.dim() == 2 {
            return self.pdf_2d(y);
        }
        let mut total = 0.0;
        self.for_each_local(y, |flat, b| total += self.coefficients[flat] * b);
        total
    }

    /// Two-dimensional contraction: the 4x4 coefficient block is reduced along
    /// the second axis first, then against the first-axis basis values.
    fn pdf_2d(&self, y: &[f64]) -> f64 {
        let (Some((s0, v0)), Some((s1, v1))) = (self.bases[0].local_values(y[0]), self.bases[1].local_values(y[1])) else {
            return 0.0;
        };
        let stride = self.strides[0];
        let mut total = 0.0;
        for (i, &b0) in v0.iter().enumerate() {
            let row = &self.coefficients[(s0 + i) * stride + s1..(s0 + i) * stride + s1 + LOCAL];
            let inner: f64 = row.iter().zip(&v1).map(|(a, b)| a * b).sum();
            total += b0 * inner;
        }
        total
    }

    /// Gradient of `log f(y)` with respect to the free coefficients.
    pub fn grad_log_density(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_point(y)?;
        let f = self.pdf_unchecked(y);
        let mut g: Vec<f64> = self.coefficients.iter().map(|a| -a).collect();
        if f > 0.0 {
            self.for_each_local(y, |flat, b| g[flat] += self.coefficients[flat] * b / f);
        } else {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        g.remove(0);
        Ok(g)
    }

    /// Row-major density values on a Cartesian grid.
    pub fn density_grid(&self, grid: &GridSpec) -> Result<Vec<f64>> {
        grid.evaluate(self)
    }

    /// Integral over the support by Gauss-Legendre quadrature on each knot cell.
    ///
    /// Eight nodes per span integrate the piecewise-cubic tensor exactly (up to rounding).
    pub fn integral(&self) -> f64 {
        let rule = gauss_legendre(8);
        let spans: Vec<Vec<(f64, f64)>> = self
            .bases
            .iter()
            .map(|b| {
                b.knots()
                    .windows(2)
                    .filter(|w| w[1] > w[0])
                    .map(|w| (w[0], w[1]))
                    .collect()
            })
            .collect();
        let mut y = vec![0.0; self.dim()];
        self.integrate_dims(&rule, &spans, 0, &mut y)
    }

    fn integrate_dims(&self, rule: &(Vec<f64>, Vec<f64>), spans: &[Vec<(f64, f64)>], d: usize, y: &mut [f64]) -> f64 {
        if d == self.dim() {
            return self.pdf_unchecked(y);
        }
        let mut total = 0.0;
        for &(a, b) in &spans[d] {
            total += integrate_with(rule, a, b, |x| {
                y[d] = x;
                self.integrate_dims(rule, spans, d + 1, y)
            });
        }
        total
    }

    /// Grid covering the support with `count` points per dimension.
    pub fn support_grid(&self, count: usize) -> GridSpec {
        GridSpec {
            axes: self
                .bases
                .iter()
                .map(|b| {
                    let (lo, hi) = b.support();
                    GridAxis::new(lo, hi, count)
                })
                .collect(),
        }
    }
}

impl DensityFn for TensorEmission {
    fn dim(&self) -> usize {
        self.bases.len()
    }

    fn pdf(&self, y: &[f64]) -> f64 {
        self.pdf_unchecked(y)
    }
}
