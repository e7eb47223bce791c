//! Univariate cubic B-spline bases on an equally spaced, clamped knot grid,
//! scaled so that every basis function is a probability density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, integrate_with};

pub const DEGREE: usize = 3;
/// Number of basis functions that can be nonzero at a point.
pub const LOCAL: usize = DEGREE + 1;

const QUAD_NODES_PER_SPAN: usize = 16;

/// Fraction of the data range added on either side by [`support_from_data`].
pub const DEFAULT_SUPPORT_MARGIN: f64 = 0.01;

/// A normalized cubic B-spline basis for one coordinate of the observation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisDef", into = "BasisDef")]
pub struct SplineBasis {
    dimension_index: usize,
    num_basis: usize,
    support_lo: f64,
    support_hi: f64,
    knots: Vec<f64>,
    norm_constants: Vec<f64>,
}

/// The serialized form: the knot vector and normalization are rebuilt on load.
#[derive(Serialize, Deserialize)]
struct BasisDef {
    dimension_index: usize,
    num_basis: usize,
    support_lo: f64,
    support_hi: f64,
}

impl TryFrom<BasisDef> for SplineBasis {
    type Error = Error;

    fn try_from(d: BasisDef) -> Result<Self> {
        Self::build(d.dimension_index, d.num_basis, d.support_lo, d.support_hi)
    }
}

impl From<SplineBasis> for BasisDef {
    fn from(b: SplineBasis) -> Self {
        BasisDef {
            dimension_index: b.dimension_index,
            num_basis: b.num_basis,
            support_lo: b.support_lo,
            support_hi: b.support_hi,
        }
    }
}

/// Support `[min - h, max + h]` with `h = margin * (max - min)`.
///
/// Degenerate (constant) data gets a unit-width window around the value.
pub fn support_from_data(values: impl IntoIterator<Item = f64>, margin: f64) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for v in values {
        if !v.is_finite() {
            return Err(Error::invalid("support_from_data: non-finite value"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
        any = true;
    }
    if !any {
        return Err(Error::invalid("support_from_data: no observed values"));
    }
    let range = hi - lo;
    if range <= 0.0 {
        return Ok((lo - 0.5, hi + 0.5));
    }
    Ok((lo - margin * range, hi + margin * range))
}

impl SplineBasis {
    /// Builds `num_basis` clamped cubic B-splines with equally spaced interior knots.
    pub fn build(dimension_index: usize, num_basis: usize, support_lo: f64, support_hi: f64) -> Result<Self> {
        if num_basis < LOCAL {
            return Err(Error::invalid(format!(
                "a cubic basis needs at least {LOCAL} functions, got {num_basis}"
            )));
        }
        if !support_lo.is_finite() || !support_hi.is_finite() || support_lo >= support_hi {
            return Err(Error::invalid(format!(
                "invalid support [{support_lo}, {support_hi}]"
            )));
        }
        Ok(Self::build_unchecked(dimension_index, num_basis, support_lo, support_hi))
    }

    fn build_unchecked(dimension_index: usize, num_basis: usize, lo: f64, hi: f64) -> Self {
        let n_spans = num_basis - DEGREE;
        let h = (hi - lo) / n_spans as f64;
        let mut knots = Vec::with_capacity(num_basis + LOCAL);
        knots.extend(std::iter::repeat_n(lo, LOCAL));
        for k in 1..n_spans {
            knots.push(lo + k as f64 * h);
        }
        knots.extend(std::iter::repeat_n(hi, LOCAL));

        let mut basis = SplineBasis {
            dimension_index,
            num_basis,
            support_lo: lo,
            support_hi: hi,
            knots,
            norm_constants: vec![1.0; num_basis],
        };

        let rule = gauss_legendre(QUAD_NODES_PER_SPAN);
        let mut integrals = vec![0.0; num_basis];
        for span in DEGREE..num_basis {
            let (a, b) = (basis.knots[span], basis.knots[span + 1]);
            for (k, slot) in integrals[span - DEGREE..=span].iter_mut().enumerate() {
                *slot += integrate_with(&rule, a, b, |x| basis.span_values(span, x)[k]);
            }
        }
        basis.norm_constants = integrals.iter().map(|v| 1.0 / v).collect();
        basis
    }

    pub fn dimension_index(&self) -> usize {
        self.dimension_index
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn support(&self) -> (f64, f64) {
        (self.support_lo, self.support_hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn norm_constants(&self) -> &[f64] {
        &self.norm_constants
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.support_lo && x <= self.support_hi
    }

    /// Knot span index `i` with `knots[i] <= x < knots[i + 1]`; the right end belongs to the last span.
    fn span_of(&self, x: f64) -> usize {
        let n_spans = self.num_basis - DEGREE;
        let h = (self.support_hi - self.support_lo) / n_spans as f64;
        let mut k = ((x - self.support_lo) / h).floor() as isize;
        k = k.clamp(0, n_spans as isize - 1);
        let mut span = DEGREE + k as usize;
        // floor() on the rescaled coordinate can land one span off near a knot
        while span > DEGREE && x < self.knots[span] {
            span -= 1;
        }
        while span < self.num_basis - 1 && x >= self.knots[span + 1] {
            span += 1;
        }
        span
    }

    /// Unnormalized values of the four functions `span - 3 ..= span` at `x` (Cox-de Boor triangle).
    fn span_values(&self, span: usize, x: f64) -> [f64; LOCAL] {
        let t = &self.knots;
        let mut n = [0.0; LOCAL];
        let mut left = [0.0; LOCAL];
        let mut right = [0.0; LOCAL];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// Index of the first of the (up to) four nonzero functions and their
    /// normalized values, or `None` outside the support.
    pub fn local_values(&self, x: f64) -> Option<(usize, [f64; LOCAL])> {
        if !self.contains(x) {
            return None;
        }
        let span = self.span_of(x);
        let mut v = self.span_values(span, x);
        let start = span - DEGREE;
        for (k, val) in v.iter_mut().enumerate() {
            *val *= self.norm_constants[start + k];
        }
        Some((start, v))
    }

    /// Unnormalized basis values; these sum to one on the support.
    pub fn eval_unnormalized(&self, x: f64) -> Result<Vec<f64>> {
        check_finite(x)?;
        let mut out = vec![0.0; self.num_basis];
        if self.contains(x) {
            let span = self.span_of(x);
            let v = self.span_values(span, x);
            out[span - DEGREE..=span].copy_from_slice(&v);
        }
        Ok(out)
    }

    /// Normalized basis values `(B_1(x), ..., B_n(x))`; all zero outside the support.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        check_finite(x)?;
        let mut out = vec![0.0; self.num_basis];
        if let Some((start, v)) = self.local_values(x) {
            out[start..start + LOCAL].copy_from_slice(&v);
        }
        Ok(out)
    }
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("basis evaluation at non-finite x = {x}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook recursive Cox-de Boor definition, independent of the triangle above.
    fn cox_de_boor(t: &[f64], j: usize, p: usize, x: f64, last: bool) -> f64 {
        if p == 0 {
            let inside = t[j] <= x && x < t[j + 1];
            // right-closed last nonempty interval
            let at_end = last && x == t[t.len() - 1] && x == t[j + 1] && t[j] < t[j + 1];
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[j + p] - t[j];
        if d1 > 0.0 {
            v += (x - t[j]) / d1 * cox_de_boor(t, j, p - 1, x, last);
        }
        let d2 = t[j + p + 1] - t[j + 1];
        if d2 > 0.0 {
            v += (t[j + p + 1] - x) / d2 * cox_de_boor(t, j + 1, p - 1, x, last);
        }
        v
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 40)
    }

    #[test]
    fn rejects_too_few_functions() {
        assert!(matches!(SplineBasis::build(0, 3, 0.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(SplineBasis::build(0, 5, 1.0, 1.0).is_err());
        assert!(SplineBasis::build(0, 5, 0.0, f64::NAN).is_err());
        assert!(SplineBasis::build(0, 5, 2.0, 1.0).is_err());
    }

    #[test]
    fn partition_of_unity() {
        let b = SplineBasis::build(0, 10, 0.0, 1.0).unwrap();
        let s: f64 = b.eval_unnormalized(0.37).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        for &x in &[0.0, 1.0, 1.0 / 7.0, 0.999_999] {
            let s: f64 = b.eval_unnormalized(x).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "x = {x}: {s}");
        }
    }

    #[test]
    fn normalized_functions_integrate_to_one() {
        let b = SplineBasis::build(0, 7, -3.0, 3.0).unwrap();
        let t = b.knots().to_vec();
        for j in 0..7 {
            let mut total = 0.0;
            for s in 0..t.len() - 1 {
                if t[s + 1] > t[s] {
                    total += adaptive_simpson(&|x| b.eval(x).unwrap()[j], t[s], t[s + 1], 1e-13);
                }
            }
            assert!((total - 1.0).abs() < 1e-8, "basis {j}: {total}");
            // closed form for the unnormalized integral: (t_{j+4} - t_j) / 4
            let closed = (t[j + 4] - t[j]) / 4.0;
            assert!((b.norm_constants()[j] * closed - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn matches_recursive_oracle() {
        let b = SplineBasis::build(0, 7, -3.0, 3.0).unwrap();
        for &x in &[0.0, -3.0, 3.0, -2.2, 1.49, 1.5, 2.9] {
            let got = b.eval(x).unwrap();
            for j in 0..7 {
                let expect = cox_de_boor(b.knots(), j, 3, x, true) * b.norm_constants()[j];
                assert!((got[j] - expect).abs() < 1e-12, "x={x} j={j}: {} vs {}", got[j], expect);
            }
        }
    }

    #[test]
    fn zero_outside_support_and_local() {
        let b = SplineBasis::build(0, 10, 0.0, 1.0).unwrap();
        assert!(b.eval(-1.0).unwrap().iter().all(|&v| v == 0.0));
        assert!(b.eval(1.0 + 1e-12).unwrap().iter().all(|&v| v == 0.0));
        let v = b.eval(0.5).unwrap();
        assert!(v.iter().filter(|&&x| x != 0.0).count() <= 4);
        assert!(v.iter().all(|&x| x >= 0.0));
        assert!(b.eval(f64::INFINITY).is_err());
    }

    #[test]
    fn support_rule_adds_one_percent() {
        let (lo, hi) = support_from_data([2.0, 4.0, 12.0], DEFAULT_SUPPORT_MARGIN).unwrap();
        assert!((lo - 1.9).abs() < 1e-12 && (hi - 12.1).abs() < 1e-12);
        assert!(support_from_data(Vec::<f64>::new(), 0.01).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unity_and_locality(n in 4usize..20, lo in -50.0f64..50.0, width in 0.1f64..100.0, u in 0.0f64..=1.0) {
                let b = SplineBasis::build(0, n, lo, lo + width).unwrap();
                let x = lo + u * width;
                let raw = b.eval_unnormalized(x).unwrap();
                prop_assert!((raw.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let v = b.eval(x).unwrap();
                prop_assert!(v.iter().filter(|&&y| y != 0.0).count() <= 4);
                prop_assert!(v.iter().all(|&y| y >= 0.0));
            }

            #[test]
            fn symmetric_support_mirrors(n in prop::sample::select(vec![4usize, 5, 7, 9, 11]), half in 0.5f64..10.0, u in 0.0f64..=1.0) {
                let b = SplineBasis::build(0, n, -half, half).unwrap();
                let x = -half + u * 2.0 * half;
                let fwd = b.eval(x).unwrap();
                let back = b.eval(-x).unwrap();
                for j in 0..n {
                    prop_assert!((fwd[j] - back[n - 1 - j]).abs() <= 1e-12 * (1.0 + fwd[j].abs()));
                }
            }
        }
    }
}
