//! BFGS maximization with a backtracking (Armijo) line search.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsConfig {
    /// Stop when the max-abs gradient entry falls to this value.
    pub grad_tol: f64,
    /// Stop when the objective improved by at most `rel_tol * |f|` over the last `patience` iterations.
    pub rel_tol: f64,
    pub patience: usize,
    pub max_iter: usize,
    pub max_backtracks: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        BfgsConfig {
            grad_tol: 1e-5,
            rel_tol: 1e-8,
            patience: 10,
            max_iter: 2000,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientNorm,
    RelativeChange,
    MaxIterations,
    LineSearchFailed,
}

impl StopReason {
    pub fn converged(self) -> bool {
        matches!(self, StopReason::GradientNorm | StopReason::RelativeChange)
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    /// Objective after each accepted iteration (index 0 is the start).
    pub trace: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f`, which returns the objective and its gradient.
///
/// Every accepted step satisfies the Armijo condition, so the objective trace
/// is non-decreasing. A non-finite objective at a trial point counts as a
/// failed trial and the step is shortened.
pub fn maximize<F>(mut f: F, x0: Vec<f64>, cfg: &BfgsConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    let p = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    let mut trace = vec![fx];

    if p == 0 || max_abs(&g) <= cfg.grad_tol {
        return Ok(OptimResult {
            grad_norm: max_abs(&g),
            x,
            value: fx,
            iterations: 0,
            evaluations,
            reason: StopReason::GradientNorm,
            trace,
        });
    }

    // inverse Hessian approximation of -f, row-major
    let mut h = vec![0.0; p * p];
    let reset = |h: &mut [f64], scale: f64| {
        h.fill(0.0);
        for i in 0..p {
            h[i * p + i] = scale;
        }
    };
    reset(&mut h, 1.0);
    let mut fresh = true;
    let mut dir = vec![0.0; p];
    let mut x_new = vec![0.0; p];
    let mut hy = vec![0.0; p];
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        // ascent direction d = H g
        for i in 0..p {
            dir[i] = dot(&h[i * p..(i + 1) * p], &g);
        }
        let mut slope = dot(&g, &dir);
        if !(slope > 0.0) {
            reset(&mut h, 1.0);
            fresh = true;
            dir.copy_from_slice(&g);
            slope = dot(&g, &g);
        }
        let mut step = if fresh { (1.0 / max_abs(&dir)).min(1.0) } else { 1.0 };

        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            for i in 0..p {
                x_new[i] = x[i] + step * dir[i];
            }
            let trial = f(&x_new);
            evaluations += 1;
            if let Ok((fv, gv)) = trial {
                if fv.is_finite() && gv.iter().all(|v| v.is_finite()) && fv >= fx + C1 * step * slope {
                    accepted = Some((fv, gv));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((f_new, g_new)) = accepted else {
            if !fresh {
                // retry from steepest ascent before giving up
                reset(&mut h, 1.0);
                fresh = true;
                continue;
            }
            reason = StopReason::LineSearchFailed;
            break;
        };

        iterations += 1;
        // s = x_new - x, y = -(g_new - g) (curvature of -f)
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if fresh {
                reset(&mut h, sy / dot(&y, &y));
            }
            let rho = 1.0 / sy;
            for i in 0..p {
                hy[i] = dot(&h[i * p..(i + 1) * p], &y);
            }
            let yhy = dot(&y, &hy);
            let coef = rho * rho * yhy + rho;
            for i in 0..p {
                let row = &mut h[i * p..(i + 1) * p];
                for j in 0..p {
                    row[j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
            fresh = false;
        }

        x.copy_from_slice(&x_new);
        fx = f_new;
        g = g_new;
        trace.push(fx);

        if max_abs(&g) <= cfg.grad_tol {
            reason = StopReason::GradientNorm;
            break;
        }
        if trace.len() > cfg.patience {
            let old = trace[trace.len() - 1 - cfg.patience];
            if (fx - old).abs() <= cfg.rel_tol * fx.abs().max(1.0) {
                reason = StopReason::RelativeChange;
                break;
            }
        }
    }

    Ok(OptimResult {
        grad_norm: max_abs(&g),
        x,
        value: fx,
        iterations,
        evaluations,
        reason,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_negative_rosenbrock() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            let gb = 200.0 * (b - a * a);
            Ok((-v, vec![-ga, -gb]))
        };
        let cfg = BfgsConfig {
            grad_tol: 1e-8,
            rel_tol: 0.0,
            ..Default::default()
        };
        let r = maximize(f, vec![-1.2, 1.0], &cfg).unwrap();
        assert_eq!(r.reason, StopReason::GradientNorm);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn starting_at_optimum_stops_immediately() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((-(x[0] - 2.0).powi(2), vec![-2.0 * (x[0] - 2.0)])) };
        let r = maximize(f, vec![2.0], &BfgsConfig::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn quadratic_converges_quickly() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = -(x[0] * x[0] + 10.0 * x[1] * x[1] + x[0] * x[1]);
            Ok((v, vec![-(2.0 * x[0] + x[1]), -(20.0 * x[1] + x[0])]))
        };
        let r = maximize(f, vec![3.0, -2.0], &BfgsConfig::default()).unwrap();
        assert!(r.reason.converged());
        assert!(r.iterations < 30);
    }
}
