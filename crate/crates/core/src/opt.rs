//! Generic smooth maximization used by the spline-prior and parametric
//! fitters: limited-memory BFGS with Armijo backtracking, plus a small
//! damped Newton root finder for moment systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    /// Number of correction pairs retained.
    pub memory: usize,
    pub max_iter: usize,
    /// Exit when ‖∇f‖₂ ≤ grad_tol · (1 + |f|).
    pub grad_tol: f64,
    /// Line-search halvings allowed before declaring failure.
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, max_iter: 2000, grad_tol: 1e-7, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Maximize a smooth function given a value-and-gradient callback.
///
/// The callback fills `grad` with ∇f(x) and returns f(x). Non-finite values
/// during line search shrink the step like an ordinary Armijo failure, so
/// objectives may return -inf outside their domain.
pub fn maximize<F>(mut eval: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut f = eval(&x, &mut grad);
    if !f.is_finite() {
        return Err(Error::Numerical("objective not finite at the starting point".into()));
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for iter in 0..cfg.max_iter {
        iterations = iter + 1;
        let gnorm = norm(&grad);
        if gnorm <= cfg.grad_tol * (1.0 + f.abs()) {
            converged = true;
            iterations = iter;
            break;
        }
        // Two-loop recursion on the ascent direction d = H·∇f.
        let mut d = grad.clone();
        let m = s_hist.len();
        let mut alpha_buf = vec![0.0; m];
        for k in (0..m).rev() {
            let a = rho_hist[k] * dot(&s_hist[k], &d);
            alpha_buf[k] = a;
            for (di, yi) in d.iter_mut().zip(&y_hist[k]) {
                *di -= a * yi;
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let scale = dot(s, y) / dot(y, y);
            if scale.is_finite() && scale > 0.0 {
                for di in d.iter_mut() {
                    *di *= scale;
                }
            }
        }
        for k in 0..m {
            let b = rho_hist[k] * dot(&y_hist[k], &d);
            for (di, si) in d.iter_mut().zip(&s_hist[k]) {
                *di += (alpha_buf[k] - b) * si;
            }
        }
        let mut slope = dot(&grad, &d);
        if !(slope > 0.0) {
            // Stale curvature made the direction non-ascending; fall back to
            // steepest ascent.
            d.copy_from_slice(&grad);
            slope = gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }
        let mut step = 1.0;
        let mut new_x = vec![0.0; n];
        let mut new_grad = vec![0.0; n];
        let mut accepted = false;
        for _ in 0..cfg.max_backtracks {
            for ((nx, xi), di) in new_x.iter_mut().zip(&x).zip(&d) {
                *nx = xi + step * di;
            }
            let new_f = eval(&new_x, &mut new_grad);
            if new_f.is_finite() && new_f >= f + 1e-4 * step * slope {
                let mut s = vec![0.0; n];
                let mut yv = vec![0.0; n];
                for i in 0..n {
                    s[i] = new_x[i] - x[i];
                    // Curvature pair sign convention for maximization.
                    yv[i] = grad[i] - new_grad[i];
                }
                let sy = dot(&s, &yv);
                if sy > 1e-12 * norm(&s) * norm(&yv) {
                    if s_hist.len() == cfg.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    rho_hist.push(1.0 / sy);
                    s_hist.push(s);
                    y_hist.push(yv);
                }
                x.copy_from_slice(&new_x);
                grad.copy_from_slice(&new_grad);
                f = new_f;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::Numerical(format!(
                "line search failed after {} halvings at iteration {}",
                cfg.max_backtracks, iter
            )));
        }
    }
    Ok(LbfgsResult { value: f, grad_norm: norm(&grad), x, iterations, converged })
}

/// Solve the square linear system A·x = b by Gaussian elimination with
/// partial pivoting. A is row-major n×n and consumed in place.
pub fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::Config("linear system shape mismatch".into()));
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| {
                a[r1 * n + col]
                    .abs()
                    .partial_cmp(&a[r2 * n + col].abs())
                    .expect("finite pivot")
            })
            .expect("non-empty range");
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(Error::Numerical("singular linear system".into()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Damped Newton iteration on a square nonlinear system F(x) = 0 with a
/// forward-difference Jacobian. Steps halve until the residual norm drops
/// (up to 30 halvings); returns the final iterate and whether the residual
/// tolerance was met.
pub fn newton_solve<F>(
    mut residual: F,
    x0: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<f64>, bool)>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = residual(&x);
    if r.len() != n {
        return Err(Error::Config("residual dimension mismatch".into()));
    }
    let mut rnorm = norm(&r);
    for _ in 0..max_iter {
        if !rnorm.is_finite() {
            return Err(Error::Numerical("non-finite residual in Newton iteration".into()));
        }
        if rnorm <= tol {
            return Ok((x, true));
        }
        let mut jac = vec![0.0; n * n];
        for col in 0..n {
            let h = 1e-7 * x[col].abs().max(1e-7);
            let mut xp = x.clone();
            xp[col] += h;
            let rp = residual(&xp);
            for row in 0..n {
                jac[row * n + col] = (rp[row] - r[row]) / h;
            }
        }
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = match solve_linear(jac, neg_r) {
            Ok(s) => s,
            Err(_) => return Ok((x, false)),
        };
        let mut scale = 1.0;
        let mut advanced = false;
        for _ in 0..30 {
            let cand: Vec<f64> =
                x.iter().zip(&step).map(|(xi, si)| xi + scale * si).collect();
            let rc = residual(&cand);
            let rcn = norm(&rc);
            if rcn.is_finite() && rcn < rnorm {
                x = cand;
                r = rc;
                rnorm = rcn;
                advanced = true;
                break;
            }
            scale *= 0.5;
        }
        if !advanced {
            return Ok((x, false));
        }
    }
    Ok((x, rnorm <= tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        // f(x) = -(x0-3)² - 2(x1+1)² with maximum at (3, -1).
        let res = maximize(
            |x, g| {
                g[0] = -2.0 * (x[0] - 3.0);
                g[1] = -4.0 * (x[1] + 1.0);
                -(x[0] - 3.0).powi(2) - 2.0 * (x[1] + 1.0).powi(2)
            },
            &[0.0, 0.0],
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert!(res.converged);
        assert!((res.x[0] - 3.0).abs() < 1e-6);
        assert!((res.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn maximizes_rosenbrock_negated() {
        // max of -Rosenbrock at (1,1); a stiff curved valley.
        let res = maximize(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -(-2.0 * (1.0 - a) - 400.0 * a * (b - a * a));
                g[1] = -(200.0 * (b - a * a));
                -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
            },
            &[-1.2, 1.0],
            &LbfgsConfig { max_iter: 5000, ..Default::default() },
        )
        .unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-4, "x = {:?}", res.x);
        assert!((res.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn respects_domain_via_neg_infinity() {
        // f(x) = ln(x) - x on x > 0, maximum at x = 1.
        let res = maximize(
            |x, g| {
                if x[0] <= 0.0 {
                    g[0] = 0.0;
                    return f64::NEG_INFINITY;
                }
                g[0] = 1.0 / x[0] - 1.0;
                x[0].ln() - x[0]
            },
            &[4.0],
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-6);
        assert!((res.value + 1.0).abs() < 1e-10);
    }

    #[test]
    fn line_search_failure_is_an_error() {
        // Gradient always claims ascent along +x but the function decreases:
        // backtracking can never satisfy Armijo.
        let res = maximize(
            |x, g| {
                g[0] = 1.0;
                -x[0]
            },
            &[0.0],
            &LbfgsConfig { max_backtracks: 10, ..Default::default() },
        );
        assert!(res.is_err());
    }

    #[test]
    fn linear_solver_roundtrip() {
        let a = vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.0, 2.0, 0.0, 5.0];
        let x_true = [1.0, -2.0, 0.5];
        let b: Vec<f64> = (0..3)
            .map(|r| (0..3).map(|c| a[r * 3 + c] * x_true[c]).sum())
            .collect();
        let x = solve_linear(a, b).unwrap();
        for (got, want) in x.iter().zip(&x_true) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(solve_linear(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn newton_solves_polynomial_system() {
        // x² + y² = 5, xy = 2 → (2, 1) from a nearby start.
        let (x, ok) = newton_solve(
            |v| vec![v[0] * v[0] + v[1] * v[1] - 5.0, v[0] * v[1] - 2.0],
            &[1.5, 0.5],
            200,
            1e-12,
        )
        .unwrap();
        assert!(ok);
        assert!((x[0] - 2.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8);
    }
}
