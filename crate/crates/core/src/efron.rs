//! Exponential-family smooth prior on the support grid: g(α) = softmax(Qα)
//! with Q a natural cubic spline basis in log rate, fitted by maximizing
//! the ridge-penalized marginal log-likelihood Σ log(P·g) − c0·‖α‖₂.

use crate::error::{Error, Result};
use crate::grid::generate_grid;
use crate::km::DensityRows;
use crate::mixture::DiscretePrior;
use crate::opt::{maximize, LbfgsConfig};
use crate::tables::{fitting_cells, CellObs, ContingencyTable, ExpectedCounts};

#[derive(Debug, Clone)]
pub struct EfronConfig {
    /// Grid size; `None` resolves to min{3000, 10·I·J}.
    pub k: Option<usize>,
    /// Floor applied to the raw rate ratios the grid is built from.
    pub eps: f64,
    /// Spline degrees of freedom (basis columns).
    pub p: usize,
    /// Weight of the ‖α‖₂ penalty (the norm itself, not its square).
    pub c0: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for EfronConfig {
    fn default() -> Self {
        Self {
            k: None,
            eps: 1e-4,
            p: 120,
            c0: 0.01,
            max_iter: 2000,
            grad_tol: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EfronFit {
    pub prior: DiscretePrior,
    pub alpha_hat: Vec<f64>,
    /// Unpenalized log marginal likelihood at the fitted prior.
    pub loglik: f64,
    /// Penalized objective at the fitted coefficients.
    pub penalized: f64,
    pub converged: bool,
}

/// Natural cubic spline basis with `p` degrees of freedom, evaluated at
/// log(support), returned row-major with `support.len()` rows. Knots sit at
/// equally spaced quantiles of the log support; every column is centered
/// and scaled to unit norm. The constant function is omitted because
/// softmax ignores it.
pub fn build_spline_basis(support: &[f64], p: usize) -> Result<Vec<f64>> {
    let k = support.len();
    if p < 1 || p >= k {
        return Err(Error::Config(format!(
            "spline needs 1 <= p < K, got p {p} with K {k}"
        )));
    }
    if support.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Config("spline support must be positive".into()));
    }
    let x: Vec<f64> = support.iter().map(|v| v.ln()).collect();
    let mut sorted = x.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite support"));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("duplicate support points in spline basis".into()));
    }
    // p+1 knots at equally spaced quantiles of the sorted log support.
    let knots: Vec<f64> =
        (0..=p).map(|i| sorted[(i * (k - 1) + p / 2) / p]).collect();
    // Truncated-power construction of the natural basis: the first column
    // is x itself, the rest are d_j − d_{p−1} where
    // d_j(x) = [(x−ξ_j)₊³ − (x−ξ_p)₊³] / (ξ_p − ξ_j),
    // which enforces linearity beyond the boundary knots.
    let cube = |t: f64| if t > 0.0 { t * t * t } else { 0.0 };
    let d = |j: usize, xi: f64| -> f64 {
        (cube(xi - knots[j]) - cube(xi - knots[p])) / (knots[p] - knots[j])
    };
    let mut q = vec![0.0; k * p];
    for (i, &xi) in x.iter().enumerate() {
        q[i * p] = xi;
        for j in 0..p - 1 {
            q[i * p + j + 1] = d(j, xi) - d(p - 1, xi);
        }
    }
    for j in 0..p {
        let mean = (0..k).map(|i| q[i * p + j]).sum::<f64>() / k as f64;
        let mut norm2 = 0.0;
        for i in 0..k {
            q[i * p + j] -= mean;
            norm2 += q[i * p + j] * q[i * p + j];
        }
        let norm = norm2.sqrt();
        if !(norm > 1e-300) {
            return Err(Error::Numerical(format!(
                "spline basis column {j} is constant"
            )));
        }
        for i in 0..k {
            q[i * p + j] /= norm;
        }
    }
    Ok(q)
}

/// Precomputed pieces of the penalized marginal likelihood: the per-cell
/// density matrix over the grid and the spline basis.
pub struct EfronProblem {
    rows: DensityRows,
    q: Vec<f64>,
    support: Vec<f64>,
    k: usize,
    p: usize,
}

impl EfronProblem {
    pub fn new(cells: &[CellObs], support: &[f64], p: usize) -> Result<Self> {
        let q = build_spline_basis(support, p)?;
        let rows = DensityRows::new(cells, support)?;
        Ok(Self { rows, q, support: support.to_vec(), k: support.len(), p })
    }

    /// softmax(Qα), strictly positive for finite α.
    pub fn masses(&self, alpha: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.k];
        for i in 0..self.k {
            z[i] = (0..self.p).map(|j| self.q[i * self.p + j] * alpha[j]).sum();
        }
        let top = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for zi in &mut z {
            *zi = (*zi - top).exp();
            total += *zi;
        }
        for zi in &mut z {
            *zi /= total;
        }
        z
    }

    /// Penalized objective and its gradient. At α = 0, where the norm is
    /// not differentiable, the penalty contributes the subgradient 0.
    pub fn objective_and_gradient(
        &self,
        alpha: &[f64],
        c0: f64,
        grad: &mut [f64],
    ) -> f64 {
        let g = self.masses(alpha);
        let (loglik, d) = self.rows.sweep(&g);
        let n = self.rows.n_cells as f64;
        // ∂loglik/∂α = Qᵀ Σ_cells (w_cell − g) with w the posterior mass
        // vector, which collapses to Qᵀ (g ⊙ (d − n)).
        for gj in grad.iter_mut() {
            *gj = 0.0;
        }
        for i in 0..self.k {
            let w = g[i] * (d[i] - n);
            for j in 0..self.p {
                grad[j] += self.q[i * self.p + j] * w;
            }
        }
        let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (gj, aj) in grad.iter_mut().zip(alpha) {
                *gj -= c0 * aj / norm;
            }
        }
        loglik - c0 * norm
    }

    /// Norm of the unpenalized log-likelihood gradient at α = 0. When this
    /// is at most c0 the zero vector is stationary for the penalized
    /// objective, since the penalty's subdifferential at 0 is the c0-ball.
    fn loglik_gradient_norm_at_zero(&self) -> f64 {
        let mut grad = vec![0.0; self.p];
        self.objective_and_gradient(&vec![0.0; self.p], 0.0, &mut grad);
        grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Penalized objective value and gradient at `alpha`; the free-function
/// form of [`EfronProblem::objective_and_gradient`].
pub fn efron_objective_and_gradient(
    problem: &EfronProblem,
    alpha: &[f64],
    c0: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; problem.p];
    let value = problem.objective_and_gradient(alpha, c0, &mut grad);
    (value, grad)
}

/// Fit the smooth exponential-family prior by quasi-Newton ascent from
/// α = 0. The reference row and column are excluded from the likelihood,
/// as for the other grid-based fitters.
pub fn fit_efron(
    table: &ContingencyTable,
    expected: &ExpectedCounts,
    config: &EfronConfig,
) -> Result<EfronFit> {
    if config.c0 < 0.0 {
        return Err(Error::Config(format!("c0 must be >= 0, got {}", config.c0)));
    }
    let k = config
        .k
        .unwrap_or_else(|| (10 * table.n_rows() * table.n_cols()).min(3000));
    let grid = generate_grid(table, expected, k, config.eps, config.seed)?;
    let cells = fitting_cells(table, expected, true);
    if cells.is_empty() {
        return Err(Error::Data("no non-reference cells to fit".into()));
    }
    let problem = EfronProblem::new(&cells, &grid, config.p)?;
    let zero = vec![0.0; config.p];
    if problem.loglik_gradient_norm_at_zero() <= config.c0 {
        return finish(&problem, zero, config.c0, true);
    }
    let lbfgs = LbfgsConfig {
        max_iter: config.max_iter,
        grad_tol: config.grad_tol,
        ..LbfgsConfig::default()
    };
    let result = maximize(
        |alpha, grad| problem.objective_and_gradient(alpha, config.c0, grad),
        &zero,
        &lbfgs,
    )?;
    finish(&problem, result.x, config.c0, result.converged)
}

fn finish(
    problem: &EfronProblem,
    alpha: Vec<f64>,
    c0: f64,
    converged: bool,
) -> Result<EfronFit> {
    let masses = problem.masses(&alpha);
    let (loglik, _) = problem.rows.sweep(&masses);
    let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
    let prior = DiscretePrior::new(problem.support.clone(), masses)?;
    Ok(EfronFit {
        prior,
        alpha_hat: alpha,
        loglik,
        penalized: loglik - c0 * norm,
        converged,
    })
}
