//! Composite Gauss-Legendre integration. This exists as an independent
//! evaluation route for the closed-form densities and moments elsewhere in
//! the crate; the test suites integrate against it, production code never
//! calls it.

use crate::special::gauss_legendre_unit_nodes;

/// Integral of f over [a, b] by composite 64-point Gauss-Legendre on
/// `panels` equal subintervals.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let (nodes, weights) = gauss_legendre_unit_nodes();
    let step = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + step * p as f64;
        let mut acc = 0.0;
        for (y, w) in nodes.iter().zip(weights.iter()) {
            acc += w * f(lo + step * y);
        }
        total += acc * step;
    }
    total
}

/// Integral of a non-negative integrand over (0, ∞) after the substitution
/// λ = exp(t), centered on the integrand's approximate mode in log space.
///
/// `log_center` should sit near the mass of log f; the window extends
/// `half_width` either side, wide enough that double-precision tails vanish.
pub fn integrate_log_axis<F: Fn(f64) -> f64 + Copy>(
    f: F,
    log_center: f64,
    half_width: f64,
    panels: usize,
) -> f64 {
    integrate(
        |t| {
            let lam = t.exp();
            f(lam) * lam
        },
        log_center - half_width,
        log_center + half_width,
        panels,
    )
}
