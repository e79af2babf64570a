//! Histogram-driven support-grid generation shared by the mixture fitters,
//! and the matching low-variance component initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixture::GammaMixturePrior;
use crate::tables::{ContingencyTable, ExpectedCounts};

/// Draw K grid points from a histogram density estimate of the raw rate
/// ratios λ̃_ij = max(N_ij/E_ij, eps), built in log space with
/// Freedman-Diaconis bin widths (at least 10 bins). Each point picks a bin
/// with probability proportional to its mass, then lands uniformly inside
/// it. Output is exponentiated, sorted, and de-duplicated with relative
/// jitter 1e-9 so downstream supports are strictly increasing.
///
/// Degenerate input (all ratios identical) falls back to a geometric grid
/// on [eps, max λ̃].
pub fn generate_grid(
    table: &ContingencyTable,
    expected: &ExpectedCounts,
    k: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Config(format!("grid size must be ≥ 2, got {k}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Config("grid floor eps must be > 0".into()));
    }
    let mut logs: Vec<f64> = table
        .counts()
        .iter()
        .zip(expected.values())
        .map(|(&n, &e)| (n as f64 / e).max(eps).ln())
        .collect();
    logs.sort_by(|a, b| a.partial_cmp(b).expect("finite log ratios"));
    let (lo, hi) = (logs[0], logs[logs.len() - 1]);
    if !(hi > lo) {
        return Ok(geometric_grid(eps, hi.exp().max(eps), k));
    }
    let n = logs.len();
    let quartile = |q: f64| -> f64 {
        // Linear-interpolation quantile on the sorted sample.
        let pos = q * (n - 1) as f64;
        let base = pos.floor() as usize;
        let frac = pos - base as f64;
        if base + 1 < n {
            logs[base] * (1.0 - frac) + logs[base + 1] * frac
        } else {
            logs[base]
        }
    };
    let iqr = quartile(0.75) - quartile(0.25);
    let fd_width = 2.0 * iqr / (n as f64).cbrt();
    let n_bins = if fd_width > 0.0 {
        (((hi - lo) / fd_width).ceil() as usize).max(10)
    } else {
        // Heavily tied sample: IQR collapses while the range does not.
        (n as f64).sqrt().ceil() as usize
    }
    .max(10);
    let bin_width = (hi - lo) / n_bins as f64;
    let mut mass = vec![0.0f64; n_bins];
    for &x in &logs {
        let b = (((x - lo) / bin_width) as usize).min(n_bins - 1);
        mass[b] += 1.0;
    }
    let total: f64 = mass.iter().sum();
    for m in &mut mass {
        *m /= total;
    }
    let cum: Vec<f64> = mass
        .iter()
        .scan(0.0, |acc, m| {
            *acc += m;
            Some(*acc)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = Vec::with_capacity(k);
    for _ in 0..k {
        let u: f64 = rng.random();
        let b = cum.partition_point(|c| *c < u).min(n_bins - 1);
        let inside: f64 = rng.random();
        let log_v = lo + (b as f64 + inside) * bin_width;
        grid.push(log_v.exp());
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    for i in 1..grid.len() {
        if grid[i] <= grid[i - 1] {
            grid[i] = grid[i - 1] * (1.0 + 1e-9);
        }
    }
    Ok(grid)
}

fn geometric_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if !(hi > lo) {
        // Single point available: expand an artificial decade below.
        return geometric_grid(lo / 10.0, lo.max(lo * 10.0), k);
    }
    let ratio = (hi / lo).powf(1.0 / (k - 1) as f64);
    let mut v = Vec::with_capacity(k);
    let mut x = lo;
    for _ in 0..k {
        v.push(x);
        x *= ratio;
    }
    // Guard against accumulated rounding at the top end.
    *v.last_mut().expect("k >= 2") = hi;
    v
}

/// Low-variance mixture initialization on a grid: each component has mean
/// v_k and variance eps (r_k = v_k²/eps, h_k = eps/v_k), uniform weights.
pub fn init_params(grid: &[f64], eps: f64) -> Result<GammaMixturePrior> {
    if grid.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config("init concentration eps must be > 0".into()));
    }
    if grid.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Config("grid values must be positive".into()));
    }
    let k = grid.len();
    let weights = vec![1.0 / k as f64; k];
    let shapes: Vec<f64> = grid.iter().map(|v| v * v / eps).collect();
    let scales: Vec<f64> = grid.iter().map(|v| eps / v).collect();
    GammaMixturePrior::new(weights, shapes, scales)
}
