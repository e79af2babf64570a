//! Nonparametric maximum-likelihood mixing distribution on a fixed support
//! grid. The marginal log-likelihood is concave in the masses, so the
//! first-order gap reported at exit certifies global optimality.
//!
//! Fitting runs in two phases: multiplicative EM with SQUAREM
//! extrapolation over the full grid, then, because EM alone closes the
//! optimality gap sublinearly on dense grids, column generation that
//! polishes a small active set (restricted EM, then Levenberg-damped
//! Newton on the simplex) and re-certifies the gap over the whole grid
//! between cycles.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::generate_grid;
use crate::mixture::DiscretePrior;
use crate::special::ln_gamma;
use crate::tables::{fitting_cells, CellObs, ContingencyTable, ExpectedCounts};

/// Convergence requires max_k Σ_ij P_ij(k)/f_ij − n ≤ GAP_RTOL·n.
const GAP_RTOL: f64 = 1e-6;
/// Masses below this are zeroed and the rest renormalized at exit.
const MASS_FLOOR: f64 = 1e-12;
/// The cell-by-support density matrix is cached only under this size.
const CACHE_BYTES: usize = 2 << 30;
/// Cells per parallel reduction block. Fixed block boundaries and ordered
/// combination keep results independent of the worker-thread count.
const BLOCK: usize = 256;
/// Full-grid sweeps granted to the EM/SQUAREM phase before refinement.
const WARM_SWEEPS: usize = 60;
/// Active-set refinement cycles (each costs one certification sweep).
const MAX_CYCLES: usize = 200;

#[derive(Debug, Clone)]
pub struct KmConfig {
    /// Grid size; `None` resolves to min{3000, 10·I·J}.
    pub k: Option<usize>,
    /// Floor applied to the raw rate ratios the grid is built from.
    pub eps: f64,
    /// Cap on full-grid likelihood sweeps.
    pub max_iter: usize,
    /// Relative objective-change stall tolerance.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KmConfig {
    fn default() -> Self {
        Self { k: None, eps: 1e-4, max_iter: 10_000, tol: 1e-10, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct KmFit {
    pub prior: DiscretePrior,
    pub loglik: f64,
    /// First-order optimality gap at the returned masses.
    pub gap: f64,
    /// Full-grid likelihood sweeps performed.
    pub iterations: usize,
    pub converged: bool,
}

/// Per-cell Poisson log densities over the grid, max-shifted so the EM
/// ratios never underflow. The shift cancels in every ratio and is added
/// back when the exact log-likelihood is assembled.
pub(crate) struct DensityRows {
    k: usize,
    pub(crate) n_cells: usize,
    shifts: Vec<f64>,
    /// Grid index attaining each cell's shift, the cell's likelihood mode.
    shift_arg: Vec<usize>,
    /// exp(lp − shift), row-major, present when it fits in memory.
    scaled: Option<Vec<f64>>,
    counts: Vec<f64>,
    expected: Vec<f64>,
    log_e: Vec<f64>,
    ln_fact: Vec<f64>,
    grid: Vec<f64>,
    log_grid: Vec<f64>,
}

fn sanitize(lp: f64) -> f64 {
    // Overflow collapses to zero density, never to +inf or NaN.
    if lp.is_nan() || lp == f64::INFINITY {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

impl DensityRows {
    pub(crate) fn new(cells: &[CellObs], grid: &[f64]) -> Result<Self> {
        let k = grid.len();
        let n_cells = cells.len();
        let mut rows = Self {
            k,
            n_cells,
            shifts: vec![0.0; n_cells],
            shift_arg: vec![0; n_cells],
            scaled: None,
            counts: cells.iter().map(|c| c.count as f64).collect(),
            expected: cells.iter().map(|c| c.expected).collect(),
            log_e: cells.iter().map(|c| c.expected.ln()).collect(),
            ln_fact: cells.iter().map(|c| ln_gamma(c.count as f64 + 1.0)).collect(),
            grid: grid.to_vec(),
            log_grid: grid.iter().map(|v| v.ln()).collect(),
        };
        let cache = n_cells.saturating_mul(k).saturating_mul(8) <= CACHE_BYTES;
        let mut store = if cache { Vec::with_capacity(n_cells * k) } else { Vec::new() };
        let mut buf = vec![0.0; k];
        for (i, cell) in cells.iter().enumerate() {
            rows.log_densities(i, &mut buf);
            let (arg, shift) = buf
                .iter()
                .cloned()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
                .expect("non-empty grid");
            if shift == f64::NEG_INFINITY {
                return Err(Error::Data(format!(
                    "cell ({}, {}) has zero likelihood at every grid point; \
                     widen the support grid",
                    cell.row, cell.col
                )));
            }
            rows.shifts[i] = shift;
            rows.shift_arg[i] = arg;
            if cache {
                store.extend(buf.iter().map(|lp| (lp - shift).exp()));
            }
        }
        if cache {
            rows.scaled = Some(store);
        }
        Ok(rows)
    }

    fn log_density_at(&self, i: usize, k: usize) -> f64 {
        let n = self.counts[i];
        let mu = self.grid[k] * self.expected[i];
        let lp = if n == 0.0 {
            -mu
        } else {
            n * (self.log_grid[k] + self.log_e[i]) - mu - self.ln_fact[i]
        };
        sanitize(lp)
    }

    fn log_densities(&self, i: usize, buf: &mut [f64]) {
        for (k, out) in buf.iter_mut().enumerate() {
            *out = self.log_density_at(i, k);
        }
    }

    fn scaled_row<'a>(&'a self, i: usize, buf: &'a mut [f64]) -> &'a [f64] {
        match &self.scaled {
            Some(c) => &c[i * self.k..(i + 1) * self.k],
            None => {
                self.log_densities(i, buf);
                let shift = self.shifts[i];
                for lp in buf.iter_mut() {
                    *lp = (*lp - shift).exp();
                }
                buf
            }
        }
    }

    /// Column of scaled densities for one grid point across all cells.
    fn scaled_column(&self, k: usize) -> Vec<f64> {
        match &self.scaled {
            Some(c) => (0..self.n_cells).map(|i| c[i * self.k + k]).collect(),
            None => (0..self.n_cells)
                .map(|i| (self.log_density_at(i, k) - self.shifts[i]).exp())
                .collect(),
        }
    }

    /// One fused pass: exact log-likelihood of the masses and the gradient
    /// sums d_k = Σ_i P_ik/f_i. The objective is −inf when some cell has no
    /// mass anywhere its density is positive; d is meaningless then.
    pub(crate) fn sweep(&self, g: &[f64]) -> (f64, Vec<f64>) {
        let n_blocks = self.n_cells.div_ceil(BLOCK);
        let partials: Vec<(f64, Vec<f64>)> = (0..n_blocks)
            .into_par_iter()
            .map(|b| {
                let lo = b * BLOCK;
                let hi = (lo + BLOCK).min(self.n_cells);
                let mut obj = 0.0;
                let mut d = vec![0.0; self.k];
                let mut buf = vec![0.0; self.k];
                for i in lo..hi {
                    let row = self.scaled_row(i, &mut buf);
                    let f: f64 = row.iter().zip(g).map(|(p, w)| p * w).sum();
                    if !(f > 0.0) {
                        obj = f64::NEG_INFINITY;
                        continue;
                    }
                    obj += f.ln() + self.shifts[i];
                    let inv = f.recip();
                    for (dk, p) in d.iter_mut().zip(row) {
                        *dk += p * inv;
                    }
                }
                (obj, d)
            })
            .collect();
        let mut obj = 0.0;
        let mut d = vec![0.0; self.k];
        for (po, pd) in partials {
            obj += po;
            for (dk, p) in d.iter_mut().zip(&pd) {
                *dk += p;
            }
        }
        (obj, d)
    }
}

fn em_step(g: &[f64], d: &[f64], n_cells: f64) -> Vec<f64> {
    let mut out: Vec<f64> = g.iter().zip(d).map(|(gi, di)| gi * di / n_cells).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

fn max_entry(d: &[f64]) -> f64 {
    d.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Phase {
    g: Vec<f64>,
    obj: f64,
    d: Vec<f64>,
    gap: f64,
    sweeps: usize,
    converged: bool,
}

/// EM with SQUAREM extrapolation over the full grid.
fn warm_phase(
    rows: &DensityRows,
    config: &KmConfig,
    budget: usize,
    gap_tol: f64,
) -> Result<Phase> {
    let n_cells = rows.n_cells as f64;
    let k = rows.k;
    let mut g = vec![1.0 / k as f64; k];
    let (mut obj, mut d) = rows.sweep(&g);
    let mut sweeps = 1usize;
    if !obj.is_finite() {
        return Err(Error::Numerical("log-likelihood not finite at the uniform start".into()));
    }
    let mut gap = max_entry(&d) - n_cells;
    let mut converged = gap <= gap_tol;
    let mut stall = 0usize;
    let slack = |o: f64| 1e-7 * (1.0 + o.abs());
    while !converged && sweeps < budget {
        let g1 = em_step(&g, &d, n_cells);
        let (obj1, d1) = rows.sweep(&g1);
        sweeps += 1;
        if obj1 < obj - slack(obj) {
            return Err(Error::Numerical(format!(
                "EM objective decreased from {obj} to {obj1}"
            )));
        }
        let gap1 = max_entry(&d1) - n_cells;
        if gap1 <= gap_tol || sweeps >= budget {
            g = g1;
            obj = obj1;
            d = d1;
            gap = gap1;
            converged = gap <= gap_tol;
            break;
        }
        let g2 = em_step(&g1, &d1, n_cells);
        let r: Vec<f64> = g1.iter().zip(&g).map(|(a, b)| a - b).collect();
        let w: Vec<f64> =
            g2.iter().zip(&g1).zip(&g).map(|((c, b), a)| c - 2.0 * b + a).collect();
        let wn = norm2(&w);
        let prev_obj = obj;
        let mut accepted = false;
        if wn > 0.0 {
            let alpha = (norm2(&r) / wn).max(1.0);
            let mut cand: Vec<f64> = (0..k)
                .map(|i| (g[i] + 2.0 * alpha * r[i] + alpha * alpha * w[i]).max(0.0))
                .collect();
            let total: f64 = cand.iter().sum();
            if total > 0.0 {
                for v in &mut cand {
                    *v /= total;
                }
                let (objc, dc) = rows.sweep(&cand);
                sweeps += 1;
                // Accept any extrapolation at or above the cycle start,
                // then stabilize with one EM step; the cycle objective
                // stays non-decreasing.
                if objc.is_finite() && objc >= obj {
                    g = em_step(&cand, &dc, n_cells);
                    let (objs, ds) = rows.sweep(&g);
                    sweeps += 1;
                    if objs < objc - slack(objc) {
                        return Err(Error::Numerical(format!(
                            "EM objective decreased from {objc} to {objs}"
                        )));
                    }
                    obj = objs;
                    d = ds;
                    accepted = true;
                }
            }
        }
        if !accepted {
            // Extrapolation rejected: keep the plain double EM iterate,
            // whose objective cannot fall below obj1.
            let (obj2, d2) = rows.sweep(&g2);
            sweeps += 1;
            if obj2 < obj1 - slack(obj1) {
                return Err(Error::Numerical(format!(
                    "EM objective decreased from {obj1} to {obj2}"
                )));
            }
            g = g2;
            obj = obj2;
            d = d2;
        }
        gap = max_entry(&d) - n_cells;
        converged = gap <= gap_tol;
        if (obj - prev_obj).abs() <= config.tol * (1.0 + obj.abs()) {
            stall += 1;
            if stall >= 25 {
                break;
            }
        } else {
            stall = 0;
        }
    }
    Ok(Phase { g, obj, d, gap, sweeps, converged })
}

/// Polish the masses over the active atoms to first-order stationarity
/// with a damped Newton active-set method on the simplex. The support is
/// small, so each KKT solve is cheap and convergence is quadratic, which
/// EM and Frank-Wolfe steps cannot deliver when adjacent grid atoms carry
/// nearly identical likelihood columns. Masses in `g` index into `active`
/// and stay on the simplex; atoms may enter or leave the support.
/// Pick at most `cap` violator atoms (gradient above `threshold`), keeping
/// only the champion of each run of adjacent grid indices and skipping
/// atoms already in `keep` (sorted grid indices).
fn thin_violators(d: &[f64], threshold: f64, keep: &[usize], cap: usize) -> Vec<usize> {
    let mut champs: Vec<usize> = Vec::new();
    let mut last: Option<usize> = None;
    for (i, &di) in d.iter().enumerate() {
        if di <= threshold {
            continue;
        }
        if last.is_some_and(|prev| i - prev <= 2) {
            let c = champs.last_mut().expect("run has a champion");
            if di > d[*c] {
                *c = i;
            }
        } else {
            champs.push(i);
        }
        last = Some(i);
    }
    champs.retain(|&i| keep.binary_search(&i).is_err());
    champs.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).expect("finite gradient"));
    champs.truncate(cap);
    champs
}

fn inner_polish(rows: &DensityRows, active: &[usize], g: &mut [f64], tol_kkt: f64) {
    let n_cells_f = rows.n_cells as f64;
    let m = active.len();
    let cols: Vec<Vec<f64>> = active.iter().map(|&k| rows.scaled_column(k)).collect();
    let mixture = |g: &[f64], f: &mut [f64]| {
        for fi in f.iter_mut() {
            *fi = 0.0;
        }
        for (gk, col) in g.iter().zip(&cols) {
            if *gk == 0.0 {
                continue;
            }
            for (fi, c) in f.iter_mut().zip(col) {
                *fi += gk * c;
            }
        }
    };
    let phi = |f: &[f64]| -> f64 {
        let mut s = 0.0;
        for fi in f {
            if !(*fi > 0.0) {
                return f64::NEG_INFINITY;
            }
            s += fi.ln();
        }
        s
    };
    if g.iter().all(|v| *v == 0.0) {
        g.fill(1.0 / m as f64);
    }
    let mut f = vec![0.0; rows.n_cells];
    mixture(g, &mut f);
    let mut obj = phi(&f);
    let mut d = vec![0.0; m];
    // Cheap restricted EM on the cached columns: shrinks useless atoms geometrically
    // so the Newton phase below starts near the optimal support instead of retiring
    // atoms one clamp at a time.
    for _sweep in 0..300 {
        for (dk, col) in d.iter_mut().zip(&cols) {
            *dk = col.iter().zip(&f).map(|(c, fi)| c / fi).sum();
        }
        for (gk, dk) in g.iter_mut().zip(&d) {
            *gk *= dk / n_cells_f;
        }
        let total: f64 = g.iter().sum();
        for gk in g.iter_mut() {
            *gk /= total;
        }
        mixture(g, &mut f);
        let next = phi(&f);
        let done = next - obj <= 1e-9 * (1.0 + obj.abs());
        obj = next;
        if done {
            break;
        }
    }
    for gk in g.iter_mut() {
        if *gk < 1e-12 {
            *gk = 0.0;
        }
    }
    let total: f64 = g.iter().sum();
    for gk in g.iter_mut() {
        *gk /= total;
    }
    mixture(g, &mut f);
    obj = phi(&f);
    for _outer in 0..60 {
        for (dk, col) in d.iter_mut().zip(&cols) {
            *dk = col.iter().zip(&f).map(|(c, fi)| c / fi).sum();
        }
        // KKT residual: supported atoms need d = n, empty ones d ≤ n.
        let mut kkt = 0.0f64;
        for kk in 0..m {
            let r = if g[kk] > 0.0 { (d[kk] - n_cells_f).abs() } else { d[kk] - n_cells_f };
            kkt = kkt.max(r);
        }
        if kkt <= tol_kkt {
            if std::env::var_os("PVSIG_KM_TRACE").is_some() {
                eprintln!("  inner: kkt {kkt:.3e} at iter {_outer}");
            }
            return;
        }
        // Working set: supported atoms plus strict violators, thinned so an
        // entering atom is the best of its neighbor run and not a near
        // duplicate of something already supported.
        let supported: Vec<usize> = (0..m).filter(|&kk| g[kk] > 0.0).collect();
        let violators: Vec<usize> = (0..m)
            .filter(|&kk| g[kk] == 0.0 && d[kk] > n_cells_f + 0.25 * tol_kkt)
            .collect();
        let mut entries: Vec<usize> = Vec::new();
        for (pos, &kk) in violators.iter().enumerate() {
            let run_best = violators[..pos]
                .last()
                .is_none_or(|&prev| active[kk] - active[prev] > 2);
            if run_best {
                entries.push(kk);
            } else if d[kk] > d[*entries.last().expect("run has a champion")] {
                *entries.last_mut().expect("run has a champion") = kk;
            }
        }
        let mut support = supported;
        support.extend(entries);
        support.sort_unstable();
        let s = support.len();
        if std::env::var_os("PVSIG_KM_TRACE").is_some() && _outer % 10 == 0 {
            eprintln!("    newton iter {_outer}: working {s} kkt {kkt:.3e}");
        }
        if s < 2 {
            return;
        }
        // Pivot on the heaviest atom; free coordinates are the rest.
        let pivot = *support
            .iter()
            .max_by(|&&a, &&b| g[a].partial_cmp(&g[b]).expect("finite mass"))
            .expect("non-empty support");
        let free: Vec<usize> = support.iter().copied().filter(|&kk| kk != pivot).collect();
        let nf = free.len();
        let grad: Vec<f64> = free.iter().map(|&kk| d[kk] - d[pivot]).collect();
        // Negated Hessian of φ in the free coordinates (positive
        // semidefinite since φ is concave).
        let mut h = vec![0.0; nf * nf];
        for i in 0..rows.n_cells {
            let w = 1.0 / (f[i] * f[i]);
            for (a, &ka) in free.iter().enumerate() {
                let da = cols[ka][i] - cols[pivot][i];
                if da == 0.0 {
                    continue;
                }
                for (b, &kb) in free.iter().enumerate().skip(a) {
                    h[a * nf + b] += w * da * (cols[kb][i] - cols[pivot][i]);
                }
            }
        }
        for a in 0..nf {
            for b in 0..a {
                h[a * nf + b] = h[b * nf + a];
            }
        }
        let scale = (0..nf).map(|a| h[a * nf + a]).fold(0.0f64, f64::max).max(1e-300);
        let mut tau = 1e-12 * scale;
        let mut improved = false;
        for _damping in 0..14 {
            let mut hd = h.clone();
            for a in 0..nf {
                hd[a * nf + a] += tau;
            }
            let step = match crate::opt::solve_linear(hd, grad.clone()) {
                Ok(sv) => sv,
                Err(_) => {
                    tau *= 100.0;
                    continue;
                }
            };
            let pivot_delta: f64 = -step.iter().sum::<f64>();
            let slope: f64 = grad.iter().zip(&step).map(|(a, b)| a * b).sum();
            if !(slope > 0.0) {
                tau *= 100.0;
                continue;
            }
            // Negative masses are clamped to zero and the simplex restored,
            // so one step can retire many atoms at once; backtracking keeps
            // the move an ascent.
            let mut t = 1.0;
            let mut cand = vec![0.0; m];
            for _bt in 0..8 {
                cand.copy_from_slice(g);
                for (&kk, &dv) in free.iter().zip(&step) {
                    cand[kk] = (cand[kk] + t * dv).max(0.0);
                }
                cand[pivot] = (cand[pivot] + t * pivot_delta).max(0.0);
                let total: f64 = cand.iter().sum();
                for v in cand.iter_mut() {
                    *v /= total;
                }
                mixture(&cand, &mut f);
                let cand_obj = phi(&f);
                if cand_obj >= obj + 1e-4 * t * slope - 1e-13 * (1.0 + obj.abs()) {
                    g.copy_from_slice(&cand);
                    obj = cand_obj;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if improved {
                break;
            }
            tau *= 100.0;
        }
        if !improved {
            if std::env::var_os("PVSIG_KM_TRACE").is_some() {
                eprintln!("  inner: no ascent at iter {_outer}, kkt {kkt:.3e}");
            }
            mixture(g, &mut f);
            return;
        }
    }
    if std::env::var_os("PVSIG_KM_TRACE").is_some() {
        eprintln!("  inner: iteration cap");
    }
}

/// Fit the mixing masses on an explicit grid. Exposed separately from
/// [`fit_km`] so oracle tests can share one grid between this solver and an
/// independent reference implementation.
pub fn fit_km_cells(cells: &[CellObs], grid: &[f64], config: &KmConfig) -> Result<KmFit> {
    if cells.is_empty() {
        return Err(Error::Config("no cells to fit".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty support grid".into()));
    }
    let rows = DensityRows::new(cells, grid)?;
    let n_cells = cells.len() as f64;
    let gap_tol = GAP_RTOL * n_cells;
    let k = grid.len();
    let warm = warm_phase(&rows, config, WARM_SWEEPS.min(config.max_iter), gap_tol)?;
    let Phase { mut g, mut obj, mut d, mut gap, mut sweeps, mut converged } = warm;
    if !converged {
        // Column generation: polish a small active set to stationarity,
        // certify over the full grid, and admit the strongest violators
        // until the gap closes. The solution support holds at most one
        // atom per cell, so each cell's likelihood mode plus the heaviest
        // warm-phase atoms make a strong starting set; the warm iterate is
        // kept as a fallback in case refinement stalls below it.
        let warm_g = g.clone();
        let warm_obj = obj;
        let warm_gap = gap;
        let mut active: Vec<usize> = rows.shift_arg.clone();
        {
            let mut by_mass: Vec<usize> = (0..k).filter(|&i| g[i] > 0.0).collect();
            by_mass.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).expect("finite mass"));
            by_mass.truncate(64);
            active.extend(by_mass);
        }
        active.sort_unstable();
        active.dedup();
        let seed_violators =
            thin_violators(&d, n_cells + 0.25 * gap_tol, &active, 40);
        active.extend(seed_violators);
        active.sort_unstable();
        let mut refined_obj = f64::NEG_INFINITY;
        for cycle in 0..MAX_CYCLES {
            // Freshly admitted atoms arrive with zero mass; seed them so the
            // multiplicative inner updates can grow them.
            let mut g_active: Vec<f64> = active
                .iter()
                .map(|&i| if g[i] > 0.0 { g[i] } else { 1e-8 })
                .collect();
            let total: f64 = g_active.iter().sum();
            for v in &mut g_active {
                *v /= total;
            }
            inner_polish(&rows, &active, &mut g_active, 0.5 * gap_tol);
            g = vec![0.0; k];
            for (&i, &m) in active.iter().zip(&g_active) {
                g[i] = m;
            }
            let prev_gap = gap;
            let (obj_new, d_new) = rows.sweep(&g);
            sweeps += 1;
            if obj_new < refined_obj - 1e-7 * (1.0 + refined_obj.abs()) {
                return Err(Error::Numerical(format!(
                    "refinement objective decreased from {refined_obj} to {obj_new}"
                )));
            }
            refined_obj = obj_new;
            obj = obj_new;
            d = d_new;
            gap = max_entry(&d) - n_cells;
            if std::env::var_os("PVSIG_KM_TRACE").is_some() {
                eprintln!(
                    "cycle {cycle}: active {} gap {gap:.3e} obj {obj:.10}",
                    active.len()
                );
            }
            if gap <= gap_tol {
                converged = true;
                break;
            }
            if sweeps >= config.max_iter {
                break;
            }
            // Keep supported atoms, then admit the strongest violators
            // under the fresh gradient (pruned atoms may return).
            active.retain(|&i| g[i] > 0.0);
            if active.is_empty() {
                return Err(Error::Numerical("refinement lost all support".into()));
            }
            let mut violators =
                thin_violators(&d, n_cells + 0.25 * gap_tol, &active, 40);
            if violators.is_empty() {
                // The remaining violation hides inside a duplicate radius;
                // admit the raw gradient argmax so mass can migrate to it.
                let raw = (0..k)
                    .max_by(|&a, &b| d[a].partial_cmp(&d[b]).expect("finite gradient"))
                    .expect("non-empty grid");
                if !active.contains(&raw) {
                    violators.push(raw);
                } else if gap > 0.9 * prev_gap {
                    // The inner solver already holds the violating atom and
                    // the gap is not shrinking: numerically stuck.
                    break;
                }
            }
            active.extend(violators);
            active.sort_unstable();
        }
        if !converged && refined_obj < warm_obj {
            g = warm_g;
            obj = warm_obj;
            gap = warm_gap;
        }
    }
    let _ = (obj, gap);
    let mut masses = g;
    for m in &mut masses {
        if *m < MASS_FLOOR {
            *m = 0.0;
        }
    }
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("all masses fell below the floor".into()));
    }
    for m in &mut masses {
        *m /= total;
    }
    let (loglik, d_final) = rows.sweep(&masses);
    sweeps += 1;
    if !loglik.is_finite() {
        return Err(Error::Numerical(
            "mass cleanup removed all support for some cell".into(),
        ));
    }
    let gap_final = max_entry(&d_final) - n_cells;
    Ok(KmFit {
        prior: DiscretePrior::new(grid.to_vec(), masses)?,
        loglik,
        gap: gap_final,
        iterations: sweeps,
        converged: converged && gap_final <= gap_tol,
    })
}

/// Fit the discrete prior to a table: build the shared support grid from
/// the rate-ratio histogram, then maximize the marginal likelihood of the
/// non-reference cells over the masses.
pub fn fit_km(
    table: &ContingencyTable,
    expected: &ExpectedCounts,
    config: &KmConfig,
) -> Result<KmFit> {
    let k = config
        .k
        .unwrap_or_else(|| (10 * table.n_rows() * table.n_cols()).min(3000));
    let grid = generate_grid(table, expected, k, config.eps, config.seed)?;
    let cells = fitting_cells(table, expected, true);
    fit_km_cells(&cells, &grid, config)
}

/// Exact log marginal likelihood of a discrete prior on the non-reference
/// cells of a table.
pub fn km_objective(
    prior: &DiscretePrior,
    table: &ContingencyTable,
    expected: &ExpectedCounts,
) -> Result<f64> {
    let cells = fitting_cells(table, expected, true);
    km_objective_cells(prior, &cells)
}

/// Exact log marginal likelihood on an explicit cell list.
pub fn km_objective_cells(prior: &DiscretePrior, cells: &[CellObs]) -> Result<f64> {
    prior.validate()?;
    let rows = DensityRows::new(cells, &prior.support)?;
    let (obj, _) = rows.sweep(&prior.masses);
    Ok(obj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tables::{expected_natural, ContingencyTable};

    fn obs(count: u64, expected: f64) -> CellObs {
        CellObs { row: 0, col: 0, count, expected }
    }

    #[test]
    fn singleton_grid_gets_all_mass() {
        let cells: Vec<CellObs> = (0..6).map(|i| obs(i % 4, 2.0)).collect();
        let fit = fit_km_cells(&cells, &[2.5], &KmConfig::default()).unwrap();
        assert_eq!(fit.prior.masses, vec![1.0]);
        assert!(fit.converged);
        assert!(fit.gap.abs() < 1e-9);
    }

    #[test]
    fn identical_cells_concentrate_on_best_point() {
        // Every cell sees N=3 with E=1; the mixture likelihood is maximized
        // by a point mass at whichever grid value has the highest Poisson
        // density at 3, which is v=3.
        let cells: Vec<CellObs> = (0..25).map(|_| obs(3, 1.0)).collect();
        let fit =
            fit_km_cells(&cells, &[1.0, 3.0, 10.0], &KmConfig::default()).unwrap();
        assert!(fit.converged, "gap {}", fit.gap);
        assert!(fit.prior.masses[1] > 1.0 - 1e-9, "masses {:?}", fit.prior.masses);
        assert!(fit.prior.masses[0] == 0.0 && fit.prior.masses[2] == 0.0);
    }

    fn varied_table() -> ContingencyTable {
        let (ni, nj) = (8, 6);
        let mut counts = Vec::with_capacity(ni * nj);
        for i in 0..ni {
            for j in 0..nj {
                // Mix of quiet and elevated cells with one strong pair.
                let base = 3 + ((i * 7 + j * 11) % 9) as u64;
                let boost = if i == 1 && j == 2 { 40 } else { 0 };
                counts.push(base + boost);
            }
        }
        ContingencyTable::new(
            counts,
            ni,
            nj,
            (0..ni).map(|i| format!("ae{i}")).collect(),
            (0..nj).map(|j| format!("drug{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn table_fit_certifies_gap_and_beats_uniform() {
        let t = varied_table();
        let e = expected_natural(&t);
        let cfg = KmConfig { k: Some(120), ..Default::default() };
        let fit = fit_km(&t, &e, &cfg).unwrap();
        let n_cells = ((t.n_rows() - 1) * (t.n_cols() - 1)) as f64;
        assert!(fit.converged, "gap {} after {} sweeps", fit.gap, fit.iterations);
        assert!(fit.gap <= 1e-6 * n_cells, "gap {}", fit.gap);
        let k = fit.prior.k();
        let uniform =
            DiscretePrior::new(fit.prior.support.clone(), vec![1.0 / k as f64; k]).unwrap();
        let u_obj = km_objective(&uniform, &t, &e).unwrap();
        assert!(fit.loglik >= u_obj, "fitted {} < uniform {}", fit.loglik, u_obj);
        for m in &fit.prior.masses {
            assert!(*m == 0.0 || *m >= MASS_FLOOR);
        }
        let total: f64 = fit.prior.masses.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_brute_force() {
        let t = varied_table();
        let e = expected_natural(&t);
        let prior = DiscretePrior::new(
            vec![0.5, 1.0, 2.0, 6.0],
            vec![0.2, 0.45, 0.3, 0.05],
        )
        .unwrap();
        let got = km_objective(&prior, &t, &e).unwrap();
        let mut want = 0.0;
        for (i, j, n) in t.cells() {
            if t.is_reference_cell(i, j) {
                continue;
            }
            let ev = e.value(i, j);
            let mut f = 0.0;
            for (v, g) in prior.support.iter().zip(&prior.masses) {
                let mu = v * ev;
                let lp = n as f64 * mu.ln() - mu - ln_gamma(n as f64 + 1.0);
                f += g * lp.exp();
            }
            want += f.ln();
        }
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "got {got}, want {want}"
        );
    }

    #[test]
    fn dead_cell_error_names_the_cell() {
        let cells = vec![
            obs(2, 1.0),
            CellObs { row: 3, col: 2, count: 0, expected: 1e308 },
        ];
        let err = fit_km_cells(&cells, &[1e10, 1e80], &KmConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(3, 2)"), "message: {msg}");
        assert!(msg.contains("grid"), "message: {msg}");
    }
}
