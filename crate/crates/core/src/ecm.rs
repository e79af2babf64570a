//! Gamma-mixture prior fitting by expectation / conditional maximization.
//!
//! The prior on the rate scale is a K-component gamma mixture. Each outer
//! iteration computes responsibilities in log space, then updates weights
//! and shapes in closed form and solves each scale by a one-dimensional
//! fixed point. A Dirichlet prior on the weights with concentration below
//! one shrinks weak components; a weight truncated to zero removes its
//! component permanently, so the fitted mixture is typically much smaller
//! than the starting grid. The concentration itself can be chosen by
//! cell-wise cross-validation over a candidate set.
//!
//! Plain ECM contracts very slowly once the mixture is nearly settled, so
//! after every two sweeps the driver attempts a squared-extrapolation jump
//! through the pair of parameter moves. A jump is kept only when it beats
//! the progress a plain sweep just made, which leaves the recorded
//! objective non-decreasing whenever the component set is unchanged.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{generate_grid, init_params};
use crate::mixture::{nb_log_pmf_odds, GammaMixturePrior};
use crate::special::{digamma_diff, log_sum_exp};
use crate::tables::{fitting_cells, CellObs, ContingencyTable, ExpectedCounts};

/// Floor for the observed-over-expected ratios that seed the support grid.
const GRID_FLOOR: f64 = 1e-4;
/// Scales stay strictly positive; data with no counts in a component drive
/// its scale toward zero and this is where the slide stops.
const SCALE_FLOOR: f64 = 1e-15;
/// Iteration cap for the inner scale solve. Bracketed Newton needs a few
/// dozen steps at most; hitting the cap means the tolerance is unreachable.
const INNER_CAP: usize = 10_000;
const CV_FOLDS: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct EcmConfig {
    /// Number of components the fit starts from. Shrinkage prunes from here.
    pub k_init: usize,
    /// Dirichlet concentration in (0, 1). `None` selects it by
    /// cross-validation over `alpha_candidates`.
    pub dirichlet_alpha: Option<f64>,
    pub alpha_candidates: Vec<f64>,
    pub max_iter: usize,
    /// Relative change of the penalized objective that counts as converged.
    pub outer_tol: f64,
    /// Absolute exit tolerance for the inner scale fixed point.
    pub h_tol: f64,
    /// Variance of every starting component; component means sit on the grid.
    pub init_concentration: f64,
    pub seed: u64,
    /// Drop reference row/column cells from the fitting likelihood. Their
    /// rates are pinned at one by design, so letting them vote would pile
    /// spurious prior mass near one.
    pub exclude_reference_cells: bool,
}

impl Default for EcmConfig {
    fn default() -> Self {
        Self {
            k_init: 100,
            dirichlet_alpha: None,
            alpha_candidates: vec![0.01, 0.25, 0.5, 0.75, 0.99],
            max_iter: 5000,
            outer_tol: 1e-8,
            h_tol: 1e-10,
            init_concentration: 1e-6,
            seed: 0,
            exclude_reference_cells: true,
        }
    }
}

impl EcmConfig {
    fn validate(&self) -> Result<()> {
        if self.k_init < 2 {
            return Err(Error::Config(format!(
                "k_init must be at least 2, got {}",
                self.k_init
            )));
        }
        if let Some(a) = self.dirichlet_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!(
                    "dirichlet_alpha must lie in (0, 1), got {a}"
                )));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        for (name, v) in [
            ("outer_tol", self.outer_tol),
            ("h_tol", self.h_tol),
            ("init_concentration", self.init_concentration),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-iteration record of a fit. `objective` is the log marginal likelihood
/// plus the Dirichlet log prior over the components active at that
/// iteration; entries are comparable only between iterations with equal
/// `active` counts, because a drop changes the penalty's dimension.
#[derive(Clone, Debug, Serialize)]
pub struct EcmTrace {
    pub objective: Vec<f64>,
    pub active: Vec<usize>,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EcmFit {
    pub prior: GammaMixturePrior,
    pub trace: EcmTrace,
    /// Log marginal likelihood of the fitted prior (no Dirichlet term).
    pub loglik: f64,
    /// Concentration the weights were penalized with; 1 means unpenalized.
    pub alpha: f64,
}

impl EcmFit {
    pub fn iterations(&self) -> usize {
        self.trace.objective.len()
    }
}

/// Outcome of the concentration search. `scores` holds the cross-validated
/// log predictive density per candidate in ascending candidate order;
/// `None` marks a candidate whose fit failed on some fold.
#[derive(Clone, Debug, Serialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    pub scores: Vec<(f64, Option<f64>)>,
}

#[derive(Clone, Copy)]
enum Shrinkage {
    /// Dirichlet concentration in (0, 1); weights without enough support
    /// truncate to zero and their components are dropped for good.
    Sparse(f64),
    /// Weights average the responsibilities; nothing is ever dropped.
    Flat,
}

/// Fit the shrinkage mixture. With a fixed concentration this runs one ECM;
/// with `dirichlet_alpha: None` the concentration is first chosen by
/// [`select_alpha`].
pub fn fit_ecm(
    table: &ContingencyTable,
    expected: &ExpectedCounts,
    config: &EcmConfig,
) -> Result<EcmFit> {
    config.validate()?;
    let alpha = match config.dirichlet_alpha {
        Some(a) => a,
        None => select_alpha(table, expected, config)?.alpha,
    };
    let cells = fitting_cells(table, expected, config.exclude_reference_cells);
    let grid = generate_grid(table, expected, config.k_init, GRID_FLOOR, config.seed)?;
    let init = init_params(&grid, config.init_concentration)?;
    run_ecm(&cells, &init, Shrinkage::Sparse(alpha), config)
}

/// Same fit from a caller-supplied starting mixture instead of the grid
/// initialization. Requires a fixed concentration: the cross-validation
/// search re-initializes per fold and would ignore the explicit start.
pub fn fit_ecm_from(
    table: &ContingencyTable,
    expected: &ExpectedCounts,
    init: &GammaMixturePrior,
    config: &EcmConfig,
) -> Result<EcmFit> {
    config.validate()?;
    let alpha = config.dirichlet_alpha.ok_or_else(|| {
        Error::Config("an explicit initialization requires a fixed dirichlet_alpha".into())
    })?;
    let cells = fitting_cells(table, expected, config.exclude_reference_cells);
    run_ecm(&cells, init, Shrinkage::Sparse(alpha), config)
}

/// Fit a plain K-component mixture: identical machinery with the Dirichlet
/// shrinkage disabled, so all K components survive to the end. K = 1
/// reduces to negative-binomial maximum likelihood.
///
/// Unlike the shrinkage fit, components start as exponentials (shape 1)
/// with means on the grid rather than as near-point masses. A prespecified
/// small K must reach the mixture likelihood optimum, and the shape update
/// moves only additively per iteration from a huge starting shape, so a
/// point-mass start would stall in a flat stretch of the likelihood.
pub fn fit_k_gamma(
    table: &ContingencyTable,
    expected: &ExpectedCounts,
    k: usize,
    config: &EcmConfig,
) -> Result<EcmFit> {
    config.validate()?;
    if k == 0 {
        return Err(Error::Config("component count must be positive".into()));
    }
    let cells = fitting_cells(table, expected, config.exclude_reference_cells);
    let means = if k == 1 {
        // The grid generator needs at least two points; a single component
        // starts at the aggregate rate ratio instead.
        let (sn, se) = cells
            .iter()
            .fold((0u64, 0.0), |(n, e), c| (n + c.count, e + c.expected));
        vec![if se > 0.0 { (sn as f64 / se).max(GRID_FLOOR) } else { 1.0 }]
    } else {
        generate_grid(table, expected, k, GRID_FLOOR, config.seed)?
    };
    let init = GammaMixturePrior::new(
        vec![1.0 / k as f64; k],
        vec![1.0; k],
        means,
    )?;
    run_ecm(&cells, &init, Shrinkage::Flat, config)
}

/// Choose the Dirichlet concentration by 5-fold cell-wise cross-validation:
/// each candidate is fit on four folds and scored by the log predictive
/// density of the held-out fold, summed over folds. Ties break toward the
/// larger candidate. A candidate whose fit fails on any fold is out of the
/// running; if that disqualifies every candidate the search is an error.
pub fn select_alpha(
    table: &ContingencyTable,
    expected: &ExpectedCounts,
    config: &EcmConfig,
) -> Result<AlphaSelection> {
    config.validate()?;
    if config.alpha_candidates.is_empty() {
        return Err(Error::Config("alpha_candidates must not be empty".into()));
    }
    let mut candidates = config.alpha_candidates.clone();
    for &a in &candidates {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!(
                "alpha candidates must lie in (0, 1), got {a}"
            )));
        }
    }
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();

    let cells = fitting_cells(table, expected, config.exclude_reference_cells);
    if cells.len() < CV_FOLDS {
        return Err(Error::Data(format!(
            "{} cells cannot be split into {CV_FOLDS} folds",
            cells.len()
        )));
    }
    let grid = generate_grid(table, expected, config.k_init, GRID_FLOOR, config.seed)?;
    let init = init_params(&grid, config.init_concentration)?;

    // Fold labels: shuffle the cell order once, deal round-robin. The rng is
    // seeded from the config, so fold membership is a pure function of
    // (table, seed).
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut fold_of = vec![0usize; cells.len()];
    for (pos, &cell) in order.iter().enumerate() {
        fold_of[cell] = pos % CV_FOLDS;
    }

    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, f64)> = None;
    for &a in &candidates {
        let mut total = 0.0;
        let mut ok = true;
        for fold in 0..CV_FOLDS {
            let train: Vec<CellObs> = cells
                .iter()
                .zip(&fold_of)
                .filter(|(_, &f)| f != fold)
                .map(|(c, _)| *c)
                .collect();
            let test: Vec<CellObs> = cells
                .iter()
                .zip(&fold_of)
                .filter(|(_, &f)| f == fold)
                .map(|(c, _)| *c)
                .collect();
            match run_ecm(&train, &init, Shrinkage::Sparse(a), config) {
                Ok(fit) => total += log_predictive(&fit.prior, &test),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        let score = ok.then_some(total);
        if let Some(s) = score {
            // >= with ascending candidates sends ties to the larger one.
            if best.map_or(true, |(_, bs)| s >= bs) {
                best = Some((a, s));
            }
        }
        scores.push((a, score));
    }
    let (alpha, _) =
        best.ok_or_else(|| Error::Numerical("every concentration candidate failed cross-validation".into()))?;
    Ok(AlphaSelection { alpha, scores })
}

/// Log marginal likelihood of `cells` under a fixed mixture prior.
fn log_predictive(prior: &GammaMixturePrior, cells: &[CellObs]) -> f64 {
    let lw: Vec<f64> = prior
        .weights
        .iter()
        .map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
        .collect();
    let mut scratch = vec![0.0; prior.k()];
    cells
        .iter()
        .map(|c| {
            for (s, ((lw, r), h)) in scratch
                .iter_mut()
                .zip(lw.iter().zip(&prior.shapes).zip(&prior.scales))
            {
                *s = lw + nb_log_pmf_odds(c.count, *r, c.expected * h);
            }
            log_sum_exp(&scratch)
        })
        .sum()
}

fn run_ecm(
    cells: &[CellObs],
    init: &GammaMixturePrior,
    shrink: Shrinkage,
    config: &EcmConfig,
) -> Result<EcmFit> {
    if cells.is_empty() {
        return Err(Error::Data("no cells to fit".into()));
    }
    if let Some(c) = cells.iter().find(|c| !(c.expected > 0.0) || !c.expected.is_finite()) {
        return Err(Error::Data(format!(
            "expected count must be finite and > 0 on fitted cells, got {} at ({}, {})",
            c.expected, c.row, c.col
        )));
    }
    let n_cells = cells.len();
    let ij = n_cells as f64;
    if let Shrinkage::Sparse(a) = shrink {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("dirichlet_alpha must lie in (0, 1), got {a}")));
        }
        // The weight numerators sum to K(α−1) + IJ; if that is not positive
        // every component truncates at once and no mixture exists.
        let room = init.k() as f64 * (a - 1.0) + ij;
        if room <= 0.0 {
            return Err(Error::Config(format!(
                "K(α−1) + IJ = {room} leaves no weight for any component; lower k_init or raise dirichlet_alpha"
            )));
        }
    }

    let mut w = init.weights.clone();
    let mut r = init.shapes.clone();
    let mut h = init.scales.clone();
    let mut tau = vec![0.0f64; n_cells * w.len()];
    let mut cell_ll = vec![0.0f64; n_cells];
    let mut track = Progress {
        objective: Vec::new(),
        active: Vec::new(),
        converged: false,
        prev: None,
        outer_tol: config.outer_tol,
    };
    let mut loglik = f64::NAN;
    let mut it = 0usize;
    // Largest extrapolation factor the jump may use. Doubles after a kept
    // jump, halves toward one after a rejected one, so a run where the
    // extrapolation keeps paying off probes ever longer steps.
    let mut smax = 4.0f64;

    while it < config.max_iter && !track.converged {
        let k0 = w.len();
        let z0 = pack_log(&w, &r, &h);
        let (obj0, ll) =
            em_sweep(cells, &mut w, &mut r, &mut h, &mut tau, &mut cell_ll, shrink, ij, config.h_tol)?;
        it += 1;
        loglik = ll;
        track.record(obj0, k0)?;
        // A jump needs two moves of the same component set and room for at
        // least one more sweep to realize the gain.
        if track.converged || it >= config.max_iter || w.len() != k0 {
            continue;
        }
        let z1 = pack_log(&w, &r, &h);
        let (obj1, ll) =
            em_sweep(cells, &mut w, &mut r, &mut h, &mut tau, &mut cell_ll, shrink, ij, config.h_tol)?;
        it += 1;
        loglik = ll;
        track.record(obj1, k0)?;
        if track.converged || it >= config.max_iter || w.len() != k0 {
            continue;
        }
        let z2 = pack_log(&w, &r, &h);
        if let Some((wj, rj, hj)) = extrapolate(&z0, &z1, &z2, smax, k0) {
            // Keep the jump only if it beats the progress of the sweep it
            // replaces; the next recorded objective then exceeds the last
            // one by at least that margin, so the trace stays monotone.
            let gain = (obj1 - obj0).max(0.0);
            match penalized_loglik(cells, &wj, &rj, &hj, shrink) {
                Some(objj) if objj >= obj1 + gain => {
                    w = wj;
                    r = rj;
                    h = hj;
                    smax *= 2.0;
                }
                _ => smax = (smax * 0.5).max(1.0),
            }
        }
    }
    let converged = track.converged;
    let (objective, active) = (track.objective, track.active);

    let tot: f64 = w.iter().sum();
    if !(tot > 0.0) {
        return Err(Error::Numerical("fitted weights lost all mass".into()));
    }
    for x in &mut w {
        *x /= tot;
    }
    let prior = GammaMixturePrior::new(w, r, h)?;
    let alpha = match shrink {
        Shrinkage::Sparse(a) => a,
        Shrinkage::Flat => 1.0,
    };
    Ok(EcmFit {
        prior,
        trace: EcmTrace { objective, active, converged },
        loglik,
        alpha,
    })
}

/// Objective bookkeeping for a fit in progress. Entries are comparable only
/// while the component set is fixed: a drop removes a positive penalty term
/// and resets the baseline for both the decrease check and convergence.
struct Progress {
    objective: Vec<f64>,
    active: Vec<usize>,
    converged: bool,
    prev: Option<(f64, usize)>,
    outer_tol: f64,
}

impl Progress {
    fn record(&mut self, obj: f64, k: usize) -> Result<()> {
        if !obj.is_finite() {
            return Err(Error::Numerical(format!("objective became {obj}")));
        }
        self.objective.push(obj);
        self.active.push(k);
        if let Some((prev_obj, prev_k)) = self.prev {
            if prev_k == k {
                if obj < prev_obj - 1e-6 {
                    return Err(Error::Numerical(format!(
                        "ECM objective decreased from {prev_obj} to {obj}, which the update rules forbid"
                    )));
                }
                if (obj - prev_obj).abs() <= self.outer_tol * (1.0 + prev_obj.abs()) {
                    self.converged = true;
                }
            }
        }
        self.prev = Some((obj, k));
        Ok(())
    }
}

/// One ECM sweep: responsibilities at the current parameters, then the
/// weight, shape and scale updates, including any weight truncations.
/// Returns the penalized objective and the log likelihood, both evaluated
/// at the parameters the sweep started from.
#[allow(clippy::too_many_arguments)]
fn em_sweep(
    cells: &[CellObs],
    w: &mut Vec<f64>,
    r: &mut Vec<f64>,
    h: &mut Vec<f64>,
    tau: &mut [f64],
    cell_ll: &mut [f64],
    shrink: Shrinkage,
    ij: f64,
    h_tol: f64,
) -> Result<(f64, f64)> {
    let k = w.len();
    let lw: Vec<f64> = w
        .iter()
        .map(|x| if *x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect();

    // E-step. Each row writes only its own slice and the per-cell sums
    // below run in index order, so the result is bitwise independent of
    // the thread count.
    let tau = &mut tau[..cells.len() * k];
    tau.par_chunks_mut(k)
        .zip(cells.par_iter())
        .zip(cell_ll.par_iter_mut())
        .for_each(|((row, cell), ll)| {
            for ((t, lw), (r, h)) in row.iter_mut().zip(&lw).zip(r.iter().zip(&*h)) {
                *t = lw + nb_log_pmf_odds(cell.count, *r, cell.expected * h);
            }
            let lse = log_sum_exp(row);
            *ll = lse;
            if lse.is_finite() {
                for t in row.iter_mut() {
                    *t = (*t - lse).exp();
                }
            }
        });
    if let Some(pos) = cell_ll.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "mixture likelihood vanished at cell ({}, {})",
            cells[pos].row, cells[pos].col
        )));
    }
    let loglik: f64 = cell_ll.iter().sum();
    let penalty = match shrink {
        Shrinkage::Sparse(a) => (a - 1.0) * w.iter().map(|x| x.ln()).sum::<f64>(),
        Shrinkage::Flat => 0.0,
    };
    let obj = loglik + penalty;

    // Responsibility-weighted sufficient statistics, one pass per cell.
    // s_ltheta accumulates −τ·log θ, which is positive, so the shape
    // update below is a ratio of positives.
    let mut s_tau = vec![0.0f64; k];
    let mut s_n = vec![0.0f64; k];
    let mut s_delta = vec![0.0f64; k];
    let mut s_ltheta = vec![0.0f64; k];
    for (row, cell) in tau.chunks(k).zip(cells) {
        let nf = cell.count as f64;
        for t in 0..k {
            let tt = row[t];
            if tt == 0.0 {
                continue;
            }
            s_tau[t] += tt;
            s_n[t] += tt * nf;
            s_delta[t] += tt * r[t] * digamma_diff(r[t], cell.count);
            s_ltheta[t] += tt * (cell.expected * h[t]).ln_1p();
        }
    }

    // CM-1: weights, then shapes at the current scales.
    let keep: Vec<bool> = match shrink {
        Shrinkage::Sparse(a) => {
            let num: Vec<f64> = s_tau.iter().map(|s| s + (a - 1.0)).collect();
            let keep: Vec<bool> = num.iter().map(|&x| x > 0.0).collect();
            let tot: f64 = num.iter().filter(|&&x| x > 0.0).sum();
            if !(tot > 0.0) {
                return Err(Error::Numerical("every component truncated to zero weight".into()));
            }
            for (w, (n, keep)) in w.iter_mut().zip(num.iter().zip(&keep)) {
                *w = if *keep { n / tot } else { 0.0 };
            }
            keep
        }
        Shrinkage::Flat => {
            for (w, s) in w.iter_mut().zip(&s_tau) {
                *w = s / ij;
            }
            vec![true; k]
        }
    };
    for t in 0..k {
        if keep[t] && s_delta[t] > 0.0 && s_ltheta[t] > 0.0 {
            r[t] = s_delta[t] / s_ltheta[t];
        }
    }

    // CM-2: each surviving scale solves its own fixed point at the
    // fresh shape.
    for t in 0..k {
        if keep[t] {
            h[t] = solve_scale(cells, tau, k, t, s_n[t], r[t], h[t], h_tol, None)?;
        }
    }

    if keep.iter().any(|&b| !b) {
        let filter = |v: &mut Vec<f64>| {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        };
        filter(w);
        filter(r);
        filter(h);
    }
    Ok((obj, loglik))
}

/// Parameters as one stacked log vector: weights, then shapes, then scales.
/// Everything packed is strictly positive, so the logs are finite.
fn pack_log(w: &[f64], r: &[f64], h: &[f64]) -> Vec<f64> {
    w.iter()
        .chain(r)
        .chain(h)
        .map(|v| v.ln())
        .collect()
}

/// Squared-extrapolation candidate through two consecutive parameter moves,
/// in log space so positivity is free. The step length is the usual
/// ratio-of-norms choice, clamped to [1, smax]; at exactly one it reproduces
/// the second sweep's endpoint. Returns `None` when the moves give no
/// direction or the candidate leaves floating-point range.
fn extrapolate(z0: &[f64], z1: &[f64], z2: &[f64], smax: f64, k: usize) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut vn = 0.0f64;
    let mut un = 0.0f64;
    for i in 0..z0.len() {
        let v = z1[i] - z0[i];
        let u = z2[i] - 2.0 * z1[i] + z0[i];
        vn += v * v;
        un += u * u;
    }
    if !(un > 0.0) || !vn.is_finite() {
        return None;
    }
    let s = -(vn / un).sqrt().clamp(1.0, smax);
    let mut w = Vec::with_capacity(k);
    let mut r = Vec::with_capacity(k);
    let mut h = Vec::with_capacity(k);
    let mut wsum = 0.0f64;
    for i in 0..z0.len() {
        let v = z1[i] - z0[i];
        let u = z2[i] - 2.0 * z1[i] + z0[i];
        let z = z0[i] - 2.0 * s * v + s * s * u;
        if !z.is_finite() || z.abs() > 700.0 {
            return None;
        }
        let x = z.exp();
        if i < k {
            w.push(x);
            wsum += x;
        } else if i < 2 * k {
            r.push(x);
        } else {
            h.push(x);
        }
    }
    for x in &mut w {
        *x /= wsum;
    }
    Some((w, r, h))
}

/// Penalized objective of a parameter candidate, or `None` when the mixture
/// likelihood vanishes somewhere. Used to vet extrapolation jumps, which
/// are discarded rather than reported as errors when they misbehave.
fn penalized_loglik(cells: &[CellObs], w: &[f64], r: &[f64], h: &[f64], shrink: Shrinkage) -> Option<f64> {
    let lw: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    let mut scratch = vec![0.0; w.len()];
    let mut loglik = 0.0f64;
    for cell in cells {
        for (s, ((lw, r), h)) in scratch.iter_mut().zip(lw.iter().zip(r).zip(h)) {
            *s = lw + nb_log_pmf_odds(cell.count, *r, cell.expected * h);
        }
        let lse = log_sum_exp(&scratch);
        if !lse.is_finite() {
            return None;
        }
        loglik += lse;
    }
    let penalty = match shrink {
        Shrinkage::Sparse(a) => (a - 1.0) * lw.iter().sum::<f64>(),
        Shrinkage::Flat => 0.0,
    };
    let obj = loglik + penalty;
    obj.is_finite().then_some(obj)
}

/// Solve Σ τ·(N/h − E(N+r)/(1+Eh)) = 0 for one component's scale. In the
/// cleared form φ(h) = ΣτN − Σ τE(N+r)·h/(1+Eh) the score is strictly
/// decreasing from ΣτN > 0 to −Στr < 0, so the root is unique; a Newton
/// iteration safeguarded by the sign bracket finds it in a handful of
/// steps, where the naive fixed point h ← ΣτN / Σ τE(N+r)/(1+Eh) can
/// contract arbitrarily slowly. `tau` is the row-major responsibility
/// matrix with stride `k`, `col` the component, `s_n` the precomputed ΣτN.
/// `trace`, when given, records |Δh| per iterate.
#[allow(clippy::too_many_arguments)]
fn solve_scale(
    cells: &[CellObs],
    tau: &[f64],
    k: usize,
    col: usize,
    s_n: f64,
    r: f64,
    h0: f64,
    h_tol: f64,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<f64> {
    if !(s_n > 0.0) {
        // No weighted counts at all: the score is negative for every h > 0.
        return Ok(SCALE_FLOOR);
    }
    let phi = |h: f64| -> (f64, f64) {
        let mut val = s_n;
        let mut slope = 0.0;
        for (row, cell) in tau.chunks(k).zip(cells) {
            let t = row[col];
            if t == 0.0 {
                continue;
            }
            let w = t * cell.expected * (cell.count as f64 + r);
            let d = 1.0 + cell.expected * h;
            val -= w * h / d;
            slope -= w / (d * d);
        }
        (val, slope)
    };

    let mut lo = SCALE_FLOOR;
    let mut hi = h0.max(2.0 * SCALE_FLOOR);
    let mut growths = 0;
    while phi(hi).0 > 0.0 {
        lo = hi;
        hi *= 8.0;
        growths += 1;
        if growths > 400 || !hi.is_finite() {
            return Err(Error::Numerical("scale score has no finite root".into()));
        }
    }

    let mut h = h0.clamp(lo, hi);
    for _ in 0..INNER_CAP {
        let (val, slope) = phi(h);
        if !val.is_finite() || !slope.is_finite() {
            return Err(Error::Numerical(format!(
                "scale score became non-finite (value {val}, slope {slope})"
            )));
        }
        if val > 0.0 {
            lo = h;
        } else {
            hi = h;
        }
        let newton = h - val / slope;
        let next = if slope < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let resid = (next - h).abs();
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(resid);
        }
        h = next;
        if resid < h_tol {
            return Ok(h.max(SCALE_FLOOR));
        }
    }
    Err(Error::Numerical("scale solve failed to reach tolerance".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn poisson(rng: &mut ChaCha8Rng, mu: f64) -> u64 {
        let floor = (-mu).exp();
        let mut k = 0u64;
        let mut p = 1.0f64;
        loop {
            p *= rng.random::<f64>();
            if p <= floor {
                return k;
            }
            k += 1;
        }
    }

    fn gamma2(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
        // Shape-2 gamma as a sum of two exponentials.
        -scale * (rng.random::<f64>().ln() + rng.random::<f64>().ln())
    }

    fn cells_from(counts: &[u64], expected: f64) -> Vec<CellObs> {
        counts
            .iter()
            .enumerate()
            .map(|(i, &count)| CellObs { row: i, col: 0, count, expected })
            .collect()
    }

    fn geometric_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
        let step = (hi / lo).powf(1.0 / (k - 1) as f64);
        (0..k).map(|i| lo * step.powi(i as i32)).collect()
    }

    /// 42x7 worth of cells with three rate clusters, all E equal.
    fn cluster_cells(seed: u64, expected: f64) -> Vec<CellObs> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..294)
            .map(|i| {
                let rate = match i % 10 {
                    0..=6 => 1.0,
                    7 | 8 => 0.5,
                    _ => 4.0,
                };
                CellObs {
                    row: i / 7,
                    col: i % 7,
                    count: poisson(&mut rng, expected * rate),
                    expected,
                }
            })
            .collect()
    }

    fn small_table(seed: u64) -> (ContingencyTable, ExpectedCounts) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ni, nj) = (12, 6);
        let counts: Vec<u64> = (0..ni * nj).map(|_| 20 + poisson(&mut rng, 30.0)).collect();
        let t = ContingencyTable::new(
            counts,
            ni,
            nj,
            (0..ni).map(|i| format!("r{i}")).collect(),
            (0..nj).map(|j| format!("c{j}")).collect(),
        )
        .unwrap();
        let e = crate::tables::expected_natural(&t);
        (t, e)
    }

    #[test]
    fn single_component_start_reduces_to_nb_maximum_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let counts: Vec<u64> = (0..300)
            .map(|_| {
                let lambda = gamma2(&mut rng, 0.5);
                poisson(&mut rng, 10.0 * lambda)
            })
            .collect();
        let cells = cells_from(&counts, 10.0);
        let init = GammaMixturePrior::new(vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let cfg = EcmConfig { max_iter: 20_000, ..EcmConfig::default() };
        let fit = run_ecm(&cells, &init, Shrinkage::Flat, &cfg).unwrap();
        assert!(fit.trace.converged);
        assert_eq!(fit.prior.k(), 1);
        let (r, h) = (fit.prior.shapes[0], fit.prior.scales[0]);
        assert!((r - 2.0).abs() / 2.0 < 0.10, "shape {r}");
        assert!((h - 0.5).abs() / 0.5 < 0.10, "scale {h}");
    }

    #[test]
    fn single_component_tracks_unit_poisson_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let counts: Vec<u64> = (0..300).map(|_| poisson(&mut rng, 10.0)).collect();
        let cells = cells_from(&counts, 10.0);
        let init = GammaMixturePrior::new(vec![1.0], vec![1.0], vec![0.7]).unwrap();
        let fit = run_ecm(&cells, &init, Shrinkage::Flat, &EcmConfig::default()).unwrap();
        let mean = fit.prior.mean();
        assert!((mean - 1.0).abs() < 0.05, "prior mean {mean}");
    }

    #[test]
    fn flat_weights_average_the_responsibilities() {
        // Rates drawn from two well-separated gamma components keep the
        // mixture likelihood optimum interior, so the fit truly stalls
        // instead of creeping toward a Poisson boundary.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cells: Vec<CellObs> = (0..294)
            .map(|i| {
                let scale = if i % 2 == 0 { 0.25 } else { 1.0 };
                let lambda = gamma2(&mut rng, scale);
                CellObs { row: i / 7, col: i % 7, count: poisson(&mut rng, 6.0 * lambda), expected: 6.0 }
            })
            .collect();
        let init =
            GammaMixturePrior::new(vec![0.5; 2], vec![1.0; 2], vec![0.4, 1.8]).unwrap();
        let cfg = EcmConfig { max_iter: 50_000, ..EcmConfig::default() };
        let fit = run_ecm(&cells, &init, Shrinkage::Flat, &cfg).unwrap();
        assert!(fit.trace.converged);
        // At a fixed point the weights must equal the responsibility means.
        let p = &fit.prior;
        let mut mean_tau = vec![0.0; p.k()];
        let mut lt = vec![0.0; p.k()];
        for c in &cells {
            for t in 0..p.k() {
                lt[t] = p.weights[t].ln() + nb_log_pmf_odds(c.count, p.shapes[t], c.expected * p.scales[t]);
            }
            let lse = log_sum_exp(&lt);
            for t in 0..p.k() {
                mean_tau[t] += (lt[t] - lse).exp() / cells.len() as f64;
            }
        }
        for (w, m) in p.weights.iter().zip(&mean_tau) {
            // Slack covers the one parameter update between the recorded
            // weights and the recomputed responsibilities.
            assert!((w - m).abs() < 1e-4, "weight {w} vs responsibility mean {m}");
        }
    }

    #[test]
    fn shrinkage_prunes_cluster_data_hard() {
        let cells = cluster_cells(21, 8.0);
        let init = init_params(&geometric_grid(0.01, 20.0, 100), 1e-6).unwrap();
        let cfg = EcmConfig { dirichlet_alpha: Some(0.01), ..EcmConfig::default() };
        let fit = run_ecm(&cells, &init, Shrinkage::Sparse(0.01), &cfg).unwrap();
        assert!(fit.trace.converged);
        assert!(
            fit.prior.k() <= 15,
            "three rate clusters left {} active components",
            fit.prior.k()
        );
        // Drops are permanent, so the active count can never grow back.
        for pair in fit.trace.active.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn objective_is_monotone_while_the_support_is_fixed() {
        let cells = cluster_cells(33, 8.0);
        let init = init_params(&geometric_grid(0.05, 10.0, 60), 1e-6).unwrap();
        let fit = run_ecm(&cells, &init, Shrinkage::Sparse(0.25), &EcmConfig::default()).unwrap();
        assert!(fit.trace.converged);
        let tr = &fit.trace;
        for i in 1..tr.objective.len() {
            if tr.active[i] == tr.active[i - 1] {
                assert!(
                    tr.objective[i] >= tr.objective[i - 1] - 1e-9,
                    "objective fell from {} to {} at iteration {i}",
                    tr.objective[i - 1],
                    tr.objective[i]
                );
            }
        }
    }

    #[test]
    fn component_order_is_irrelevant_to_the_fit() {
        let cells = cluster_cells(5, 7.0);
        let grid = geometric_grid(0.1, 8.0, 12);
        let fwd = init_params(&grid, 1e-6).unwrap();
        let rev_grid: Vec<f64> = grid.iter().rev().copied().collect();
        let rev = GammaMixturePrior::new(
            fwd.weights.clone(),
            rev_grid.iter().map(|v| v * v / 1e-6).collect(),
            rev_grid.iter().map(|v| 1e-6 / v).collect(),
        )
        .unwrap();
        let cfg = EcmConfig::default();
        let a = run_ecm(&cells, &fwd, Shrinkage::Sparse(0.5), &cfg).unwrap();
        let b = run_ecm(&cells, &rev, Shrinkage::Sparse(0.5), &cfg).unwrap();
        assert_eq!(a.prior.k(), b.prior.k());
        let sorted = |p: &GammaMixturePrior| {
            let mut v: Vec<(f64, f64, f64)> = (0..p.k())
                .map(|t| (p.shapes[t], p.scales[t], p.weights[t]))
                .collect();
            v.sort_by(|x, y| x.0.total_cmp(&y.0));
            v
        };
        for ((ra, ha, wa), (rb, hb, wb)) in sorted(&a.prior).into_iter().zip(sorted(&b.prior)) {
            assert!((ra - rb).abs() <= 1e-8 * (1.0 + ra.abs()), "shapes {ra} vs {rb}");
            assert!((ha - hb).abs() <= 1e-8 * (1.0 + ha.abs()), "scales {ha} vs {hb}");
            assert!((wa - wb).abs() <= 1e-8, "weights {wa} vs {wb}");
        }
    }

    #[test]
    fn shrinkage_needs_room_for_mass() {
        let t = ContingencyTable::new(
            vec![5, 10, 20, 1000],
            2,
            2,
            vec!["a".into(), "other_ae".into()],
            vec!["x".into(), "Other".into()],
        )
        .unwrap();
        let e = crate::tables::expected_natural(&t);
        let cfg = EcmConfig { dirichlet_alpha: Some(0.01), ..EcmConfig::default() };
        // One fitted cell against 100 starting components: K(α−1) + IJ < 0.
        let err = fit_ecm(&t, &e, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "unexpected error {err:?}");
    }

    #[test]
    fn explicit_start_needs_a_fixed_concentration() {
        let (t, e) = small_table(2);
        let init = init_params(&[0.5, 1.0, 2.0], 1e-6).unwrap();
        let err = fit_ecm_from(&t, &e, &init, &EcmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "unexpected error {err:?}");
    }

    #[test]
    fn scale_fixed_point_residuals_shrink_monotonically() {
        let cells: Vec<CellObs> = [(0u64, 2.0), (3, 5.0), (1, 8.0), (7, 12.0), (2, 20.0)]
            .iter()
            .enumerate()
            .map(|(i, &(count, expected))| CellObs { row: i, col: 0, count, expected })
            .collect();
        let tau = vec![1.0; cells.len()];
        let s_n: f64 = cells.iter().map(|c| c.count as f64).sum();
        let mut resid = Vec::new();
        let h = solve_scale(&cells, &tau, 1, 0, s_n, 1.5, 3.0, 1e-12, Some(&mut resid)).unwrap();
        assert!(h > 0.0);
        assert!(*resid.last().unwrap() < 1e-12);
        for pair in resid.windows(2) {
            assert!(pair[1] <= pair[0], "residuals rose: {pair:?}");
        }
    }

    #[test]
    fn cross_validation_is_deterministic_and_respects_single_candidates() {
        let (t, e) = small_table(17);
        let cfg = EcmConfig {
            k_init: 40,
            alpha_candidates: vec![0.75, 0.25],
            seed: 3,
            ..EcmConfig::default()
        };
        let first = select_alpha(&t, &e, &cfg).unwrap();
        let second = select_alpha(&t, &e, &cfg).unwrap();
        assert_eq!(first.alpha, second.alpha);
        assert_eq!(first.scores, second.scores);
        assert!(first.scores.iter().all(|(_, s)| s.is_some()));
        // Candidates are reported in ascending order regardless of input.
        assert!(first.scores[0].0 < first.scores[1].0);

        let lone = EcmConfig { alpha_candidates: vec![0.5], ..cfg };
        assert_eq!(select_alpha(&t, &e, &lone).unwrap().alpha, 0.5);
    }
}
