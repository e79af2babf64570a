//! Priors over reporting rates and the conjugate per-cell posteriors.
//!
//! Two prior families are shared by every fitter in the crate: finite gamma
//! mixtures (parametric models) and discrete distributions on a fixed
//! support (nonparametric models). Both produce a [`CellPosterior`] exposing
//! the same summary surface.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_nb_coeff, log_sum_exp, reg_gamma_pair, reg_lower_gamma};

/// Tail threshold ε in Pr(λ ≥ 1+ε) used for signal probabilities.
pub const DEFAULT_EPSILON: f64 = 0.001;
/// Cutoff ζ in Pr(λ ≤ ζ) reported as the structural-zero probability.
pub const DEFAULT_ZERO_CUTOFF: f64 = 0.05;

/// Finite gamma mixture over λ: Σ_k ω_k Gamma(shape r_k, scale h_k).
/// Component rate is 1/h_k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaMixturePrior {
    pub weights: Vec<f64>,
    pub shapes: Vec<f64>,
    pub scales: Vec<f64>,
}

impl GammaMixturePrior {
    pub fn new(weights: Vec<f64>, shapes: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let p = Self { weights, shapes, scales };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Prior mean Σ ω_k r_k h_k.
    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.shapes)
            .zip(&self.scales)
            .map(|((w, r), h)| w * r * h)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty()
            || self.weights.len() != self.shapes.len()
            || self.weights.len() != self.scales.len()
        {
            return Err(Error::Config(
                "gamma mixture needs equal-length non-empty weights/shapes/scales".into(),
            ));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Config(format!(
                "gamma mixture weights sum to {sum}, expected 1"
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("gamma mixture weights must be finite and ≥ 0".into()));
        }
        if self
            .shapes
            .iter()
            .chain(&self.scales)
            .any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::Config(
                "gamma mixture shapes and scales must be finite and > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Discrete prior on a strictly increasing positive support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscretePrior {
    pub support: Vec<f64>,
    pub masses: Vec<f64>,
}

impl DiscretePrior {
    pub fn new(support: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        let p = Self { support, masses };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.masses).map(|(v, g)| v * g).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.support.len() != self.masses.len() {
            return Err(Error::Config(
                "discrete prior needs equal-length non-empty support/masses".into(),
            ));
        }
        if self
            .support
            .windows(2)
            .any(|w| !(w[1] > w[0]))
            || self.support[0] <= 0.0
            || self.support.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Config(
                "discrete support must be strictly increasing positive reals".into(),
            ));
        }
        let sum: f64 = self.masses.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Config(format!(
                "discrete prior masses sum to {sum}, expected 1"
            )));
        }
        if self.masses.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Config("discrete prior masses must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Log pmf of the gamma-Poisson marginal with mean αE/β:
/// f(n) = Γ(n+α)/(Γ(α)·n!) · (β/(E+β))^α · (E/(E+β))^n.
///
/// Evaluated as a function of q = E/β so callers holding a scale can pass
/// q = E·h without a reciprocal round trip. Returns NaN on non-finite or
/// out-of-domain parameters; E = 0 gives the point mass at n = 0.
pub fn nb_log_pmf(n: u64, alpha: f64, beta: f64, e: f64) -> f64 {
    if !(beta > 0.0) || !beta.is_finite() {
        return f64::NAN;
    }
    nb_log_pmf_odds(n, alpha, e / beta)
}

/// Same pmf parametrized by the odds q = E/β.
pub fn nb_log_pmf_odds(n: u64, alpha: f64, q: f64) -> f64 {
    if !(alpha > 0.0) || !alpha.is_finite() || !(q >= 0.0) || !q.is_finite() {
        return f64::NAN;
    }
    if q == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let mut lp = ln_nb_coeff(n, alpha) - alpha * q.ln_1p();
    if n > 0 {
        // ln(q/(1+q)) = -ln(1 + 1/q), exact where the direct difference
        // cancels for large q.
        lp -= n as f64 * (1.0 / q).ln_1p();
    }
    lp
}

/// Per-cell posterior over λ in one of the two shared forms.
#[derive(Debug, Clone)]
pub enum PosteriorForm {
    GammaMixture {
        weights: Vec<f64>,
        shapes: Vec<f64>,
        rates: Vec<f64>,
    },
    Discrete {
        support: Arc<[f64]>,
        masses: Vec<f64>,
    },
}

/// Posterior with cached summaries. Quantiles are computed on first use and
/// memoized; everything else is filled at construction.
#[derive(Debug, Clone)]
pub struct CellPosterior {
    form: PosteriorForm,
    pub mean: f64,
    pub variance: f64,
    /// Pr(λ ≥ 1 + ε) at ε = [`DEFAULT_EPSILON`].
    pub prob_signal: f64,
    /// Pr(λ ≤ ζ) at ζ = [`DEFAULT_ZERO_CUTOFF`].
    pub prob_zero: f64,
    quantiles: OnceLock<(f64, f64, f64)>,
}

impl CellPosterior {
    fn from_form(form: PosteriorForm) -> Self {
        let (mean, m2) = match &form {
            PosteriorForm::GammaMixture { weights, shapes, rates } => {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for ((w, a), b) in weights.iter().zip(shapes).zip(rates) {
                    m1 += w * a / b;
                    m2 += w * a * (a + 1.0) / (b * b);
                }
                (m1, m2)
            }
            PosteriorForm::Discrete { support, masses } => {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for (v, g) in support.iter().zip(masses) {
                    m1 += g * v;
                    m2 += g * v * v;
                }
                (m1, m2)
            }
        };
        let mut post = Self {
            form,
            mean,
            variance: (m2 - mean * mean).max(0.0),
            prob_signal: 0.0,
            prob_zero: 0.0,
            quantiles: OnceLock::new(),
        };
        post.prob_signal = post.prob_exceeds(1.0 + DEFAULT_EPSILON);
        post.prob_zero = post.cdf(DEFAULT_ZERO_CUTOFF);
        post
    }

    pub fn form(&self) -> &PosteriorForm {
        &self.form
    }

    /// Raw second moment E[λ²].
    pub fn second_moment(&self) -> f64 {
        self.variance + self.mean * self.mean
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match &self.form {
            PosteriorForm::GammaMixture { weights, shapes, rates } => weights
                .iter()
                .zip(shapes)
                .zip(rates)
                .map(|((w, a), b)| w * reg_lower_gamma(*a, b * x))
                .sum(),
            PosteriorForm::Discrete { support, masses } => support
                .iter()
                .zip(masses)
                .take_while(|(v, _)| **v <= x)
                .map(|(_, g)| g)
                .sum(),
        }
    }

    /// Pr(λ ≥ x), evaluated with the upper incomplete gamma so deep tails
    /// keep relative accuracy.
    pub fn prob_exceeds(&self, x: f64) -> f64 {
        match &self.form {
            PosteriorForm::GammaMixture { weights, shapes, rates } => weights
                .iter()
                .zip(shapes)
                .zip(rates)
                .map(|((w, a), b)| w * reg_gamma_pair(*a, b * x).1)
                .sum(),
            PosteriorForm::Discrete { support, masses } => support
                .iter()
                .zip(masses)
                .skip_while(|(v, _)| **v < x)
                .map(|(_, g)| g)
                .sum(),
        }
    }

    /// Pr(λ ≥ 1 + ε) for a caller-chosen ε.
    pub fn prob_signal_at(&self, epsilon: f64) -> f64 {
        self.prob_exceeds(1.0 + epsilon)
    }

    /// Pr(λ ≤ ζ) for a caller-chosen ζ.
    pub fn prob_zero_at(&self, zeta: f64) -> f64 {
        self.cdf(zeta)
    }

    /// Posterior quantile: bisection on the mixture CDF; generalized inverse
    /// (smallest v_k with cumulative mass ≥ q) for the discrete form.
    pub fn quantile(&self, q: f64) -> f64 {
        debug_assert!(q > 0.0 && q < 1.0);
        match &self.form {
            PosteriorForm::Discrete { support, masses } => {
                let mut cum = 0.0;
                for (v, g) in support.iter().zip(masses) {
                    cum += g;
                    if cum >= q {
                        return *v;
                    }
                }
                *support.last().expect("non-empty posterior support")
            }
            PosteriorForm::GammaMixture { .. } => {
                let sd = self.variance.sqrt();
                let mut hi = (self.mean + 10.0 * sd).max(1e-12);
                let mut lo = 0.0;
                for _ in 0..200 {
                    if self.cdf(hi) >= q {
                        break;
                    }
                    lo = hi;
                    hi *= 2.0;
                }
                for _ in 0..500 {
                    let mid = 0.5 * (lo + hi);
                    let f = self.cdf(mid);
                    if (f - q).abs() <= 1e-11 || (hi - lo) <= f64::EPSILON * hi {
                        return mid;
                    }
                    if f < q {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    fn quantile_triple(&self) -> &(f64, f64, f64) {
        self.quantiles
            .get_or_init(|| (self.quantile(0.05), self.quantile(0.5), self.quantile(0.95)))
    }

    pub fn q05(&self) -> f64 {
        self.quantile_triple().0
    }

    pub fn median(&self) -> f64 {
        self.quantile_triple().1
    }

    pub fn q95(&self) -> f64 {
        self.quantile_triple().2
    }
}

/// Conjugate update of a gamma mixture: component k becomes
/// Gamma(r_k + n, rate 1/h_k + E) with weight ∝ ω_k f_NB(n | r_k, 1/h_k, E).
/// E = 0 returns the prior unchanged.
pub fn posterior_gamma_mixture(
    prior: &GammaMixturePrior,
    n: u64,
    e: f64,
) -> Result<CellPosterior> {
    if !(e >= 0.0) || !e.is_finite() {
        return Err(Error::Numerical(format!("expected count must be finite and ≥ 0, got {e}")));
    }
    let k = prior.k();
    let mut log_w = Vec::with_capacity(k);
    let mut shapes = Vec::with_capacity(k);
    let mut rates = Vec::with_capacity(k);
    for i in 0..k {
        let (w, r, h) = (prior.weights[i], prior.shapes[i], prior.scales[i]);
        let lw = if w > 0.0 {
            w.ln() + nb_log_pmf_odds(n, r, e * h)
        } else {
            f64::NEG_INFINITY
        };
        log_w.push(lw);
        shapes.push(r + n as f64);
        rates.push(1.0 / h + e);
    }
    let norm = log_sum_exp(&log_w);
    if !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "all posterior mixture weights vanished at n={n}, E={e}"
        )));
    }
    let weights: Vec<f64> = log_w.iter().map(|lw| (lw - norm).exp()).collect();
    Ok(CellPosterior::from_form(PosteriorForm::GammaMixture { weights, shapes, rates }))
}

/// Discrete posterior: masses ∝ g_k Poisson(n | v_k E) on the unchanged
/// support. E = 0 with n = 0 returns the prior (flat likelihood).
pub fn posterior_discrete(prior: &DiscretePrior, n: u64, e: f64) -> Result<CellPosterior> {
    let support: Arc<[f64]> = Arc::from(prior.support.as_slice());
    posterior_discrete_shared(&support, &prior.masses, n, e)
}

/// Same as [`posterior_discrete`] but reusing a shared support allocation,
/// for callers building posteriors for many cells under one prior.
pub fn posterior_discrete_shared(
    support: &Arc<[f64]>,
    masses: &[f64],
    n: u64,
    e: f64,
) -> Result<CellPosterior> {
    if !(e >= 0.0) || !e.is_finite() {
        return Err(Error::Numerical(format!("expected count must be finite and ≥ 0, got {e}")));
    }
    // log Poisson(n | vE) up to the shared -lnΓ(n+1) constant.
    let log_mass: Vec<f64> = support
        .iter()
        .zip(masses)
        .map(|(v, g)| {
            if *g <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let mu = v * e;
            let log_pois = if n == 0 {
                -mu
            } else if mu == 0.0 {
                f64::NEG_INFINITY
            } else {
                n as f64 * mu.ln() - mu
            };
            g.ln() + log_pois
        })
        .collect();
    let norm = log_sum_exp(&log_mass);
    if !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "all discrete posterior masses vanished at n={n}, E={e}"
        )));
    }
    let masses: Vec<f64> = log_mass.iter().map(|lm| (lm - norm).exp()).collect();
    Ok(CellPosterior::from_form(PosteriorForm::Discrete {
        support: Arc::clone(support),
        masses,
    }))
}
