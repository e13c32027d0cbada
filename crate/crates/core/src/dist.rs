//! Count distribution families and link functions.
//!
//! Seven families share a common μ/σ parameterization with mean μ:
//! Poisson and Geometric are 1-parametric, the rest 2-parametric. Every
//! positive parameter uses the log link by default; the zero-inflation
//! probability of the zero-inflated Poisson uses logit. All operations
//! are pure functions, safe to call concurrently (the double-Poisson
//! normalizer cache is thread-local).

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Lower clamp for positive distribution parameters recovered from a link.
pub const PARAM_MIN: f64 = 1e-10;
/// Upper clamp for the log-link inverse, guarding against exploding
/// exponentials in the linear predictor.
pub const PARAM_MAX: f64 = 1e10;
/// Clamp for probability-valued parameters (zero-inflation).
pub const PROB_EPS: f64 = 1e-12;
/// Default floor for IWLS curvature weights.
pub const WEIGHT_FLOOR: f64 = 1e-10;

const QUANTILE_CAP: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Link {
    Identity,
    Log,
    Logit,
    LogIdent,
}

impl Link {
    /// g(x): maps the parameter domain onto the predictor scale.
    pub fn apply(self, x: f64) -> Result<f64> {
        match self {
            Link::Identity => Ok(x),
            Link::Log => {
                if x > 0.0 {
                    Ok(x.ln())
                } else {
                    Err(Error::LinkDomain { link: self, value: x })
                }
            }
            Link::Logit => {
                if x > 0.0 && x < 1.0 {
                    Ok((x / (1.0 - x)).ln())
                } else {
                    Err(Error::LinkDomain { link: self, value: x })
                }
            }
            Link::LogIdent => {
                if x > 0.0 {
                    Ok(if x <= 1.0 { x.ln() } else { x - 1.0 })
                } else {
                    Err(Error::LinkDomain { link: self, value: x })
                }
            }
        }
    }

    /// g⁻¹(η): total on the reals. The log inverse is clamped to
    /// [PARAM_MIN, PARAM_MAX], the logit inverse to (PROB_EPS, 1-PROB_EPS).
    pub fn invert(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp().clamp(PARAM_MIN, PARAM_MAX),
            Link::Logit => {
                let p = 1.0 / (1.0 + (-eta).exp());
                p.clamp(PROB_EPS, 1.0 - PROB_EPS)
            }
            Link::LogIdent => {
                if eta <= 0.0 {
                    eta.exp().max(PARAM_MIN)
                } else {
                    (eta + 1.0).min(PARAM_MAX)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Poisson,
    Geometric,
    NegBinomial,
    Waring,
    GenPoisson,
    DoublePoisson,
    ZeroInfPoisson,
}

impl Family {
    /// Canonical order, also used for information-criterion tie breaking.
    pub const ALL: [Family; 7] = [
        Family::Poisson,
        Family::Geometric,
        Family::NegBinomial,
        Family::Waring,
        Family::GenPoisson,
        Family::DoublePoisson,
        Family::ZeroInfPoisson,
    ];

    pub fn n_params(self) -> usize {
        match self {
            Family::Poisson | Family::Geometric => 1,
            _ => 2,
        }
    }

    pub fn links(self) -> &'static [Link] {
        match self {
            Family::Poisson | Family::Geometric => &[Link::Log],
            Family::ZeroInfPoisson => &[Link::Log, Link::Logit],
            _ => &[Link::Log, Link::Log],
        }
    }

    /// Starting value for the scale parameter in iterative fits.
    pub fn default_scale(self) -> Option<f64> {
        match self {
            Family::Poisson | Family::Geometric => None,
            Family::ZeroInfPoisson => Some(0.1),
            _ => Some(1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Geometric => "geometric",
            Family::NegBinomial => "neg_binomial",
            Family::Waring => "waring",
            Family::GenPoisson => "gen_poisson",
            Family::DoublePoisson => "double_poisson",
            Family::ZeroInfPoisson => "zero_inf_poisson",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown family '{s}'")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A validated parameter vector for one family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamVector {
    family: Family,
    theta: [f64; 2],
}

impl ParamVector {
    pub fn new(family: Family, theta: &[f64]) -> Result<ParamVector> {
        if theta.len() != family.n_params() {
            return Err(Error::domain(
                format!("{family} expects {} parameters, got {}", family.n_params(), theta.len()),
                theta.len() as f64,
            ));
        }
        let mu = theta[0];
        if !mu.is_finite() || mu <= 0.0 {
            return Err(Error::domain(format!("{family} mean"), mu));
        }
        let sigma = if family.n_params() == 2 { theta[1] } else { 1.0 };
        if family.n_params() == 2 {
            if !sigma.is_finite() || sigma <= 0.0 {
                return Err(Error::domain(format!("{family} scale"), sigma));
            }
            if family == Family::ZeroInfPoisson && sigma >= 1.0 {
                return Err(Error::domain("zero-inflation probability", sigma));
            }
        }
        Ok(ParamVector { family, theta: [mu, sigma] })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn get(&self, m: usize) -> f64 {
        self.theta[m]
    }

    pub fn mu(&self) -> f64 {
        self.theta[0]
    }

    /// Copy with parameter `m` replaced (unvalidated fast path for
    /// finite-difference probes; callers must stay inside the domain).
    pub(crate) fn with_param(&self, m: usize, value: f64) -> ParamVector {
        let mut theta = self.theta;
        theta[m] = value;
        ParamVector { family: self.family, theta }
    }

    pub fn log_pmf(&self, y: u64) -> f64 {
        let mu = self.theta[0];
        let sigma = self.theta[1];
        let yf = y as f64;
        match self.family {
            Family::Poisson => yf * mu.ln() - mu - ln_factorial(y),
            Family::Geometric => yf * mu.ln() - (yf + 1.0) * (1.0 + mu).ln(),
            Family::NegBinomial => {
                let r = 1.0 / sigma;
                ln_gamma(yf + r) - ln_gamma(r) - ln_factorial(y) + yf * (sigma * mu).ln()
                    - (yf + r) * (1.0 + sigma * mu).ln()
            }
            Family::Waring => {
                // beta-geometric: α = 1/σ + 1, β = μ/σ
                let a = 1.0 / sigma + 1.0;
                let b = mu / sigma;
                ln_beta(a + 1.0, b + yf) - ln_beta(a, b)
            }
            Family::GenPoisson => {
                let denom = 1.0 + sigma * mu;
                yf * (mu.ln() - denom.ln()) + (yf - 1.0) * (1.0 + sigma * yf).ln()
                    - ln_factorial(y)
                    - mu * (1.0 + sigma * yf) / denom
            }
            Family::DoublePoisson => dp_log_kernel(mu, sigma, y) - dp_log_norm(mu, sigma),
            Family::ZeroInfPoisson => {
                if y == 0 {
                    (sigma + (1.0 - sigma) * (-mu).exp()).ln()
                } else {
                    (1.0 - sigma).ln() - mu + yf * mu.ln() - ln_factorial(y)
                }
            }
        }
    }

    pub fn pmf(&self, y: u64) -> f64 {
        self.log_pmf(y).exp()
    }

    /// CDF by cumulative summation of the pmf, with early exit once the
    /// remaining tail is negligible.
    pub fn cdf(&self, y: u64) -> f64 {
        let mut acc = 0.0;
        for k in 0..=y {
            acc += self.pmf(k);
            if acc >= 1.0 - 1e-15 {
                break;
            }
        }
        acc.min(1.0)
    }

    /// Smallest integer q with cdf(q) >= p (generalized inverse).
    pub fn quantile(&self, p: f64) -> u64 {
        if p <= 0.0 {
            return 0;
        }
        debug_assert!(p < 1.0, "quantile probability must lie in (0,1)");
        let mut acc = 0.0;
        for k in 0..QUANTILE_CAP {
            acc += self.pmf(k);
            if acc >= p {
                return k;
            }
        }
        QUANTILE_CAP
    }

    /// Analytic mean and variance; DoublePoisson moments come from the
    /// same truncated summation as its normalizer. A Waring scale >= 1
    /// has infinite variance, reported as +inf.
    pub fn moments(&self) -> (f64, f64) {
        let mu = self.theta[0];
        let sigma = self.theta[1];
        match self.family {
            Family::Poisson => (mu, mu),
            Family::Geometric => (mu, mu * (1.0 + mu)),
            Family::NegBinomial => (mu, mu + sigma * mu * mu),
            Family::Waring => {
                if sigma >= 1.0 {
                    (mu, f64::INFINITY)
                } else {
                    (mu, mu * (1.0 + mu) * (1.0 + sigma) / (1.0 - sigma))
                }
            }
            Family::GenPoisson => {
                let c = 1.0 + sigma * mu;
                (mu, mu * c * c)
            }
            Family::DoublePoisson => dp_moments(mu, sigma),
            Family::ZeroInfPoisson => {
                let mean = (1.0 - sigma) * mu;
                let second = (1.0 - sigma) * (mu * mu + mu);
                (mean, second - mean * mean)
            }
        }
    }

    /// Inverse-CDF sampling; deterministic for a fixed generator state.
    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for k in 0..QUANTILE_CAP {
            acc += self.pmf(k);
            if acc > u {
                return k;
            }
        }
        QUANTILE_CAP
    }

    pub fn sample_seeded(&self, seed: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample(&mut rng)
    }
}

/// Score u = ∂ℓ/∂η_m and curvature weight w for the IWLS working
/// response z = η_m + u/w. Analytic for the location parameter of
/// Poisson, Geometric and NegBinomial; central finite differences on the
/// predictor scale otherwise. `w` is floored at `w_floor`.
pub fn score_and_weight(
    family: Family,
    m: usize,
    theta: &ParamVector,
    eta_m: f64,
    y: u64,
    w_floor: f64,
) -> Result<(f64, f64)> {
    let yf = y as f64;
    let mu = theta.get(0);
    let (u, w) = match (family, m) {
        (Family::Poisson, 0) => (yf - mu, mu),
        (Family::Geometric, 0) => ((yf - mu) / (1.0 + mu), mu / (1.0 + mu)),
        (Family::NegBinomial, 0) => {
            let c = 1.0 + theta.get(1) * mu;
            ((yf - mu) / c, mu / c)
        }
        _ => {
            let link = family.links()[m];
            let ll = |eta: f64| theta.with_param(m, link.invert(eta)).log_pmf(y);
            let h1 = 1e-6 * eta_m.abs().max(1.0);
            let u = (ll(eta_m + h1) - ll(eta_m - h1)) / (2.0 * h1);
            let h2 = 1e-4 * eta_m.abs().max(1.0);
            let d2 = (ll(eta_m + h2) - 2.0 * ll(eta_m) + ll(eta_m - h2)) / (h2 * h2);
            // the per-observation log-likelihood can be locally convex in
            // the predictor (e.g. the mixing parameter of a zero-inflated
            // family at a zero count); fall back to the squared score,
            // which is positive and has the right expectation
            let w = if d2 < 0.0 { -d2 } else { u * u };
            (u, w)
        }
    };
    if !u.is_finite() || !w.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite score for {family} parameter {m} at eta={eta_m}, y={y}"
        )));
    }
    Ok((u, w.max(w_floor)))
}

fn ln_factorial(y: u64) -> f64 {
    ln_gamma(y as f64 + 1.0)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Unnormalized log kernel of Efron's double Poisson.
fn dp_log_kernel(mu: f64, sigma: f64, y: u64) -> f64 {
    let base = -0.5 * sigma.ln() - mu / sigma;
    if y == 0 {
        return base;
    }
    let yf = y as f64;
    base - yf + yf * yf.ln() - ln_factorial(y) + (yf / sigma) * (1.0 + mu.ln() - yf.ln())
}

fn dp_truncation(mu: f64, sigma: f64) -> u64 {
    let bound = (mu + 20.0 * (mu * sigma.max(1.0)).sqrt()).ceil() as u64;
    bound.max(1000)
}

/// Sum exp(kernel) up to the truncation point, anchored at the mode to
/// stay in range. Terms past the mode below 1e-18 of the running sum are
/// dropped.
fn dp_log_norm_uncached(mu: f64, sigma: f64) -> f64 {
    let ymax = dp_truncation(mu, sigma);
    let mode = mu.round().max(0.0) as u64;
    let anchor = dp_log_kernel(mu, sigma, mode);
    let mut acc = 0.0f64;
    for y in 0..=ymax {
        let t = (dp_log_kernel(mu, sigma, y) - anchor).exp();
        acc += t;
        if y > mode && t < 1e-18 * acc {
            break;
        }
    }
    anchor + acc.ln()
}

thread_local! {
    static DP_NORM_CACHE: RefCell<HashMap<(u64, u64), f64>> = RefCell::new(HashMap::new());
}

fn dp_log_norm(mu: f64, sigma: f64) -> f64 {
    let key = (mu.to_bits(), sigma.to_bits());
    DP_NORM_CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        if cache.len() > 200_000 {
            cache.clear();
        }
        *cache.entry(key).or_insert_with(|| dp_log_norm_uncached(mu, sigma))
    })
}

fn dp_moments(mu: f64, sigma: f64) -> (f64, f64) {
    let log_norm = dp_log_norm(mu, sigma);
    let ymax = dp_truncation(mu, sigma);
    let mode = mu.round().max(0.0) as u64;
    let (mut p_acc, mut m1, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..=ymax {
        let p = (dp_log_kernel(mu, sigma, y) - log_norm).exp();
        let yf = y as f64;
        p_acc += p;
        m1 += yf * p;
        m2 += yf * yf * p;
        if y > mode && p < 1e-18 {
            break;
        }
    }
    let mean = m1 / p_acc;
    (mean, m2 / p_acc - mean * mean)
}
