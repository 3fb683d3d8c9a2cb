//! Gamma-Poisson (negative binomial) distribution and its discounted
//! conjugate update.
//!
//! A count `x` is Poisson with a latent rate `λ ~ Gamma(shape = α, rate = β)`.
//! Marginally
//!
//! ```text
//! p(x | α, β) = Γ(x + α) / (x! Γ(α)) · (β / (1 + β))^α · (1 / (1 + β))^x
//! ```
//!
//! which is the negative binomial with `r = α` and success probability
//! `ρ = β / (1 + β) = sigmoid(ln β)`.
//!
//! Posterior state is kept in `(α, β)` form because the online update is
//! additive in both: α accumulates interaction counts and β exposures.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::special::{ln_gamma, log_sigmoid, sigmoid};

/// Shape/rate pair of a Gamma prior or posterior over a Poisson rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPoissonParams {
    alpha: f64,
    beta: f64,
}

impl GammaPoissonParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::domain(format!("alpha must be positive and finite, got {alpha}")));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::domain(format!("beta must be positive and finite, got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    /// Builds parameters from network outputs `(ln α, ζ)` with `β = e^ζ`.
    pub fn from_logits(log_alpha: f64, zeta: f64) -> Result<Self> {
        Self::new(log_alpha.exp(), zeta.exp())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `ζ = ln β`, the logit of the negative-binomial success probability.
    pub fn zeta(&self) -> f64 {
        self.beta.ln()
    }

    /// Posterior mean of the Poisson rate, `α / β`.
    pub fn mean(&self) -> f64 {
        self.alpha / self.beta
    }

    /// Variance of a single count: `α/β + α/β²`.
    pub fn count_variance(&self) -> f64 {
        self.alpha / self.beta + self.alpha / (self.beta * self.beta)
    }
}

/// Negative-binomial view `(r, ρ)` of a [`GammaPoissonParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegBinomialView {
    pub r: f64,
    pub rho: f64,
}

impl NegBinomialView {
    /// Recovers `(α, β)` with `β = ρ / (1 - ρ)`.
    pub fn to_gamma_poisson(&self) -> Result<GammaPoissonParams> {
        GammaPoissonParams::new(self.r, self.rho / (1.0 - self.rho))
    }

    /// Negative-binomial log-pmf evaluated directly in `(r, ρ)`.
    pub fn log_pmf(&self, x: u64) -> f64 {
        let xf = x as f64;
        ln_gamma(xf + self.r) - ln_gamma(xf + 1.0) - ln_gamma(self.r)
            + self.r * self.rho.ln()
            + xf * (1.0 - self.rho).ln()
    }
}

/// Log-probability of count `x`.
///
/// `ln(β/(1+β))` and `ln(1/(1+β))` are evaluated as log-sigmoids of `±ln β`
/// so extreme rates do not overflow.
pub fn log_pmf(x: u64, p: &GammaPoissonParams) -> f64 {
    let xf = x as f64;
    let zeta = p.zeta();
    let mut lp = ln_gamma(xf + p.alpha) - ln_gamma(xf + 1.0) - ln_gamma(p.alpha)
        + p.alpha * log_sigmoid(zeta);
    if x > 0 {
        lp += xf * log_sigmoid(-zeta);
    }
    lp
}

pub fn to_negative_binomial(p: &GammaPoissonParams) -> NegBinomialView {
    NegBinomialView {
        r: p.alpha,
        rho: sigmoid(p.zeta()),
    }
}

/// Draws a latent Poisson rate `λ ~ Gamma(α, β)`.
pub fn sample_rate<R: Rng + ?Sized>(p: &GammaPoissonParams, rng: &mut R) -> f64 {
    // Marsaglia-Tsang, with the u^(1/α) boost for α < 1.
    let gamma = Gamma::new(p.alpha, 1.0 / p.beta).expect("validated shape and scale");
    let lambda: f64 = gamma.sample(rng);
    // The boost can underflow to zero for tiny shapes; keep the draw in the support.
    lambda.max(f64::MIN_POSITIVE)
}

/// Draws a count from the Gamma-Poisson mixture: `λ ~ Gamma`, then `Poisson(λ)`.
pub fn sample_count<R: Rng + ?Sized>(p: &GammaPoissonParams, rng: &mut R) -> u64 {
    let lambda = sample_rate(p, rng);
    sample_poisson(lambda, rng)
}

fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    const NORMAL_APPROX_ABOVE: f64 = 1e12;
    if lambda < 1e-300 {
        return 0;
    }
    if lambda > NORMAL_APPROX_ABOVE {
        let z: f64 = StandardNormal.sample(rng);
        return (lambda + lambda.sqrt() * z).round().max(0.0) as u64;
    }
    let poisson = Poisson::new(lambda).expect("finite positive rate");
    poisson.sample(rng) as u64
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::domain(format!("gamma must lie in [0, 1], got {gamma}")))
    }
}

/// Discounted conjugate update:
///
/// ```text
/// α' = Σx + γ α₀ + (1 - γ) α
/// β' = n  + γ β₀ + (1 - γ) β
/// ```
///
/// With `γ = 0` this is the standard conjugate update; with `γ = 1` the state
/// is reset to the prior before absorbing the new observations.
pub fn posterior_update(
    current: &GammaPoissonParams,
    prior: &GammaPoissonParams,
    sum_counts: u64,
    n_obs: u64,
    gamma: f64,
) -> Result<GammaPoissonParams> {
    check_gamma(gamma)?;
    if sum_counts > 0 && n_obs == 0 {
        log::debug!("posterior update with {sum_counts} interactions but zero exposures");
    }
    let keep = 1.0 - gamma;
    GammaPoissonParams::new(
        sum_counts as f64 + gamma * prior.alpha + keep * current.alpha,
        n_obs as f64 + gamma * prior.beta + keep * current.beta,
    )
}

/// `k` observation-free updates in closed form: both parameters move
/// geometrically toward the prior with ratio `1 - γ`. `k = 0` is the identity.
pub fn lazy_decay(
    current: &GammaPoissonParams,
    prior: &GammaPoissonParams,
    gamma: f64,
    k: u64,
) -> Result<GammaPoissonParams> {
    check_gamma(gamma)?;
    if k == 0 {
        return Ok(*current);
    }
    let remain = if k <= i32::MAX as u64 {
        (1.0 - gamma).powi(k as i32)
    } else {
        (1.0 - gamma).powf(k as f64)
    };
    GammaPoissonParams::new(
        prior.alpha + remain * (current.alpha - prior.alpha),
        prior.beta + remain * (current.beta - prior.beta),
    )
}
