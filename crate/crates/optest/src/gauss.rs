//! Exact Gaussian conjugate arithmetic for the admissions model.
//!
//! A student's latent skill `q` has prior `N(μ, σ²)`. Each feature is a noisy
//! reading `θ_k = q + ε_k` with `ε_k ~ N(0, σ_k²)`; the last feature
//! (index `K`) is the test score. Everything downstream — equilibrium
//! thresholds, estimation policies, fairness audits — reduces to four pieces
//! of conjugate arithmetic kept exact here:
//!
//! * posterior of `q` given any subset of features:
//!   mean `(μσ⁻² + Σ θ_k σ_k⁻²) / (σ⁻² + Σ σ_k⁻²)`, precision additive;
//! * predictive distribution of the unseen test score,
//!   `θ_K | θ_1..θ_{K−1} ~ N(posterior mean, σ_K² + posterior variance)`;
//! * truncated means `E[X | X < t]` / `E[X | X > t]` via the Mills-ratio
//!   closed form `m ∓ s·φ(α)/Φ(α)`, with an asymptotic-series branch for
//!   `|α| > 8` so solver brackets can probe deep tails without hitting 0/0;
//! * tail probabilities (`survival`) through `erfc`, accurate far beyond the
//!   double-precision underflow point of naïve `1 − Φ`.
//!
//! All operations are pure functions of their inputs and safe to call from
//! any number of threads.

use statrs::function::erf::erfc;
use thiserror::Error;

/// Reciprocal of √(2π), the standard normal density at 0.
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standardized distance `|α| = |t − m|/s` beyond which truncated means
/// switch from the direct Mills ratio to its asymptotic series. At `α = −8`
/// the direct form still has ~10 significant digits, and the series is
/// already good to ~1e-13, so the two branches agree well inside the 1e-9
/// residual tolerance used by the threshold solvers.
const TAIL_SWITCH: f64 = 8.0;

/// Errors from constructing model inputs or evaluating conjugate operations.
#[derive(Debug, Error, PartialEq)]
pub enum GaussError {
    #[error("variance must be strictly positive and finite, got {value}")]
    NonPositiveVariance { value: f64 },
    #[error("parameter {name} must be finite, got {value}")]
    NonFiniteParameter { name: &'static str, value: f64 },
    #[error("model needs at least one feature (the test score)")]
    NoFeatures,
    #[error("duplicate feature index {index} in observation set")]
    DuplicateFeatureIndex { index: usize },
    #[error("feature index {index} out of range 1..={k}")]
    FeatureIndexOutOfRange { index: usize, k: usize },
    #[error("profile has {got} non-test features, model expects {expected}")]
    ProfileLengthMismatch { expected: usize, got: usize },
    #[error("profile already carries a test score; prediction needs it absent")]
    TestScorePresent,
}

/// A mean/variance pair. Carrier for priors, posteriors, predictive score
/// distributions, and closed-form estimate distributions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    /// Construct, rejecting non-finite means and non-positive variances.
    pub fn new(mean: f64, variance: f64) -> Result<Self, GaussError> {
        if !mean.is_finite() {
            return Err(GaussError::NonFiniteParameter {
                name: "mean",
                value: mean,
            });
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(GaussError::NonPositiveVariance { value: variance });
        }
        Ok(Self { mean, variance })
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    /// `Pr[X ≤ t]`, tail-accurate via `erfc`.
    pub fn cdf(&self, t: f64) -> f64 {
        if t == f64::NEG_INFINITY {
            return 0.0;
        }
        if t == f64::INFINITY {
            return 1.0;
        }
        let z = (t - self.mean) / self.std_dev();
        0.5 * erfc(-z / SQRT_2)
    }
}

/// Population prior `(μ, σ²)` for latent skill plus per-feature noise
/// variances `σ_1²..σ_K²`. The last entry is the test-score noise.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    mu: f64,
    sigma2: f64,
    feature_vars: Vec<f64>,
}

impl ModelParams {
    /// Construct, validating that every variance is strictly positive and
    /// finite and that at least the test feature is present.
    pub fn new(mu: f64, sigma2: f64, feature_vars: Vec<f64>) -> Result<Self, GaussError> {
        if !mu.is_finite() {
            return Err(GaussError::NonFiniteParameter {
                name: "mu",
                value: mu,
            });
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(GaussError::NonPositiveVariance { value: sigma2 });
        }
        if feature_vars.is_empty() {
            return Err(GaussError::NoFeatures);
        }
        for &v in &feature_vars {
            if !(v.is_finite() && v > 0.0) {
                return Err(GaussError::NonPositiveVariance { value: v });
            }
        }
        Ok(Self {
            mu,
            sigma2,
            feature_vars,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn feature_vars(&self) -> &[f64] {
        &self.feature_vars
    }

    /// Number of features `K`; index `K` (1-based) is the test score.
    pub fn k(&self) -> usize {
        self.feature_vars.len()
    }

    /// Noise variance of the test score, `σ_K²`.
    pub fn test_var(&self) -> f64 {
        *self.feature_vars.last().expect("validated non-empty")
    }

    /// Precision of the test-score noise, `σ_K⁻²`.
    pub fn test_precision(&self) -> f64 {
        1.0 / self.test_var()
    }

    /// The prior as a distribution.
    pub fn prior(&self) -> Gaussian {
        Gaussian {
            mean: self.mu,
            variance: self.sigma2,
        }
    }
}

/// Fixed non-test features `θ_1..θ_{K−1}` and, optionally, a realized test
/// score `θ_K`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureProfile {
    pub others: Vec<f64>,
    pub test_score: Option<f64>,
}

impl FeatureProfile {
    pub fn new(others: Vec<f64>) -> Self {
        Self {
            others,
            test_score: None,
        }
    }

    pub fn with_score(others: Vec<f64>, score: f64) -> Self {
        Self {
            others,
            test_score: Some(score),
        }
    }

    /// Check this profile against a model: it must carry exactly `K−1`
    /// non-test features.
    pub fn check_against(&self, params: &ModelParams) -> Result<(), GaussError> {
        if self.others.len() != params.k() - 1 {
            return Err(GaussError::ProfileLengthMismatch {
                expected: params.k() - 1,
                got: self.others.len(),
            });
        }
        Ok(())
    }
}

/// Exact conjugate posterior of `q` given observed features.
///
/// Indices are 1-based to match the feature naming `θ_1..θ_K`; they must be
/// distinct and within `1..=K`. Observations are summed in index order, so
/// the result is bit-identical for any input ordering.
pub fn posterior(params: &ModelParams, observed: &[(usize, f64)]) -> Result<Gaussian, GaussError> {
    let k = params.k();
    let mut seen = vec![false; k + 1];
    let mut sorted: Vec<(usize, f64)> = Vec::with_capacity(observed.len());
    for &(idx, value) in observed {
        if idx < 1 || idx > k {
            return Err(GaussError::FeatureIndexOutOfRange { index: idx, k });
        }
        if seen[idx] {
            return Err(GaussError::DuplicateFeatureIndex { index: idx });
        }
        if !value.is_finite() {
            return Err(GaussError::NonFiniteParameter {
                name: "observed feature value",
                value,
            });
        }
        seen[idx] = true;
        sorted.push((idx, value));
    }
    sorted.sort_by_key(|&(idx, _)| idx);

    let mut precision = 1.0 / params.sigma2;
    let mut weighted = params.mu / params.sigma2;
    for (idx, value) in sorted {
        let p = 1.0 / params.feature_vars[idx - 1];
        precision += p;
        weighted += value * p;
    }
    Gaussian::new(weighted / precision, 1.0 / precision)
}

/// Posterior of `q` given only the non-test features of a profile.
pub fn posterior_without_score(
    params: &ModelParams,
    profile: &FeatureProfile,
) -> Result<Gaussian, GaussError> {
    profile.check_against(params)?;
    let obs: Vec<(usize, f64)> = profile
        .others
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + 1, v))
        .collect();
    posterior(params, &obs)
}

/// Posterior of `q` given the non-test features plus a test score `θ_K`.
pub fn posterior_with_score(
    params: &ModelParams,
    profile: &FeatureProfile,
    score: f64,
) -> Result<Gaussian, GaussError> {
    profile.check_against(params)?;
    let mut obs: Vec<(usize, f64)> = profile
        .others
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + 1, v))
        .collect();
    obs.push((params.k(), score));
    posterior(params, &obs)
}

/// Predictive distribution of the unseen test score:
/// `θ_K | θ_1..θ_{K−1} ~ N(m̂, σ_K² + σ̂²)` where `(m̂, σ̂²)` is the
/// no-score posterior of `q`.
pub fn predictive_test_score(
    params: &ModelParams,
    profile: &FeatureProfile,
) -> Result<Gaussian, GaussError> {
    if profile.test_score.is_some() {
        return Err(GaussError::TestScorePresent);
    }
    let post = posterior_without_score(params, profile)?;
    Gaussian::new(post.mean, params.test_var() + post.variance)
}

/// Standard normal density.
fn phi(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Lower-tail hazard `φ(α)/Φ(α)` of the standard normal.
///
/// For `α < −8` the direct ratio is replaced by the reciprocal of the
/// asymptotic Mills series `Φ(α)/φ(α) ≈ (1/−α)·Σ (−1)^j (2j−1)!!/α^{2j}`,
/// summed until the terms stop shrinking; this avoids 0/0 once `Φ`
/// underflows and stays within ~1e-13 relative error at the switch point.
fn hazard_lower(alpha: f64) -> f64 {
    debug_assert!(alpha.is_finite());
    if alpha >= -TAIL_SWITCH {
        let c = Gaussian {
            mean: 0.0,
            variance: 1.0,
        }
        .cdf(alpha);
        phi(alpha) / c
    } else {
        // Asymptotic series for the Mills ratio, optimally truncated.
        let inv_a2 = 1.0 / (alpha * alpha);
        let mut series = 1.0;
        let mut term = 1.0;
        let mut j = 0.0_f64;
        loop {
            let next = -term * (2.0 * j + 1.0) * inv_a2;
            if next.abs() >= term.abs() || next.abs() < 1e-17 {
                series += if next.abs() < term.abs() { next } else { 0.0 };
                break;
            }
            series += next;
            term = next;
            j += 1.0;
        }
        -alpha / series
    }
}

/// `E[X | X < t]` for `X ~ g`: the Mills-ratio closed form `m − s·φ(α)/Φ(α)`
/// with `α = (t − m)/s`.
///
/// Total over the extended reals: `t = +∞` returns the untruncated mean and
/// `t = −∞` returns `−∞` (the degenerate limits). For finite `t` the result
/// is strictly below both `t` and the mean.
pub fn truncated_mean_below(g: &Gaussian, t: f64) -> f64 {
    if t == f64::INFINITY {
        return g.mean;
    }
    if t == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s = g.std_dev();
    let alpha = (t - g.mean) / s;
    g.mean - s * hazard_lower(alpha)
}

/// `E[X | X > t]` for `X ~ g`; mirror image of [`truncated_mean_below`].
pub fn truncated_mean_above(g: &Gaussian, t: f64) -> f64 {
    if t == f64::NEG_INFINITY {
        return g.mean;
    }
    if t == f64::INFINITY {
        return f64::INFINITY;
    }
    let s = g.std_dev();
    let alpha = (t - g.mean) / s;
    // Upper-tail hazard φ(α)/(1−Φ(α)) = lower-tail hazard at −α.
    g.mean + s * hazard_lower(-alpha)
}

/// `Pr[X ≥ t]` for `X ~ g`, tail-accurate via `erfc`.
pub fn survival(g: &Gaussian, t: f64) -> f64 {
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    let z = (t - g.mean) / g.std_dev();
    0.5 * erfc(z / SQRT_2)
}
