//! Estimation policies: how the school turns an application into a skill
//! estimate, including what it does when a score is missing.
//!
//! A policy maps an [`InfoSet`] — the features, report indicator, and
//! (when the setting allows) access indicator the school actually sees — to
//! an estimate `q̃`. Reported scores always enter the full Bayesian
//! posterior except under the test-blank policy, which discards them; the
//! policies differ in the missing-score branch:
//!
//! * `bo_known_z` pools scoreless students using the access indicator;
//! * `bo_unknown_z` pools them with the no-access population at a carried
//!   equilibrium threshold;
//! * `resampling` draws a synthetic score from the student's own predictive
//!   distribution and proceeds as if it were reported;
//! * `test_blank` ignores scores for everyone;
//! * `equalizing` draws the synthetic score from a fixed target
//!   distribution instead of the student's own predictive.
//!
//! The module also carries the closed-form estimate distributions that make
//! analytic fairness audits exact: integrating the posterior mean over
//! `θ_K | θ's` (or over `θ_K | q`) keeps it Gaussian because the posterior
//! mean is linear in `θ_K`.

use crate::equilibrium::{
    withhold_estimate_if_take, withhold_estimate_unknown_access, EquilibriumError,
    EquilibriumSolution, ThresholdKind,
};
use crate::gauss::{
    posterior_with_score, posterior_without_score, predictive_test_score, FeatureProfile, Gaussian,
    GaussError, ModelParams,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five estimation policies, as a payload-free discriminant.
///
/// Used where only the policy's identity matters (configuration, dynamics);
/// policies that need runtime data (an equilibrium threshold, an equalizing
/// target) carry it in [`PolicySpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Bayesian-optimal estimation when the school observes test access.
    BoKnownZ,
    /// Bayesian-optimal estimation when access is unobserved; non-reporters
    /// pool with the no-access population.
    BoUnknownZ,
    /// Missing scores are re-drawn from the student's predictive score
    /// distribution and then treated as reported.
    Resampling,
    /// The test score is ignored for everyone.
    TestBlank,
    /// Missing scores are replaced by draws from a fixed target
    /// distribution.
    Equalizing,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PolicyKind::BoKnownZ => "bo_known_z",
            PolicyKind::BoUnknownZ => "bo_unknown_z",
            PolicyKind::Resampling => "resampling",
            PolicyKind::TestBlank => "test_blank",
            PolicyKind::Equalizing => "equalizing",
        };
        f.write_str(name)
    }
}

/// A policy together with the runtime data it estimates from.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    BoKnownZ,
    /// Carries the equilibrium whose threshold defines the non-reporter
    /// pool.
    BoUnknownZ { equilibrium: EquilibriumSolution },
    Resampling,
    TestBlank,
    /// Carries the distribution synthetic scores are drawn from.
    Equalizing { target: Gaussian },
}

impl PolicySpec {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicySpec::BoKnownZ => PolicyKind::BoKnownZ,
            PolicySpec::BoUnknownZ { .. } => PolicyKind::BoUnknownZ,
            PolicySpec::Resampling => PolicyKind::Resampling,
            PolicySpec::TestBlank => PolicyKind::TestBlank,
            PolicySpec::Equalizing { .. } => PolicyKind::Equalizing,
        }
    }
}

/// Errors from info-set construction or estimation.
#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("profile must not carry a test score; scores enter through the info set")]
    ProfileCarriesScore,
    #[error("a reported score must be finite, got {value}")]
    NonFiniteScore { value: f64 },
    #[error("a student without test access cannot have reported a score")]
    ReportWithoutAccess,
    #[error("{policy} estimation requires the access indicator in the info set")]
    AccessRequired { policy: PolicyKind },
    #[error("{policy} estimation must not observe the access indicator")]
    AccessForbidden { policy: PolicyKind },
    #[error("the carried {kind} equilibrium has no canonical threshold to pool at")]
    MissingCanonicalThreshold { kind: ThresholdKind },
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

/// What the school sees about one student. Fields are private so the
/// invariants hold by construction: a score is present exactly when the
/// student reported, a non-access student never reports, and the profile
/// never smuggles in a test score (counterfactual scores stay hidden from
/// policies).
#[derive(Debug, Clone, PartialEq)]
pub struct InfoSet {
    profile: FeatureProfile,
    reported: bool,
    access: Option<bool>,
    score: Option<f64>,
}

impl InfoSet {
    /// Info set of a student who reported `score`. `access` is present only
    /// in known-access settings, and cannot be `Some(false)`: reporting
    /// requires access.
    pub fn reported(
        profile: FeatureProfile,
        score: f64,
        access: Option<bool>,
    ) -> Result<Self, PolicyError> {
        if profile.test_score.is_some() {
            return Err(PolicyError::ProfileCarriesScore);
        }
        if !score.is_finite() {
            return Err(PolicyError::NonFiniteScore { value: score });
        }
        if access == Some(false) {
            return Err(PolicyError::ReportWithoutAccess);
        }
        Ok(Self {
            profile,
            reported: true,
            access,
            score: Some(score),
        })
    }

    /// Info set of a student who did not report a score.
    pub fn withheld(profile: FeatureProfile, access: Option<bool>) -> Result<Self, PolicyError> {
        if profile.test_score.is_some() {
            return Err(PolicyError::ProfileCarriesScore);
        }
        Ok(Self {
            profile,
            reported: false,
            access,
            score: None,
        })
    }

    pub fn profile(&self) -> &FeatureProfile {
        &self.profile
    }

    pub fn is_reported(&self) -> bool {
        self.reported
    }

    pub fn access(&self) -> Option<bool> {
        self.access
    }

    pub fn score(&self) -> Option<f64> {
        self.score
    }
}

fn require_access(info: &InfoSet, policy: PolicyKind) -> Result<bool, PolicyError> {
    info.access
        .ok_or(PolicyError::AccessRequired { policy })
}

fn forbid_access(info: &InfoSet, policy: PolicyKind) -> Result<(), PolicyError> {
    if info.access.is_some() {
        return Err(PolicyError::AccessForbidden { policy });
    }
    Ok(())
}

/// Estimate skill from an info set under a policy.
///
/// Randomized branches (resampling without access, equalizing without a
/// report) consume from the caller's stream; deterministic branches never
/// touch it, so identical (seed, stream, call order) gives identical
/// estimates.
///
/// Off-equilibrium branch: a known-access student who withholds despite the
/// full-reporting equilibrium is pooled as if the reporting threshold sat
/// at `+∞`; the truncated score is then the predictive mean and the
/// estimate collapses exactly to the no-score posterior mean.
pub fn estimate<R: Rng>(
    policy: &PolicySpec,
    params: &ModelParams,
    info: &InfoSet,
    rng: &mut R,
) -> Result<f64, PolicyError> {
    let full_posterior_mean = |score: f64| -> Result<f64, PolicyError> {
        Ok(posterior_with_score(params, &info.profile, score)?.mean)
    };
    let no_score_mean = || -> Result<f64, PolicyError> {
        Ok(posterior_without_score(params, &info.profile)?.mean)
    };

    match policy {
        PolicySpec::TestBlank => no_score_mean(),
        PolicySpec::BoKnownZ => {
            let has_access = require_access(info, PolicyKind::BoKnownZ)?;
            match info.score {
                Some(score) => full_posterior_mean(score),
                // Z = 0 is the ordinary no-score posterior; Z = 1 without a
                // report is off-equilibrium and pools at the same value.
                None => {
                    let _ = has_access;
                    no_score_mean()
                }
            }
        }
        PolicySpec::Resampling => {
            let has_access = require_access(info, PolicyKind::Resampling)?;
            match (info.score, has_access) {
                (Some(score), _) => full_posterior_mean(score),
                (None, false) => {
                    let predictive = predictive_test_score(params, &info.profile)?;
                    let draw = Normal::new(predictive.mean, predictive.std_dev())
                        .expect("predictive std dev is positive")
                        .sample(rng);
                    full_posterior_mean(draw)
                }
                // Off-equilibrium withholding with access: as bo_known_z.
                (None, true) => no_score_mean(),
            }
        }
        PolicySpec::BoUnknownZ { equilibrium } => {
            forbid_access(info, PolicyKind::BoUnknownZ)?;
            match info.score {
                Some(score) => full_posterior_mean(score),
                None => match equilibrium.kind {
                    ThresholdKind::ScoreThreshold => {
                        let threshold = equilibrium.canonical.ok_or(
                            PolicyError::MissingCanonicalThreshold {
                                kind: equilibrium.kind,
                            },
                        )?;
                        Ok(withhold_estimate_unknown_access(
                            params,
                            &info.profile,
                            equilibrium.access_fraction,
                            threshold,
                        )?)
                    }
                    ThresholdKind::SkillThreshold => {
                        let cutoff = equilibrium.canonical.ok_or(
                            PolicyError::MissingCanonicalThreshold {
                                kind: equilibrium.kind,
                            },
                        )?;
                        Ok(withhold_estimate_if_take(
                            params,
                            &info.profile,
                            equilibrium.access_fraction,
                            cutoff,
                        )?)
                    }
                    // Full reporting: non-reporters are exactly the
                    // no-access students. No reporting: the pool is the
                    // whole population, whose mean skill given the features
                    // is the same no-score posterior mean.
                    ThresholdKind::FullReporting | ThresholdKind::NoReporting => no_score_mean(),
                },
            }
        }
        PolicySpec::Equalizing { target } => {
            forbid_access(info, PolicyKind::Equalizing)?;
            match info.score {
                Some(score) => full_posterior_mean(score),
                None => {
                    let draw = Normal::new(target.mean, target.std_dev())
                        .expect("target std dev is positive")
                        .sample(rng);
                    full_posterior_mean(draw)
                }
            }
        }
    }
}

/// Distribution of the known-access Bayesian estimate for a with-access
/// student with this profile, over the randomness of their own score.
///
/// The estimate is linear in `θ_K` with slope `σ_K⁻²/D`, and
/// `θ_K | θ's ~ N(m̂, σ_K² + σ̂²)`, so the estimate is Gaussian with mean
/// `m̂` (the no-score posterior mean — reporting is mean-preserving) and
/// variance `σ_K⁻⁴·(σ_K² + σ̂²)/D²`.
pub fn with_access_estimate_distribution(
    params: &ModelParams,
    profile: &FeatureProfile,
) -> Result<Gaussian, PolicyError> {
    let no_score = posterior_without_score(params, profile)?;
    let full_variance = posterior_with_score(params, profile, 0.0)?.variance;
    let test_precision = params.test_precision();
    let variance = test_precision
        * test_precision
        * (params.test_var() + no_score.variance)
        * full_variance
        * full_variance;
    Ok(Gaussian {
        mean: no_score.mean,
        variance,
    })
}

/// Distribution of the resampling estimate for a scoreless student with
/// this profile: the synthetic score is drawn from the same predictive
/// distribution a real score would have followed, so the estimate
/// distribution is identical to [`with_access_estimate_distribution`] —
/// parameter-for-parameter, not merely approximately.
pub fn resampling_estimate_distribution(
    params: &ModelParams,
    profile: &FeatureProfile,
) -> Result<Gaussian, PolicyError> {
    with_access_estimate_distribution(params, profile)
}

/// Distribution of the known-access Bayesian estimate for a student of
/// fixed latent skill `q`, over the score noise `θ_K | q ~ N(q, σ_K²)`.
///
/// Mean `(c_lin + q·σ_K⁻²)/D`, linear in `q` with slope `σ_K⁻²/D`;
/// variance `σ_K⁻²/D²` — the image of the score-noise variance under the
/// squared estimate slope. (A Monte Carlo arbiter confirms this variance;
/// see the distribution tests.)
pub fn latent_estimate_distribution(
    params: &ModelParams,
    profile: &FeatureProfile,
    q: f64,
) -> Result<Gaussian, PolicyError> {
    if !q.is_finite() {
        return Err(PolicyError::NonFiniteScore { value: q });
    }
    let mean = posterior_with_score(params, profile, q)?.mean;
    let full_variance = posterior_with_score(params, profile, 0.0)?.variance;
    let variance = params.test_precision() * full_variance * full_variance;
    Ok(Gaussian { mean, variance })
}

/// Slope of the Bayesian estimate in a reported score: `σ_K⁻²/D > 0`.
pub fn estimate_score_slope(
    params: &ModelParams,
    profile: &FeatureProfile,
) -> Result<f64, PolicyError> {
    let full_variance = posterior_with_score(params, profile, 0.0)?.variance;
    Ok(params.test_precision() * full_variance)
}
