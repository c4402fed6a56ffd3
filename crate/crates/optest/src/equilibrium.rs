//! Threshold equilibria of the score-reporting game.
//!
//! Students observe their own test score and decide whether to report it;
//! the school estimates skill from whatever arrives. In every regime the
//! equilibrium has threshold form: report exactly when the score (or latent
//! skill) clears a cutoff. This module solves for those cutoffs, verifies
//! the defining indifference conditions, exhibits the instability that rules
//! out partial reporting when access is observed, and iterates explicit
//! best-response dynamics.
//!
//! The central object is the non-reporter pool. With access fraction `C` and
//! score threshold `θ̄`, a non-reporter is either a no-access student
//! (probability mass `1−C`) or a with-access student whose score fell below
//! `θ̄` (mass `C·A(θ̄)` with `A(θ̄) = Pr[θ_K < θ̄]` under the predictive
//! score distribution). The pooled estimate is the mass-weighted mixture
//!
//! ```text
//! W(θ̄) = [(1−C)·m̂ + C·A(θ̄)·T(θ̄)] / [(1−C) + C·A(θ̄)]
//! ```
//!
//! where `m̂` is the no-score posterior mean and `T(θ̄)` the posterior mean
//! evaluated at the truncated score `E[θ_K | θ_K < θ̄]` — the truncated
//! integral collapses to a point evaluation because the posterior mean is
//! linear in `θ_K`. An equilibrium threshold is a root of
//! `R(θ̄) = reporting estimate at θ̄ − W(θ̄)`.

use crate::gauss::{
    posterior_with_score, posterior_without_score, predictive_test_score, survival,
    truncated_mean_above, truncated_mean_below, FeatureProfile, Gaussian, GaussError, ModelParams,
};
use crate::policy::PolicyKind;
use thiserror::Error;

/// Number of points in the root-scan grid. Odd so the grid includes its
/// center (the predictive mean).
const GRID_POINTS: usize = 4001;
/// Initial scan half-width in units of the relevant scale (predictive
/// standard deviation for the score game; slope-compensated posterior
/// standard deviation for the skill game).
const GRID_HALF_SPAN_SCALE: f64 = 8.0;
/// Number of doublings of the scan span attempted when no sign change is
/// found before giving up.
const MAX_BRACKET_EXPANSIONS: u32 = 4;
/// Bisection iteration cap; 200 halvings exhaust an f64 bracket, so every
/// bisection terminates at the bit level.
const BISECT_MAX_ITER: u32 = 200;
/// Reporting fraction within this distance of 0 or 1 counts as a boundary
/// (no reporting / full reporting) for the dynamics.
const LAMBDA_BOUNDARY_TOL: f64 = 1e-12;

/// Errors from threshold solving and dynamics.
#[derive(Debug, Error, PartialEq)]
pub enum EquilibriumError {
    #[error("access fraction must lie strictly inside (0,1), got {value}")]
    InvalidAccessFraction { value: f64 },
    #[error("threshold must not be NaN")]
    ThresholdNaN,
    #[error("solver tolerance must be strictly positive and finite, got {value}")]
    InvalidTolerance { value: f64 },
    #[error(
        "no sign change of the indifference residual on [{lo}, {hi}] after {expansions} bracket expansions; threshold existence is violated numerically"
    )]
    NoSignChange { lo: f64, hi: f64, expansions: u32 },
    #[error("root {root} has residual {residual}, beyond tolerance {tol}")]
    ResidualExceedsTolerance { root: f64, residual: f64, tol: f64 },
    #[error("best-response dynamics are defined for bo_known_z, bo_unknown_z, and equalizing, not {policy}")]
    UnsupportedPolicy { policy: PolicyKind },
    #[error(transparent)]
    Gauss(#[from] GaussError),
}

/// What the school can require of students who take the test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementPolicy {
    /// Taking and reporting are both free choices: `Z ≥ Y ≥ X`.
    ReportOptional,
    /// Anyone who takes the test must report it: `Y = X`.
    ReportIfTake,
    /// Anyone with access must take and report: `Z = Y = X`. Only valid
    /// when the school observes access.
    ReportIfAccess,
}

/// Structural form of an equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdKind {
    /// Report exactly when the test score clears a cutoff.
    ScoreThreshold,
    /// Take (and report) exactly when latent skill clears a cutoff.
    SkillThreshold,
    /// Every student with access reports.
    FullReporting,
    /// No student reports.
    NoReporting,
}

impl std::fmt::Display for ThresholdKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ThresholdKind::ScoreThreshold => "score_threshold",
            ThresholdKind::SkillThreshold => "skill_threshold",
            ThresholdKind::FullReporting => "full_reporting",
            ThresholdKind::NoReporting => "no_reporting",
        };
        f.write_str(name)
    }
}

/// A solved equilibrium: every fixed point found on the scan grid, with the
/// smallest designated canonical (threshold existence is proved, uniqueness
/// is not, so multiplicity is reported rather than assumed away).
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub kind: ThresholdKind,
    /// All roots found, sorted ascending. Empty for the degenerate kinds.
    pub roots: Vec<f64>,
    /// Smallest root, when any exist.
    pub canonical: Option<f64>,
    /// Indifference residual at each root, same order as `roots`.
    pub residuals: Vec<f64>,
    pub access_fraction: f64,
    pub profile: FeatureProfile,
}

/// A profitable deviation from a candidate score threshold: a score whose
/// reporting estimate weakly beats the pooled withholding estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationWitness {
    pub score: f64,
    pub report_estimate: f64,
    pub pooled_estimate: f64,
}

/// One step of best-response dynamics. All fields are finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsStep {
    /// Fraction of with-access students reporting at the current threshold.
    pub reporting_fraction: f64,
    /// Current score threshold.
    pub threshold: f64,
    /// Estimate assigned to non-reporters at the current threshold.
    pub withhold_estimate: f64,
}

/// Where best-response dynamics ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsOutcome {
    /// Converged to a finite threshold (successive change ≤ tolerance).
    Interior,
    /// Reporting unraveled: the reporting fraction reached 0.
    NoReporting,
    /// Withholding unraveled: the reporting fraction reached 1.
    FullReporting,
    /// Iteration budget exhausted without convergence.
    NonConvergent,
}

impl std::fmt::Display for DynamicsOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            DynamicsOutcome::Interior => "interior",
            DynamicsOutcome::NoReporting => "no_reporting",
            DynamicsOutcome::FullReporting => "full_reporting",
            DynamicsOutcome::NonConvergent => "non_convergent",
        };
        f.write_str(name)
    }
}

/// Trajectory of best-response dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTrace {
    pub iterations: Vec<DynamicsStep>,
    pub converged_to: DynamicsOutcome,
}

impl DynamicsTrace {
    /// Threshold at the last recorded step, if any step was recorded.
    pub fn final_threshold(&self) -> Option<f64> {
        self.iterations.last().map(|s| s.threshold)
    }
}

fn check_access_fraction(c: f64) -> Result<(), EquilibriumError> {
    // The boundary values make the pool weights 0/0; they are rejected, and
    // the limits are covered by the C→0 / C→1 behavior of interior values.
    if !(c.is_finite() && c > 0.0 && c < 1.0) {
        return Err(EquilibriumError::InvalidAccessFraction { value: c });
    }
    Ok(())
}

fn check_tolerance(tol: f64) -> Result<(), EquilibriumError> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(EquilibriumError::InvalidTolerance { value: tol });
    }
    Ok(())
}

/// Validated context for the score-reporting game: everything the residual
/// needs, so the root-finding closures are infallible.
struct ScoreGame {
    params: ModelParams,
    profile: FeatureProfile,
    predictive: Gaussian,
    no_score_mean: f64,
    access_fraction: f64,
}

impl ScoreGame {
    fn new(
        params: &ModelParams,
        profile: &FeatureProfile,
        access_fraction: f64,
    ) -> Result<Self, EquilibriumError> {
        check_access_fraction(access_fraction)?;
        let predictive = predictive_test_score(params, profile)?;
        let no_score_mean = posterior_without_score(params, profile)?.mean;
        Ok(Self {
            params: params.clone(),
            profile: profile.clone(),
            predictive,
            no_score_mean,
            access_fraction,
        })
    }

    /// Estimate earned by reporting a score: the full posterior mean.
    fn report_estimate(&self, score: f64) -> f64 {
        posterior_with_score(&self.params, &self.profile, score)
            .expect("inputs validated at construction")
            .mean
    }

    /// Pooled estimate `W(θ̄)` for non-reporters at threshold `θ̄`. Total
    /// over the extended reals: at `θ̄ = −∞` the pool is purely no-access
    /// and the value is the no-score posterior mean.
    fn withhold_estimate(&self, threshold: f64) -> f64 {
        let below = self.predictive.cdf(threshold);
        let w_withhold = self.access_fraction * below;
        if w_withhold == 0.0 {
            // No with-access mass below the threshold; guards the
            // 0 · (−∞) case at θ̄ → −∞ as well.
            return self.no_score_mean;
        }
        let w_no_access = 1.0 - self.access_fraction;
        let truncated_score = truncated_mean_below(&self.predictive, threshold);
        let truncated_estimate = self.report_estimate(truncated_score);
        (w_no_access * self.no_score_mean + w_withhold * truncated_estimate)
            / (w_no_access + w_withhold)
    }

    /// Indifference residual `R(θ̄)`; a root is an equilibrium threshold.
    fn residual(&self, threshold: f64) -> f64 {
        self.report_estimate(threshold) - self.withhold_estimate(threshold)
    }
}

/// Validated context for the take-the-test game (report-if-take regime):
/// the cutoff is on latent skill and the truncation acts on the skill
/// posterior itself.
struct SkillGame {
    params: ModelParams,
    profile: FeatureProfile,
    posterior_no_score: Gaussian,
    access_fraction: f64,
}

impl SkillGame {
    fn new(
        params: &ModelParams,
        profile: &FeatureProfile,
        access_fraction: f64,
    ) -> Result<Self, EquilibriumError> {
        check_access_fraction(access_fraction)?;
        let posterior_no_score = posterior_without_score(params, profile)?;
        Ok(Self {
            params: params.clone(),
            profile: profile.clone(),
            posterior_no_score,
            access_fraction,
        })
    }

    /// Estimate a student of skill `q̄` expects from taking and reporting:
    /// the posterior mean at an expected score equal to their skill.
    fn taking_estimate(&self, skill: f64) -> f64 {
        posterior_with_score(&self.params, &self.profile, skill)
            .expect("inputs validated at construction")
            .mean
    }

    /// Pooled estimate for students without a score: no-access students mix
    /// with with-access students whose skill fell below the taking cutoff.
    fn withhold_estimate(&self, skill_cutoff: f64) -> f64 {
        let below = self.posterior_no_score.cdf(skill_cutoff);
        let w_withhold = self.access_fraction * below;
        if w_withhold == 0.0 {
            return self.posterior_no_score.mean;
        }
        let w_no_access = 1.0 - self.access_fraction;
        let truncated_skill = truncated_mean_below(&self.posterior_no_score, skill_cutoff);
        (w_no_access * self.posterior_no_score.mean + w_withhold * truncated_skill)
            / (w_no_access + w_withhold)
    }

    fn residual(&self, skill_cutoff: f64) -> f64 {
        self.taking_estimate(skill_cutoff) - self.withhold_estimate(skill_cutoff)
    }
}

/// Estimate the school assigns to a non-reporter when it cannot see who has
/// test access, at score threshold `θ̄` and access fraction `C`.
///
/// Mixture of the no-score posterior mean (no-access students, weight
/// `(1−C)`) and the below-threshold estimate (with-access withholders,
/// weight `C·Pr[θ_K < θ̄]`), normalized by total non-reporting mass. Total
/// over the extended reals; NaN thresholds are rejected.
pub fn withhold_estimate_unknown_access(
    params: &ModelParams,
    profile: &FeatureProfile,
    access_fraction: f64,
    threshold: f64,
) -> Result<f64, EquilibriumError> {
    if threshold.is_nan() {
        return Err(EquilibriumError::ThresholdNaN);
    }
    let game = ScoreGame::new(params, profile, access_fraction)?;
    Ok(game.withhold_estimate(threshold))
}

/// Estimate the school assigns to scoreless students in the report-if-take
/// regime at skill cutoff `q̄`: as [`withhold_estimate_unknown_access`], but
/// the with-access withholders are those with `q < q̄` and the truncation
/// acts on the skill posterior itself.
pub fn withhold_estimate_if_take(
    params: &ModelParams,
    profile: &FeatureProfile,
    access_fraction: f64,
    skill_cutoff: f64,
) -> Result<f64, EquilibriumError> {
    if skill_cutoff.is_nan() {
        return Err(EquilibriumError::ThresholdNaN);
    }
    let game = SkillGame::new(params, profile, access_fraction)?;
    Ok(game.withhold_estimate(skill_cutoff))
}

/// Scan `f` on a uniform grid and bisect every sign-change bracket.
///
/// The grid spans `center ± half_span`, doubling the span up to
/// [`MAX_BRACKET_EXPANSIONS`] times if no sign change (or exact zero) is
/// found. Returns roots in ascending order. Fully deterministic: fixed grid,
/// fixed iteration order, bit-level bisection termination.
fn scan_and_bisect(
    f: impl Fn(f64) -> f64,
    center: f64,
    half_span: f64,
) -> Result<Vec<f64>, EquilibriumError> {
    for expansion in 0..=MAX_BRACKET_EXPANSIONS {
        let span = half_span * f64::powi(2.0, expansion as i32);
        let lo = center - span;
        let hi = center + span;
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let xs: Vec<f64> = (0..GRID_POINTS).map(|i| lo + step * i as f64).collect();
        let vs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();

        let mut roots = Vec::new();
        for i in 0..GRID_POINTS {
            if vs[i] == 0.0 {
                roots.push(xs[i]);
            }
        }
        for i in 0..GRID_POINTS - 1 {
            if vs[i] * vs[i + 1] < 0.0 {
                roots.push(bisect(&f, xs[i], vs[i], xs[i + 1]));
            }
        }
        if !roots.is_empty() {
            roots.sort_by(f64::total_cmp);
            roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + a.abs()));
            return Ok(roots);
        }
        if expansion == MAX_BRACKET_EXPANSIONS {
            return Err(EquilibriumError::NoSignChange {
                lo,
                hi,
                expansions: MAX_BRACKET_EXPANSIONS,
            });
        }
    }
    unreachable!("loop either returns roots or errors on the last expansion");
}

/// Bisect a bracket with a strict sign change down to f64 resolution.
fn bisect(f: &impl Fn(f64) -> f64, mut lo: f64, mut f_lo: f64, mut hi: f64) -> f64 {
    for _ in 0..BISECT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return mid;
        }
        if (f_mid < 0.0) == (f_lo < 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Package scanned roots into a solution, enforcing the residual bound.
fn finish_solution(
    kind: ThresholdKind,
    roots: Vec<f64>,
    residual: impl Fn(f64) -> f64,
    tol: f64,
    access_fraction: f64,
    profile: &FeatureProfile,
) -> Result<EquilibriumSolution, EquilibriumError> {
    let residuals: Vec<f64> = roots.iter().map(|&r| residual(r)).collect();
    for (&root, &res) in roots.iter().zip(&residuals) {
        if res.abs() > tol {
            return Err(EquilibriumError::ResidualExceedsTolerance {
                root,
                residual: res,
                tol,
            });
        }
    }
    let canonical = roots.first().copied();
    Ok(EquilibriumSolution {
        kind,
        roots,
        canonical,
        residuals,
        access_fraction,
        profile: profile.clone(),
    })
}

/// Solve the report-optional regime for score thresholds: roots of
/// `R(θ̄) = reporting estimate at θ̄ − W(θ̄)`.
///
/// `R` runs from `−∞` to `+∞` (the reporting estimate is linear in the
/// score while the pool is bounded), so a root exists; all sign changes on
/// the scan grid are bisected and returned ascending, smallest canonical.
pub fn solve_report_threshold(
    params: &ModelParams,
    profile: &FeatureProfile,
    access_fraction: f64,
    tol: f64,
) -> Result<EquilibriumSolution, EquilibriumError> {
    check_tolerance(tol)?;
    let game = ScoreGame::new(params, profile, access_fraction)?;
    let roots = scan_and_bisect(
        |t| game.residual(t),
        game.predictive.mean,
        GRID_HALF_SPAN_SCALE * game.predictive.std_dev(),
    )?;
    finish_solution(
        ThresholdKind::ScoreThreshold,
        roots,
        |t| game.residual(t),
        tol,
        access_fraction,
        profile,
    )
}

/// Solve the report-if-take regime for skill cutoffs: a student takes the
/// test exactly when expected reporting beats the no-score pool, giving
/// roots of `R(q̄) = taking estimate at q̄ − skill-truncated pool at q̄`.
pub fn solve_taking_threshold(
    params: &ModelParams,
    profile: &FeatureProfile,
    access_fraction: f64,
    tol: f64,
) -> Result<EquilibriumSolution, EquilibriumError> {
    check_tolerance(tol)?;
    let game = SkillGame::new(params, profile, access_fraction)?;
    // The taking estimate moves by σ_K⁻²/D per unit of skill while the pool
    // moves on the posterior's own scale, so widen the scan by the inverse
    // slope to keep the crossing inside the initial span.
    let full_variance = posterior_with_score(params, profile, 0.0)?.variance;
    let slope = params.test_precision() * full_variance;
    let half_span = GRID_HALF_SPAN_SCALE * game.posterior_no_score.std_dev() / slope;
    let roots = scan_and_bisect(
        |q| game.residual(q),
        game.posterior_no_score.mean,
        half_span,
    )?;
    finish_solution(
        ThresholdKind::SkillThreshold,
        roots,
        |q| game.residual(q),
        tol,
        access_fraction,
        profile,
    )
}

/// Equilibrium when the school observes who has test access: full
/// reporting, in every requirement regime.
///
/// Under report-if-access it is mandated; in the free regimes any partial
/// cutoff is destabilized by the deviation of
/// [`check_threshold_instability`], leaving full reporting as the unique
/// equilibrium.
pub fn known_access_equilibrium(
    params: &ModelParams,
    profile: &FeatureProfile,
    _requirement: RequirementPolicy,
    access_fraction: f64,
) -> Result<EquilibriumSolution, EquilibriumError> {
    check_access_fraction(access_fraction)?;
    profile.check_against(params)?;
    Ok(EquilibriumSolution {
        kind: ThresholdKind::FullReporting,
        roots: Vec::new(),
        canonical: None,
        residuals: Vec::new(),
        access_fraction,
        profile: profile.clone(),
    })
}

/// Exhibit the deviation that destabilizes a candidate score threshold when
/// the school observes access.
///
/// Non-reporters with access pool at the effective score
/// `θ̃ = E[θ_K | θ_K < θ̄] < θ̄`, so any student with a score in `(θ̃, θ̄)`
/// gains by reporting. Returns such a witness for every finite candidate
/// (and for `+∞`, where the pool sits at the predictive mean); `−∞` — full
/// reporting — has nobody left to deviate and returns `None`.
pub fn check_threshold_instability(
    params: &ModelParams,
    profile: &FeatureProfile,
    candidate: f64,
) -> Result<Option<DeviationWitness>, EquilibriumError> {
    if candidate.is_nan() {
        return Err(EquilibriumError::ThresholdNaN);
    }
    if candidate == f64::NEG_INFINITY {
        return Ok(None);
    }
    let predictive = predictive_test_score(params, profile)?;
    let pooled_score = truncated_mean_below(&predictive, candidate);
    let score = if candidate == f64::INFINITY {
        // Pool sits at the predictive mean; one standard deviation above it
        // is a strictly profitable report.
        pooled_score + predictive.std_dev()
    } else {
        0.5 * (pooled_score + candidate)
    };
    let report_estimate = posterior_with_score(params, profile, score)?.mean;
    let pooled_estimate = posterior_with_score(params, profile, pooled_score)?.mean;
    Ok(Some(DeviationWitness {
        score,
        report_estimate,
        pooled_estimate,
    }))
}

/// Synchronous best-response dynamics on the score threshold.
///
/// Each round the marginal student is made indifferent against last round's
/// non-report estimate:
///
/// * `bo_known_z`: non-reporters pool at `θ̃ = E[θ_K | θ_K < θ_t]`, so the
///   new threshold is `θ̃` — thresholds ratchet down to full reporting;
/// * `equalizing`: non-reporters are credited the average reporter's
///   estimate, at effective score `E[θ_K | θ_K > θ_t]` — thresholds ratchet
///   up and reporting unravels to none;
/// * `bo_unknown_z`: the new threshold solves
///   `reporting estimate(θ) = W(θ_t)` in closed form (the reporting
///   estimate is linear in `θ`), converging to the interior equilibrium.
///
/// One step is recorded per iteration (reporting fraction among with-access
/// students, threshold, non-report estimate), all finite; an infinite
/// initial threshold is advanced one best-response step to its finite image
/// before recording (or resolved immediately if it is already the policy's
/// absorbing boundary). Hitting a reporting fraction within 1e-12 of the
/// policy's absorbing boundary ends the iteration with that outcome;
/// exhausting `max_iter` yields `NonConvergent` — a status, not an error.
pub fn best_response_dynamics(
    params: &ModelParams,
    profile: &FeatureProfile,
    policy: PolicyKind,
    access_fraction: f64,
    init_threshold: f64,
    max_iter: usize,
    tol: f64,
) -> Result<DynamicsTrace, EquilibriumError> {
    check_tolerance(tol)?;
    if !matches!(
        policy,
        PolicyKind::BoKnownZ | PolicyKind::BoUnknownZ | PolicyKind::Equalizing
    ) {
        return Err(EquilibriumError::UnsupportedPolicy { policy });
    }
    if init_threshold.is_nan() {
        return Err(EquilibriumError::ThresholdNaN);
    }
    let game = ScoreGame::new(params, profile, access_fraction)?;
    let predictive = game.predictive;

    // Reporting estimate is linear: report_estimate(θ) = base + slope·θ.
    let base = posterior_with_score(params, profile, 0.0)?.mean;
    let slope = params.test_precision() * posterior_with_score(params, profile, 0.0)?.variance;

    let next_threshold = |theta: f64| -> f64 {
        match policy {
            PolicyKind::BoKnownZ => truncated_mean_below(&predictive, theta),
            PolicyKind::Equalizing => truncated_mean_above(&predictive, theta),
            PolicyKind::BoUnknownZ => (game.withhold_estimate(theta) - base) / slope,
            _ => unreachable!("policy validated above"),
        }
    };
    let withhold_now = |theta: f64| -> f64 {
        match policy {
            PolicyKind::BoKnownZ => game.report_estimate(truncated_mean_below(&predictive, theta)),
            PolicyKind::Equalizing => {
                game.report_estimate(truncated_mean_above(&predictive, theta))
            }
            PolicyKind::BoUnknownZ => game.withhold_estimate(theta),
            _ => unreachable!("policy validated above"),
        }
    };
    let at_boundary = |lambda: f64| -> Option<DynamicsOutcome> {
        match policy {
            PolicyKind::BoKnownZ if lambda >= 1.0 - LAMBDA_BOUNDARY_TOL => {
                Some(DynamicsOutcome::FullReporting)
            }
            PolicyKind::Equalizing if lambda <= LAMBDA_BOUNDARY_TOL => {
                Some(DynamicsOutcome::NoReporting)
            }
            _ => None,
        }
    };

    let mut theta = init_threshold;
    let mut iterations = Vec::new();
    if theta.is_infinite() {
        if let Some(outcome) = at_boundary(survival(&predictive, theta)) {
            return Ok(DynamicsTrace {
                iterations,
                converged_to: outcome,
            });
        }
        theta = next_threshold(theta);
        debug_assert!(theta.is_finite(), "best response of an infinite threshold");
    }

    for _ in 0..max_iter {
        let lambda = survival(&predictive, theta);
        if let Some(outcome) = at_boundary(lambda) {
            return Ok(DynamicsTrace {
                iterations,
                converged_to: outcome,
            });
        }
        iterations.push(DynamicsStep {
            reporting_fraction: lambda,
            threshold: theta,
            withhold_estimate: withhold_now(theta),
        });
        let next = next_threshold(theta);
        if policy == PolicyKind::BoUnknownZ && (next - theta).abs() <= tol {
            iterations.push(DynamicsStep {
                reporting_fraction: survival(&predictive, next),
                threshold: next,
                withhold_estimate: withhold_now(next),
            });
            return Ok(DynamicsTrace {
                iterations,
                converged_to: DynamicsOutcome::Interior,
            });
        }
        theta = next;
    }
    Ok(DynamicsTrace {
        iterations,
        converged_to: DynamicsOutcome::NonConvergent,
    })
}

#[cfg(test)]
// Reference values carry every digit the arbitrating computation printed.
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Symmetric two-feature instance used throughout: prior N(0,1), both
    /// noise variances 1, non-test feature observed at 0.
    fn symmetric() -> (ModelParams, FeatureProfile) {
        let params = ModelParams::new(0.0, 1.0, vec![1.0, 1.0]).unwrap();
        let profile = FeatureProfile::new(vec![0.0]);
        (params, profile)
    }

    // ---- withhold estimate ------------------------------------------------

    #[test]
    fn withhold_matches_monte_carlo_oracle() {
        // Oracle: 10⁷ simulated students with this profile, C = 0.5,
        // threshold 0; non-reporters averaged to −0.10879 ± 0.00077 (3 SE).
        // The mixture closed form below sits inside that band.
        let (params, profile) = symmetric();
        let w = withhold_estimate_unknown_access(&params, &profile, 0.5, 0.0).unwrap();
        assert_abs_diff_eq!(w, -0.108_578_335_978_426_64, epsilon = 1e-12);
    }

    #[test]
    fn withhold_limits() {
        let (params, profile) = symmetric();
        let no_score = posterior_without_score(&params, &profile).unwrap().mean;
        // Vanishing access: only no-access students pool.
        let w = withhold_estimate_unknown_access(&params, &profile, 1e-9, 0.0).unwrap();
        assert_abs_diff_eq!(w, no_score, epsilon = 1e-8);
        // Threshold far below every score: no with-access student withholds.
        let w = withhold_estimate_unknown_access(&params, &profile, 0.5, -60.0).unwrap();
        assert_eq!(w, no_score);
        let w = withhold_estimate_unknown_access(&params, &profile, 0.5, f64::NEG_INFINITY).unwrap();
        assert_eq!(w, no_score);
        // Threshold at +∞: every with-access student withholds and the pool
        // mixes the no-score mean with the estimate at the predictive mean.
        let w = withhold_estimate_unknown_access(&params, &profile, 0.5, f64::INFINITY).unwrap();
        assert!(w.is_finite());
    }

    #[test]
    fn withhold_rejects_bad_inputs() {
        let (params, profile) = symmetric();
        for c in [0.0, 1.0, -0.1, 1.1, f64::NAN] {
            assert!(matches!(
                withhold_estimate_unknown_access(&params, &profile, c, 0.0),
                Err(EquilibriumError::InvalidAccessFraction { .. })
            ));
        }
        assert_eq!(
            withhold_estimate_unknown_access(&params, &profile, 0.5, f64::NAN),
            Err(EquilibriumError::ThresholdNaN)
        );
    }

    #[test]
    fn withhold_continuity_refines() {
        // Max jump between adjacent samples shrinks with the grid: the
        // estimate is continuous in the threshold.
        let (params, profile) = symmetric();
        let max_jump = |n: usize| -> f64 {
            let xs: Vec<f64> = (0..n).map(|i| -5.0 + 10.0 * i as f64 / (n - 1) as f64).collect();
            let vs: Vec<f64> = xs
                .iter()
                .map(|&t| withhold_estimate_unknown_access(&params, &profile, 0.5, t).unwrap())
                .collect();
            vs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
        };
        let coarse = max_jump(500);
        let fine = max_jump(5000);
        assert!(fine < coarse / 4.0, "coarse {coarse}, fine {fine}");
    }

    proptest! {
        #[test]
        fn withhold_between_pool_components(
            c in 0.05..0.95_f64, t in -4.0..4.0_f64, theta1 in -2.0..2.0_f64,
        ) {
            let params = ModelParams::new(0.0, 1.0, vec![1.0, 1.0]).unwrap();
            let profile = FeatureProfile::new(vec![theta1]);
            let w = withhold_estimate_unknown_access(&params, &profile, c, t).unwrap();
            let no_score = posterior_without_score(&params, &profile).unwrap().mean;
            let predictive = predictive_test_score(&params, &profile).unwrap();
            let truncated = posterior_with_score(
                &params, &profile, truncated_mean_below(&predictive, t),
            ).unwrap().mean;
            let lo = truncated.min(no_score);
            let hi = truncated.max(no_score);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12, "w={w} outside [{lo}, {hi}]");
        }
    }

    // ---- score-threshold solver -------------------------------------------

    #[test]
    fn report_threshold_matches_grid_oracle() {
        // Dense-scan oracle ([−10,10] at step 1e-3, then bisection) for the
        // symmetric instance at C = 0.5: single root −0.33806608777774749.
        let (params, profile) = symmetric();
        let sol = solve_report_threshold(&params, &profile, 0.5, 1e-9).unwrap();
        assert_eq!(sol.kind, ThresholdKind::ScoreThreshold);
        assert_eq!(sol.roots.len(), 1);
        assert_abs_diff_eq!(sol.canonical.unwrap(), -0.338_066_087_777_747_49, epsilon = 1e-9);
        assert!(sol.residuals[0].abs() <= 1e-9);
    }

    #[test]
    fn report_threshold_extreme_access_fractions() {
        // Grid oracle at the same instance: C = 0.01 → −0.0049106174805158,
        // C = 0.99 → −2.1075204753426688; both single finite roots.
        let (params, profile) = symmetric();
        let low = solve_report_threshold(&params, &profile, 0.01, 1e-9).unwrap();
        assert_abs_diff_eq!(low.canonical.unwrap(), -0.004_910_617_480_515_846_7, epsilon = 1e-9);
        let high = solve_report_threshold(&params, &profile, 0.99, 1e-9).unwrap();
        assert_abs_diff_eq!(high.canonical.unwrap(), -2.107_520_475_342_668_8, epsilon = 1e-9);
        for sol in [&low, &high] {
            assert_eq!(sol.roots.len(), 1);
            assert!(sol.canonical.unwrap().is_finite());
        }
    }

    #[test]
    fn report_threshold_two_sided_preference() {
        // Defining property: above the canonical root reporting beats the
        // equilibrium pool, below it the pool wins.
        let (params, profile) = symmetric();
        let sol = solve_report_threshold(&params, &profile, 0.5, 1e-9).unwrap();
        let root = sol.canonical.unwrap();
        let pool = withhold_estimate_unknown_access(&params, &profile, 0.5, root).unwrap();
        for i in 0..=200 {
            let theta = root - 4.0 + 8.0 * i as f64 / 200.0;
            let report = posterior_with_score(&params, &profile, theta).unwrap().mean;
            if theta > root {
                assert!(report >= pool - 1e-9);
            } else {
                assert!(report <= pool + 1e-9);
            }
        }
    }

    #[test]
    fn solver_rejects_degenerate_inputs() {
        let (params, profile) = symmetric();
        for c in [0.0, 1.0] {
            assert!(matches!(
                solve_report_threshold(&params, &profile, c, 1e-9),
                Err(EquilibriumError::InvalidAccessFraction { .. })
            ));
            assert!(matches!(
                solve_taking_threshold(&params, &profile, c, 1e-9),
                Err(EquilibriumError::InvalidAccessFraction { .. })
            ));
        }
        assert!(matches!(
            solve_report_threshold(&params, &profile, 0.5, 0.0),
            Err(EquilibriumError::InvalidTolerance { .. })
        ));
    }

    #[test]
    fn solver_is_deterministic() {
        let (params, profile) = symmetric();
        let a = solve_report_threshold(&params, &profile, 0.37, 1e-9).unwrap();
        let b = solve_report_threshold(&params, &profile, 0.37, 1e-9).unwrap();
        assert_eq!(a, b);
    }

    // ---- skill-threshold solver -------------------------------------------

    #[test]
    fn taking_threshold_matches_grid_oracle() {
        // Dense-scan oracle for the symmetric instance at C = 0.5: single
        // root −0.52335457593633894.
        let (params, profile) = symmetric();
        let sol = solve_taking_threshold(&params, &profile, 0.5, 1e-9).unwrap();
        assert_eq!(sol.kind, ThresholdKind::SkillThreshold);
        assert_eq!(sol.roots.len(), 1);
        assert_abs_diff_eq!(sol.canonical.unwrap(), -0.523_354_575_936_338_94, epsilon = 1e-9);
        assert!(sol.residuals[0].abs() <= 1e-9);
    }

    #[test]
    fn taking_pool_balances_at_the_solved_cutoff() {
        // At the solved cutoff the marginal taker is indifferent between the
        // expected reporting estimate and the scoreless pool.
        let (params, profile) = symmetric();
        let sol = solve_taking_threshold(&params, &profile, 0.5, 1e-9).unwrap();
        let cutoff = sol.canonical.unwrap();
        let pool = withhold_estimate_if_take(&params, &profile, 0.5, cutoff).unwrap();
        let taking = posterior_with_score(&params, &profile, cutoff).unwrap().mean;
        assert_abs_diff_eq!(taking, pool, epsilon = 1e-9);
    }

    #[test]
    fn taking_threshold_collapses_without_access() {
        // C → 0: the indifference collapses to taking-estimate(q̄) = m̂,
        // whose solution is q̄ = m̂ itself.
        let (params, profile) = symmetric();
        let no_score = posterior_without_score(&params, &profile).unwrap().mean;
        let sol = solve_taking_threshold(&params, &profile, 1e-9, 1e-9).unwrap();
        assert_abs_diff_eq!(sol.canonical.unwrap(), no_score, epsilon = 1e-6);
    }

    // ---- known access -----------------------------------------------------

    #[test]
    fn known_access_is_full_reporting() {
        let (params, profile) = symmetric();
        for req in [
            RequirementPolicy::ReportOptional,
            RequirementPolicy::ReportIfTake,
            RequirementPolicy::ReportIfAccess,
        ] {
            let sol = known_access_equilibrium(&params, &profile, req, 0.5).unwrap();
            assert_eq!(sol.kind, ThresholdKind::FullReporting);
            assert!(sol.roots.is_empty() && sol.canonical.is_none());
        }
        assert!(known_access_equilibrium(
            &params,
            &profile,
            RequirementPolicy::ReportOptional,
            0.0
        )
        .is_err());
    }

    #[test]
    fn every_finite_candidate_is_unstable() {
        // 101-point candidate grid over ±5 predictive standard deviations:
        // each has a profitable deviation, and the witness inequality holds
        // exactly.
        let (params, profile) = symmetric();
        let predictive = predictive_test_score(&params, &profile).unwrap();
        for i in 0..=100 {
            let candidate =
                predictive.mean + predictive.std_dev() * (-5.0 + 10.0 * i as f64 / 100.0);
            let witness = check_threshold_instability(&params, &profile, candidate)
                .unwrap()
                .expect("finite candidates are always unstable");
            assert!(witness.score < candidate);
            assert!(witness.report_estimate >= witness.pooled_estimate);
            assert!(witness.report_estimate > witness.pooled_estimate);
        }
    }

    #[test]
    fn instability_extended_candidates() {
        let (params, profile) = symmetric();
        // Full reporting: nobody withholds, nothing to destabilize.
        assert_eq!(
            check_threshold_instability(&params, &profile, f64::NEG_INFINITY).unwrap(),
            None
        );
        // Nobody reporting: reporting just above the pooled mean wins.
        let witness = check_threshold_instability(&params, &profile, f64::INFINITY)
            .unwrap()
            .unwrap();
        assert!(witness.score.is_finite());
        assert!(witness.report_estimate > witness.pooled_estimate);
    }

    // ---- dynamics ---------------------------------------------------------

    #[test]
    fn known_access_dynamics_unravel_to_full_reporting() {
        let (params, profile) = symmetric();
        let predictive = predictive_test_score(&params, &profile).unwrap();
        let trace = best_response_dynamics(
            &params,
            &profile,
            PolicyKind::BoKnownZ,
            0.5,
            predictive.mean,
            100,
            1e-9,
        )
        .unwrap();
        assert_eq!(trace.converged_to, DynamicsOutcome::FullReporting);
        assert!(trace.iterations.len() <= 100);
        for step in &trace.iterations {
            assert!(step.threshold.is_finite() && step.withhold_estimate.is_finite());
            assert!((0.0..=1.0).contains(&step.reporting_fraction));
        }
        // Thresholds ratchet downward, reporting fraction upward.
        for w in trace.iterations.windows(2) {
            assert!(w[1].threshold < w[0].threshold);
            assert!(w[1].reporting_fraction >= w[0].reporting_fraction);
        }
    }

    #[test]
    fn equalizing_dynamics_unravel_to_no_reporting() {
        // Start from everyone reporting (threshold −∞, advanced to its
        // finite best-response image before recording).
        let (params, profile) = symmetric();
        let trace = best_response_dynamics(
            &params,
            &profile,
            PolicyKind::Equalizing,
            0.5,
            f64::NEG_INFINITY,
            200,
            1e-9,
        )
        .unwrap();
        assert_eq!(trace.converged_to, DynamicsOutcome::NoReporting);
        assert!(trace.iterations.len() <= 200);
        for step in &trace.iterations {
            assert!(step.threshold.is_finite());
            assert!((0.0..=1.0).contains(&step.reporting_fraction));
        }
        for w in trace.iterations.windows(2) {
            assert!(w[1].threshold > w[0].threshold);
        }
    }

    #[test]
    fn unknown_access_dynamics_find_interior_equilibrium() {
        let (params, profile) = symmetric();
        let predictive = predictive_test_score(&params, &profile).unwrap();
        let trace = best_response_dynamics(
            &params,
            &profile,
            PolicyKind::BoUnknownZ,
            0.5,
            predictive.mean,
            500,
            1e-9,
        )
        .unwrap();
        assert_eq!(trace.converged_to, DynamicsOutcome::Interior);
        let sol = solve_report_threshold(&params, &profile, 0.5, 1e-9).unwrap();
        assert_abs_diff_eq!(
            trace.final_threshold().unwrap(),
            sol.canonical.unwrap(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn dynamics_reject_estimation_only_policies() {
        let (params, profile) = symmetric();
        for policy in [PolicyKind::Resampling, PolicyKind::TestBlank] {
            assert!(matches!(
                best_response_dynamics(&params, &profile, policy, 0.5, 0.0, 10, 1e-9),
                Err(EquilibriumError::UnsupportedPolicy { .. })
            ));
        }
    }

    #[test]
    fn dynamics_known_access_from_everyone_reporting_is_absorbing() {
        // Initial threshold −∞ under the known-access policy is already the
        // full-reporting boundary: empty trace, immediate outcome.
        let (params, profile) = symmetric();
        let trace = best_response_dynamics(
            &params,
            &profile,
            PolicyKind::BoKnownZ,
            0.5,
            f64::NEG_INFINITY,
            100,
            1e-9,
        )
        .unwrap();
        assert_eq!(trace.converged_to, DynamicsOutcome::FullReporting);
        assert!(trace.iterations.is_empty());
    }

    #[test]
    fn dynamics_non_convergence_is_a_status() {
        // A one-iteration budget cannot reach the interior fixed point.
        let (params, profile) = symmetric();
        let trace = best_response_dynamics(
            &params,
            &profile,
            PolicyKind::BoUnknownZ,
            0.5,
            5.0,
            1,
            1e-9,
        )
        .unwrap();
        assert_eq!(trace.converged_to, DynamicsOutcome::NonConvergent);
    }
}
