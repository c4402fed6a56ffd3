//! Fairness audits over skill-estimate distributions.
//!
//! Four notions, in decreasing stringency. Within a feature profile,
//! latent-skill fairness asks that students who also share the latent skill
//! `q` face the same estimate distribution regardless of test access;
//! observable fairness drops the shared-`q` requirement; demographic
//! fairness compares the population marginals; test-blankness asks that
//! scores play no role in estimates at all. Distributional equality is
//! decided analytically where both sides have closed forms (exact Gaussian
//! parameter comparison) and empirically otherwise (two-sample
//! Kolmogorov–Smirnov at a configured level, Bonferroni-corrected across
//! strata).
//!
//! Each audit also runs in a reported-split variant (condition on `X`
//! instead of `Z`); on the constructions audited here the reporting
//! equilibria make the two splits coincide or degenerate.

use crate::gauss::{
    posterior_without_score, predictive_test_score, FeatureProfile, Gaussian, GaussError,
    ModelParams,
};
use crate::policy::{
    estimate_score_slope, latent_estimate_distribution, resampling_estimate_distribution,
    with_access_estimate_distribution, PolicyError, PolicyKind,
};
use crate::simulate::{CohortDesign, SimulationResult, StudentRecord};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};
use std::fmt;
use thiserror::Error;

/// Strata with fewer samples than this on either side cannot support a
/// verdict and come back Inconclusive.
pub const MIN_SAMPLES_PER_SIDE: usize = 500;

/// Tolerance for exact Gaussian parameter comparison on the analytic path.
const ANALYTIC_GAP_TOL: f64 = 1e-12;

/// Empirical latent audits bin `q` into this many equal-probability bins
/// per cohort (conditioning on continuous `q` exactly is impossible).
const LATENT_BINS: usize = 20;

/// Analytic latent audits probe `q` at these conditional quantiles.
const LATENT_PROBE_QUANTILES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Test-blank audits probe the score on this grid around the predictive
/// mean, in predictive standard deviations.
const SCORE_GRID_POINTS: usize = 101;
const SCORE_GRID_HALF_SPAN: f64 = 4.0;

/// Errors from audit preconditions or sample handling.
#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("both samples must be non-empty")]
    EmptySample,
    #[error("samples must be free of NaN")]
    NonFiniteSample,
    #[error("significance level must lie strictly inside (0,1), got {alpha}")]
    InvalidAlpha { alpha: f64 },
    #[error("this audit conditions on a shared profile and needs fixed cohorts")]
    FixedCohortsRequired,
    #[error("this audit compares population marginals and needs sampled cohorts")]
    SampledCohortsRequired,
    #[error("cohorts must contain both access groups (access fraction puts {n_access} of {n} students on the access side)")]
    MissingGroup { n_access: usize, n: usize },
    #[error("at least one profile is required")]
    NoStrata,
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// The four fairness notions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessNotion {
    LatentSkill,
    Observable,
    Demographic,
    TestBlank,
}

impl fmt::Display for FairnessNotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FairnessNotion::LatentSkill => "latent_skill",
            FairnessNotion::Observable => "observable",
            FairnessNotion::Demographic => "demographic",
            FairnessNotion::TestBlank => "test_blank",
        };
        f.write_str(s)
    }
}

/// How a stratum (or whole report) was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMethod {
    Analytic,
    Empirical,
}

impl fmt::Display for AuditMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuditMethod::Analytic => "analytic",
            AuditMethod::Empirical => "empirical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Fair,
    Unfair,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Fair => "fair",
            Verdict::Unfair => "unfair",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Which indicator partitions the two compared groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitBy {
    /// Access `Z` — the definitions' primary form.
    Access,
    /// Reporting `X` — the corresponding variant.
    Reported,
}

impl fmt::Display for SplitBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitBy::Access => "access",
            SplitBy::Reported => "reported",
        })
    }
}

impl SplitBy {
    fn side(&self, r: &StudentRecord) -> bool {
        match self {
            SplitBy::Access => r.access,
            SplitBy::Reported => r.reports,
        }
    }
}

/// One conditioning stratum's comparison.
///
/// Analytic strata compare distribution parameters (`statistic` is the
/// largest parameter gap and `n_left`/`n_right` are zero); empirical strata
/// compare samples (`statistic` is the KS distance). An empty side leaves
/// `critical_value` infinite and the verdict Inconclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumResult {
    pub label: String,
    pub method: AuditMethod,
    pub statistic: f64,
    pub critical_value: f64,
    pub n_left: usize,
    pub n_right: usize,
    pub verdict: Verdict,
}

/// Outcome of one audit: the worst stratum's statistic and critical value,
/// the aggregated verdict, and every stratum examined.
///
/// Aggregation: any Unfair stratum makes the report Unfair; all-Fair makes
/// it Fair; otherwise Inconclusive. The headline `statistic` therefore
/// exceeds `critical_value` exactly when the verdict is Unfair, and a Fair
/// verdict means every stratum held.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub notion: FairnessNotion,
    pub method: AuditMethod,
    pub statistic: f64,
    pub critical_value: f64,
    pub verdict: Verdict,
    /// Human-readable description of the strata examined.
    pub conditioning: String,
    pub strata: Vec<StratumResult>,
}

// ---------------------------------------------------------------------------
// Two-sample machinery
// ---------------------------------------------------------------------------

/// Two-sample Kolmogorov–Smirnov statistic: the sup-distance between the
/// empirical CDFs, in [0,1]. Ties are handled by advancing both sides past
/// each distinct value before measuring the gap.
pub fn ks_statistic(sample_a: &[f64], sample_b: &[f64]) -> Result<f64, AuditError> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(AuditError::EmptySample);
    }
    if sample_a.iter().chain(sample_b).any(|v| v.is_nan()) {
        return Err(AuditError::NonFiniteSample);
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        sup = sup.max((i as f64 / n - j as f64 / m).abs());
    }
    // Once one side is exhausted its CDF sits at 1, and the other only
    // climbs toward 1, so no later point can beat the recorded sup.
    Ok(sup)
}

/// Asymptotic two-sample KS critical value `c(α)·√((n+m)/(nm))` with
/// `c(α) = √(−ln(α/2)/2)`.
pub fn ks_critical_value(alpha: f64, n: usize, m: usize) -> Result<f64, AuditError> {
    check_alpha(alpha)?;
    if n == 0 || m == 0 {
        return Err(AuditError::EmptySample);
    }
    let (n, m) = (n as f64, m as f64);
    Ok(ks_coefficient(alpha) * ((n + m) / (n * m)).sqrt())
}

fn ks_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

fn check_alpha(alpha: f64) -> Result<(), AuditError> {
    if !(alpha.is_finite() && alpha > 0.0 && alpha < 1.0) {
        return Err(AuditError::InvalidAlpha { alpha });
    }
    Ok(())
}

/// A side's estimate distribution on the analytic path.
#[derive(Debug, Clone, Copy)]
enum SideDist {
    /// Deterministic estimate.
    Point(f64),
    /// Gaussian estimate distribution.
    Norm(Gaussian),
}

/// Largest parameter gap between two closed-form sides. A point mass
/// against a positive-variance Gaussian can never match, and the variance
/// itself is the witnessing gap.
fn side_gap(left: &SideDist, right: &SideDist) -> f64 {
    match (left, right) {
        (SideDist::Point(a), SideDist::Point(b)) => (a - b).abs(),
        (SideDist::Norm(x), SideDist::Norm(y)) => {
            (x.mean - y.mean).abs().max((x.variance - y.variance).abs())
        }
        (SideDist::Point(a), SideDist::Norm(g)) | (SideDist::Norm(g), SideDist::Point(a)) => {
            (a - g.mean).abs().max(g.variance)
        }
    }
}

fn analytic_stratum(label: String, left: &SideDist, right: &SideDist) -> StratumResult {
    let gap = side_gap(left, right);
    StratumResult {
        label,
        method: AuditMethod::Analytic,
        statistic: gap,
        critical_value: ANALYTIC_GAP_TOL,
        n_left: 0,
        n_right: 0,
        verdict: if gap <= ANALYTIC_GAP_TOL {
            Verdict::Fair
        } else {
            Verdict::Unfair
        },
    }
}

/// Stratum for a comparison one side of which has no members (for example
/// the reported split when nobody reports): no verdict is possible.
fn empty_side_stratum(label: String, method: AuditMethod, n_left: usize, n_right: usize) -> StratumResult {
    StratumResult {
        label,
        method,
        statistic: 0.0,
        critical_value: f64::INFINITY,
        n_left,
        n_right,
        verdict: Verdict::Inconclusive,
    }
}

/// Build one empirical stratum at an already-Bonferroni-corrected level.
fn empirical_stratum(
    label: String,
    left: &[f64],
    right: &[f64],
    corrected_alpha: f64,
) -> Result<StratumResult, AuditError> {
    if left.is_empty() || right.is_empty() {
        return Ok(empty_side_stratum(
            label,
            AuditMethod::Empirical,
            left.len(),
            right.len(),
        ));
    }
    let statistic = ks_statistic(left, right)?;
    let critical_value = ks_critical_value(corrected_alpha, left.len(), right.len())?;
    let powered = left.len() >= MIN_SAMPLES_PER_SIDE && right.len() >= MIN_SAMPLES_PER_SIDE;
    let verdict = if !powered {
        Verdict::Inconclusive
    } else if statistic > critical_value {
        Verdict::Unfair
    } else {
        Verdict::Fair
    };
    Ok(StratumResult {
        label,
        method: AuditMethod::Empirical,
        statistic,
        critical_value,
        n_left: left.len(),
        n_right: right.len(),
        verdict,
    })
}

/// Assemble a report from its strata: aggregate the verdict and surface the
/// worst stratum's statistic and critical value.
fn assemble(
    notion: FairnessNotion,
    conditioning: String,
    strata: Vec<StratumResult>,
) -> Result<FairnessReport, AuditError> {
    if strata.is_empty() {
        return Err(AuditError::NoStrata);
    }
    let verdict = if strata.iter().any(|s| s.verdict == Verdict::Unfair) {
        Verdict::Unfair
    } else if strata.iter().all(|s| s.verdict == Verdict::Fair) {
        Verdict::Fair
    } else {
        Verdict::Inconclusive
    };
    let method = if strata.iter().all(|s| s.method == AuditMethod::Analytic) {
        AuditMethod::Analytic
    } else {
        AuditMethod::Empirical
    };
    let worst = strata
        .iter()
        .max_by(|a, b| {
            let ma = a.statistic - a.critical_value;
            let mb = b.statistic - b.critical_value;
            ma.total_cmp(&mb)
        })
        .expect("non-empty strata");
    Ok(FairnessReport {
        notion,
        method,
        statistic: worst.statistic,
        critical_value: worst.critical_value,
        verdict,
        conditioning,
        strata: strata.clone(),
    })
}

// ---------------------------------------------------------------------------
// Audit entry points
// ---------------------------------------------------------------------------

fn fixed_profiles(result: &SimulationResult) -> Result<&[FeatureProfile], AuditError> {
    match &result.config.cohorts {
        CohortDesign::FixedProfiles(profiles) => Ok(profiles),
        CohortDesign::SampledProfiles { .. } => Err(AuditError::FixedCohortsRequired),
    }
}

fn check_both_groups(result: &SimulationResult) -> Result<(), AuditError> {
    let n = result.config.n_per_cohort;
    let n_access = result.config.access_count();
    if n_access == 0 || n_access == n {
        return Err(AuditError::MissingGroup { n_access, n });
    }
    Ok(())
}

/// Closed-form estimate distributions of the two sides for one cohort, or
/// None when the policy has no closed form (unknown-access Bayesian).
///
/// Policies are audited in their reporting equilibrium: full reporting for
/// the known-access and test-blank policies (so the access and reported
/// splits coincide), complete unraveling for the equalizing policy.
fn observable_sides(
    kind: PolicyKind,
    params: &ModelParams,
    profile: &FeatureProfile,
    equalizing_target: Option<Gaussian>,
) -> Result<Option<(SideDist, SideDist)>, AuditError> {
    let no_score_mean = posterior_without_score(params, profile)?.mean;
    Ok(match kind {
        PolicyKind::BoKnownZ => Some((
            SideDist::Norm(with_access_estimate_distribution(params, profile)?),
            SideDist::Point(no_score_mean),
        )),
        PolicyKind::Resampling => Some((
            SideDist::Norm(with_access_estimate_distribution(params, profile)?),
            SideDist::Norm(resampling_estimate_distribution(params, profile)?),
        )),
        PolicyKind::TestBlank => Some((
            SideDist::Point(no_score_mean),
            SideDist::Point(no_score_mean),
        )),
        PolicyKind::Equalizing => {
            let shared = equalizing_draw_distribution(params, profile, equalizing_target)?;
            Some((SideDist::Norm(shared), SideDist::Norm(shared)))
        }
        PolicyKind::BoUnknownZ => None,
    })
}

/// Estimate distribution under the equalizing policy once reporting has
/// unraveled: every estimate is the posterior mean at a score drawn from
/// the target, a linear map of that draw.
fn equalizing_draw_distribution(
    params: &ModelParams,
    profile: &FeatureProfile,
    target: Option<Gaussian>,
) -> Result<Gaussian, AuditError> {
    let target = match target {
        Some(t) => t,
        None => predictive_test_score(params, profile)?,
    };
    let slope = estimate_score_slope(params, profile)?;
    let base = crate::gauss::posterior_with_score(params, profile, 0.0)?.mean;
    Ok(Gaussian {
        mean: base + slope * target.mean,
        variance: slope * slope * target.variance,
    })
}

/// Decide observable fairness: within each fixed cohort, compare the
/// estimate distributions of the two sides of the split. Analytic when the
/// policy admits closed forms, empirical (per-cohort KS) otherwise.
pub fn audit_observable(
    result: &SimulationResult,
    alpha: f64,
    split: SplitBy,
) -> Result<FairnessReport, AuditError> {
    check_alpha(alpha)?;
    check_both_groups(result)?;
    let profiles = fixed_profiles(result)?;
    let kind = result.config.policy.kind;
    if kind == PolicyKind::BoUnknownZ {
        return audit_observable_empirical(result, alpha, split);
    }
    let params = &result.config.params;
    let mut strata = Vec::with_capacity(profiles.len());
    for (cohort, profile) in profiles.iter().enumerate() {
        let label = format!("cohort={cohort}");
        if kind == PolicyKind::Equalizing && split == SplitBy::Reported {
            // Unraveling leaves the reported side empty.
            strata.push(empty_side_stratum(label, AuditMethod::Analytic, 0, 0));
            continue;
        }
        let (left, right) = observable_sides(
            kind,
            params,
            profile,
            result.config.policy.equalizing_target,
        )?
        .expect("all closed-form policies handled above");
        strata.push(analytic_stratum(label, &left, &right));
    }
    assemble(
        FairnessNotion::Observable,
        format!("per fixed cohort, split by {split}"),
        strata,
    )
}

/// Observable audit on simulation records regardless of closed forms.
pub fn audit_observable_empirical(
    result: &SimulationResult,
    alpha: f64,
    split: SplitBy,
) -> Result<FairnessReport, AuditError> {
    check_alpha(alpha)?;
    check_both_groups(result)?;
    let profiles = fixed_profiles(result)?;
    let mut sides: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); profiles.len()];
    for r in &result.records {
        let (left, right) = &mut sides[r.cohort];
        if split.side(r) {
            left.push(r.estimate);
        } else {
            right.push(r.estimate);
        }
    }
    let strata = bonferroni_strata(
        alpha,
        sides
            .iter()
            .enumerate()
            .map(|(cohort, (l, r))| (format!("cohort={cohort}"), l.as_slice(), r.as_slice())),
    )?;
    assemble(
        FairnessNotion::Observable,
        format!("per fixed cohort, split by {split}, empirical KS"),
        strata,
    )
}

/// Build empirical strata with the level split evenly (Bonferroni) across
/// the strata powered enough to decide.
fn bonferroni_strata<'a>(
    alpha: f64,
    groups: impl Iterator<Item = (String, &'a [f64], &'a [f64])> + Clone,
) -> Result<Vec<StratumResult>, AuditError> {
    let eligible = groups
        .clone()
        .filter(|(_, l, r)| l.len() >= MIN_SAMPLES_PER_SIDE && r.len() >= MIN_SAMPLES_PER_SIDE)
        .count();
    let corrected = alpha / eligible.max(1) as f64;
    groups
        .map(|(label, l, r)| empirical_stratum(label, l, r, corrected))
        .collect()
}

/// Decide latent-skill fairness: like the observable audit with additional
/// conditioning on the latent skill. The analytic path probes `q` at
/// conditional quantiles; the empirical path bins `q` into
/// equal-probability bins per cohort.
pub fn audit_latent(
    result: &SimulationResult,
    alpha: f64,
    split: SplitBy,
) -> Result<FairnessReport, AuditError> {
    check_alpha(alpha)?;
    check_both_groups(result)?;
    let profiles = fixed_profiles(result)?;
    let kind = result.config.policy.kind;
    if kind == PolicyKind::BoUnknownZ {
        return audit_latent_empirical(result, alpha, split);
    }
    let params = &result.config.params;
    let mut strata = Vec::new();
    for (cohort, profile) in profiles.iter().enumerate() {
        let conditional = posterior_without_score(params, profile)?;
        let quantile = StatrsNormal::new(conditional.mean, conditional.std_dev())
            .expect("validated conditional");
        for p in LATENT_PROBE_QUANTILES {
            let q = quantile.inverse_cdf(p);
            let label = format!("cohort={cohort},q={q:.6}");
            if kind == PolicyKind::Equalizing && split == SplitBy::Reported {
                strata.push(empty_side_stratum(label, AuditMethod::Analytic, 0, 0));
                continue;
            }
            let no_score_mean = conditional.mean;
            let (left, right) = match kind {
                PolicyKind::BoKnownZ => (
                    SideDist::Norm(latent_estimate_distribution(params, profile, q)?),
                    SideDist::Point(no_score_mean),
                ),
                PolicyKind::Resampling => (
                    SideDist::Norm(latent_estimate_distribution(params, profile, q)?),
                    SideDist::Norm(resampling_estimate_distribution(params, profile)?),
                ),
                PolicyKind::TestBlank => (
                    SideDist::Point(no_score_mean),
                    SideDist::Point(no_score_mean),
                ),
                PolicyKind::Equalizing => {
                    let shared = equalizing_draw_distribution(
                        params,
                        profile,
                        result.config.policy.equalizing_target,
                    )?;
                    (SideDist::Norm(shared), SideDist::Norm(shared))
                }
                PolicyKind::BoUnknownZ => unreachable!("dispatched to the empirical path"),
            };
            strata.push(analytic_stratum(label, &left, &right));
        }
    }
    assemble(
        FairnessNotion::LatentSkill,
        format!(
            "per fixed cohort, q probed at conditional quantiles {:?}, split by {split}",
            LATENT_PROBE_QUANTILES
        ),
        strata,
    )
}

/// Latent audit on simulation records: per cohort, bin `q` into
/// equal-probability bins and compare the split sides within each bin.
pub fn audit_latent_empirical(
    result: &SimulationResult,
    alpha: f64,
    split: SplitBy,
) -> Result<FairnessReport, AuditError> {
    check_alpha(alpha)?;
    check_both_groups(result)?;
    let profiles = fixed_profiles(result)?;
    let params = &result.config.params;

    // Equal-probability bin edges per cohort from the conditional of q.
    let mut edges_per_cohort = Vec::with_capacity(profiles.len());
    for profile in profiles {
        let conditional = posterior_without_score(params, profile)?;
        let normal = StatrsNormal::new(conditional.mean, conditional.std_dev())
            .expect("validated conditional");
        let edges: Vec<f64> = (1..LATENT_BINS)
            .map(|i| normal.inverse_cdf(i as f64 / LATENT_BINS as f64))
            .collect();
        edges_per_cohort.push(edges);
    }

    let mut sides: Vec<Vec<(Vec<f64>, Vec<f64>)>> =
        vec![vec![(Vec::new(), Vec::new()); LATENT_BINS]; profiles.len()];
    for r in &result.records {
        let edges = &edges_per_cohort[r.cohort];
        let bin = edges.partition_point(|&e| e <= r.q);
        let (left, right) = &mut sides[r.cohort][bin];
        if split.side(r) {
            left.push(r.estimate);
        } else {
            right.push(r.estimate);
        }
    }

    let groups: Vec<(String, &[f64], &[f64])> = sides
        .iter()
        .enumerate()
        .flat_map(|(cohort, bins)| {
            bins.iter().enumerate().map(move |(bin, (l, r))| {
                (
                    format!("cohort={cohort},qbin={bin:02}"),
                    l.as_slice(),
                    r.as_slice(),
                )
            })
        })
        .collect();
    let strata = bonferroni_strata(alpha, groups.into_iter())?;
    assemble(
        FairnessNotion::LatentSkill,
        format!(
            "per fixed cohort, q binned into {LATENT_BINS} equal-probability bins, split by {split}, empirical KS"
        ),
        strata,
    )
}

/// Decide demographic fairness: a single KS comparison of the pooled
/// estimate marginals across the split, over sampled cohorts. No closed
/// form exists for the marginal mixture, so this audit is always empirical.
pub fn audit_demographic(
    result: &SimulationResult,
    alpha: f64,
    split: SplitBy,
) -> Result<FairnessReport, AuditError> {
    check_alpha(alpha)?;
    check_both_groups(result)?;
    if !matches!(result.config.cohorts, CohortDesign::SampledProfiles { .. }) {
        return Err(AuditError::SampledCohortsRequired);
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for r in &result.records {
        if split.side(r) {
            left.push(r.estimate);
        } else {
            right.push(r.estimate);
        }
    }
    let strata = vec![empirical_stratum(
        "pooled".to_string(),
        &left,
        &right,
        alpha,
    )?];
    assemble(
        FairnessNotion::Demographic,
        format!("pooled marginals over sampled cohorts, split by {split}, empirical KS"),
        strata,
    )
}

/// Decide test-blankness: whether estimates are invariant to the score and
/// the reporting decision, per profile, over the information sets the
/// policy's reporting equilibrium can reach.
///
/// Policies that accept reports expose a reported state whose estimate is
/// linear in the score with positive slope; the probe grid's spread is the
/// witnessing statistic. The equalizing policy's unraveling leaves only
/// non-reported states reachable, and its estimate draw ignores the
/// realized score entirely, as does the test-blank policy's constant.
pub fn audit_test_blank(
    kind: PolicyKind,
    params: &ModelParams,
    profiles: &[FeatureProfile],
) -> Result<FairnessReport, AuditError> {
    if profiles.is_empty() {
        return Err(AuditError::NoStrata);
    }
    let mut strata = Vec::with_capacity(profiles.len());
    for (idx, profile) in profiles.iter().enumerate() {
        let label = format!("profile={idx}");
        let spread = match kind {
            // Constant in every information set.
            PolicyKind::TestBlank => 0.0,
            // Reachable non-reported states only; the estimate is drawn
            // from a fixed target-based distribution, score-free.
            PolicyKind::Equalizing => 0.0,
            // A reported state's estimate moves with the score.
            PolicyKind::BoKnownZ | PolicyKind::BoUnknownZ | PolicyKind::Resampling => {
                let predictive = predictive_test_score(params, profile)?;
                let half_span = SCORE_GRID_HALF_SPAN * predictive.std_dev();
                let lo = predictive.mean - half_span;
                let hi = predictive.mean + half_span;
                let step = (hi - lo) / (SCORE_GRID_POINTS - 1) as f64;
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for i in 0..SCORE_GRID_POINTS {
                    let score = lo + step * i as f64;
                    let est =
                        crate::gauss::posterior_with_score(params, profile, score)?.mean;
                    min = min.min(est);
                    max = max.max(est);
                }
                max - min
            }
        };
        strata.push(StratumResult {
            label,
            method: AuditMethod::Analytic,
            statistic: spread,
            critical_value: ANALYTIC_GAP_TOL,
            n_left: 0,
            n_right: 0,
            verdict: if spread <= ANALYTIC_GAP_TOL {
                Verdict::Fair
            } else {
                Verdict::Unfair
            },
        });
    }
    assemble(
        FairnessNotion::TestBlank,
        format!(
            "estimate spread over a ±{SCORE_GRID_HALF_SPAN} predictive-sd score grid, reachable reporting states, per profile"
        ),
        strata,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::RequirementPolicy;
    use crate::simulate::{run, PolicyChoice, SimulationConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn sim_config(kind: PolicyKind, cohorts: CohortDesign, n: usize) -> SimulationConfig {
        SimulationConfig {
            params: ModelParams::new(0.0, 1.0, vec![1.0, 1.0]).unwrap(),
            access_fraction: 0.5,
            policy: PolicyChoice::new(kind),
            requirement: RequirementPolicy::ReportOptional,
            cohorts,
            n_per_cohort: n,
            seed: 7,
            solver_tol: 1e-9,
        }
    }

    fn fixed(n: usize, kind: PolicyKind) -> SimulationConfig {
        sim_config(
            kind,
            CohortDesign::FixedProfiles(vec![FeatureProfile::new(vec![0.0])]),
            n,
        )
    }

    // ---- KS machinery -----------------------------------------------------

    #[test]
    fn ks_identical_samples_is_zero() {
        let s = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(ks_statistic(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn ks_disjoint_supports_is_one() {
        let a = vec![0.0, 1.0, 2.0];
        let b = vec![10.0, 11.0];
        assert_eq!(ks_statistic(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn ks_handles_ties_by_joint_jumps() {
        // F_a(0) = 2/3, F_b(0) = 1/3; both reach 1 at x = 1.
        let a = vec![0.0, 0.0, 1.0];
        let b = vec![0.0, 1.0, 1.0];
        assert_abs_diff_eq!(ks_statistic(&a, &b).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn ks_rejects_bad_samples() {
        assert_eq!(ks_statistic(&[], &[1.0]), Err(AuditError::EmptySample));
        assert_eq!(
            ks_statistic(&[f64::NAN], &[1.0]),
            Err(AuditError::NonFiniteSample)
        );
    }

    #[test]
    fn ks_separated_gaussians_match_analytic_sup() {
        // For N(0,1) vs N(1,1) the exact sup of the CDF gap sits at the
        // midpoint: 2Φ(1/2) − 1.
        let analytic = crate::gauss::Gaussian::new(0.0, 1.0).unwrap().cdf(0.5)
            - crate::gauss::Gaussian::new(1.0, 1.0).unwrap().cdf(0.5);
        assert_abs_diff_eq!(analytic, 0.38292492254802624, epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d0 = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let d1 = rand_distr::Normal::new(1.0, 1.0).unwrap();
        let a: Vec<f64> = (0..100_000).map(|_| d0.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..100_000).map(|_| d1.sample(&mut rng)).collect();
        assert_abs_diff_eq!(ks_statistic(&a, &b).unwrap(), analytic, epsilon = 0.01);
    }

    #[test]
    fn ks_critical_value_matches_formula() {
        // c(0.01) and c(0.05) under c(α) = √(−ln(α/2)/2).
        assert_abs_diff_eq!(ks_coefficient(0.01), 1.6276236307187293, epsilon = 1e-15);
        assert_abs_diff_eq!(ks_coefficient(0.05), 1.3581015157406195, epsilon = 1e-15);
        let crit = ks_critical_value(0.01, 100_000, 100_000).unwrap();
        assert_abs_diff_eq!(
            crit,
            1.6276236307187293 * (2.0 / 100_000.0f64).sqrt(),
            epsilon = 1e-15
        );
        assert!(matches!(
            ks_critical_value(1.5, 10, 10),
            Err(AuditError::InvalidAlpha { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn ks_symmetric_and_rank_invariant(
            a in proptest::collection::vec(-50.0f64..50.0, 1..40),
            b in proptest::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let d = ks_statistic(&a, &b).unwrap();
            prop_assert_eq!(d, ks_statistic(&b, &a).unwrap());
            // A strictly increasing map preserves ranks, hence the statistic.
            let fa: Vec<f64> = a.iter().map(|x| x / 100.0 + (x / 100.0).powi(3)).collect();
            let fb: Vec<f64> = b.iter().map(|x| x / 100.0 + (x / 100.0).powi(3)).collect();
            prop_assert_eq!(d, ks_statistic(&fa, &fb).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }

    // ---- observable -------------------------------------------------------

    #[test]
    fn observable_analytic_verdicts_match_theory() {
        for (kind, expected) in [
            (PolicyKind::BoKnownZ, Verdict::Unfair),
            (PolicyKind::Resampling, Verdict::Fair),
            (PolicyKind::TestBlank, Verdict::Fair),
            (PolicyKind::Equalizing, Verdict::Fair),
        ] {
            let result = run(&fixed(1000, kind)).unwrap();
            let report = audit_observable(&result, 0.01, SplitBy::Access).unwrap();
            assert_eq!(report.verdict, expected, "{kind}");
            assert_eq!(report.method, AuditMethod::Analytic);
            if expected == Verdict::Unfair {
                assert!(report.statistic > report.critical_value);
            }
        }
    }

    #[test]
    fn observable_empirical_flags_unknown_access_pooling() {
        // Unknown-access estimation has no closed form: the audit falls
        // back to per-cohort KS. The non-access side is a point mass at the
        // pool while the access side spreads over reported scores.
        let result = run(&fixed(20_000, PolicyKind::BoUnknownZ)).unwrap();
        let report = audit_observable(&result, 0.01, SplitBy::Access).unwrap();
        assert_eq!(report.method, AuditMethod::Empirical);
        assert_eq!(report.verdict, Verdict::Unfair);
        let by_x = audit_observable(&result, 0.01, SplitBy::Reported).unwrap();
        assert_eq!(by_x.verdict, Verdict::Unfair);
    }

    #[test]
    fn observable_empirical_agrees_with_analytic_closed_forms() {
        // Method-agreement spot checks at n = 10⁵.
        for (kind, expected) in [
            (PolicyKind::BoKnownZ, Verdict::Unfair),
            (PolicyKind::Resampling, Verdict::Fair),
        ] {
            let result = run(&fixed(100_000, kind)).unwrap();
            let report = audit_observable_empirical(&result, 0.01, SplitBy::Access).unwrap();
            assert_eq!(report.verdict, expected, "{kind}");
        }
    }

    #[test]
    fn observable_reported_split_reproduces_access_verdicts() {
        // Full reporting makes X ≡ Z for the closed-form constructions.
        for (kind, expected) in [
            (PolicyKind::BoKnownZ, Verdict::Unfair),
            (PolicyKind::Resampling, Verdict::Fair),
            (PolicyKind::TestBlank, Verdict::Fair),
        ] {
            let result = run(&fixed(1000, kind)).unwrap();
            let report = audit_observable(&result, 0.01, SplitBy::Reported).unwrap();
            assert_eq!(report.verdict, expected, "{kind}");
        }
        // Equalizing unravels: the reported side is empty.
        let result = run(&fixed(1000, PolicyKind::Equalizing)).unwrap();
        let report = audit_observable(&result, 0.01, SplitBy::Reported).unwrap();
        assert_eq!(report.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn observable_requires_fixed_cohorts_and_both_groups() {
        let sampled = run(&sim_config(
            PolicyKind::BoKnownZ,
            CohortDesign::SampledProfiles { n_profiles: 1 },
            1000,
        ))
        .unwrap();
        assert_eq!(
            audit_observable(&sampled, 0.01, SplitBy::Access),
            Err(AuditError::FixedCohortsRequired)
        );
        let mut config = fixed(10, PolicyKind::BoKnownZ);
        config.access_fraction = 0.05; // ⌊0.05·10⌋ = 0 students with access
        let result = run(&config).unwrap();
        assert!(matches!(
            audit_observable(&result, 0.01, SplitBy::Access),
            Err(AuditError::MissingGroup { n_access: 0, n: 10 })
        ));
    }

    // ---- latent -----------------------------------------------------------

    #[test]
    fn latent_analytic_verdicts_match_theory() {
        for (kind, expected) in [
            (PolicyKind::BoKnownZ, Verdict::Unfair),
            (PolicyKind::Resampling, Verdict::Unfair),
            (PolicyKind::TestBlank, Verdict::Fair),
            (PolicyKind::Equalizing, Verdict::Fair),
        ] {
            let result = run(&fixed(1000, kind)).unwrap();
            let report = audit_latent(&result, 0.01, SplitBy::Access).unwrap();
            assert_eq!(report.verdict, expected, "{kind}");
            assert_eq!(report.strata.len(), LATENT_PROBE_QUANTILES.len());
        }
    }

    #[test]
    fn latent_empirical_flags_known_access_bayes() {
        // Within a q-bin the access side's estimates track the score while
        // the no-access side sits at the no-score posterior mean.
        let result = run(&fixed(40_000, PolicyKind::BoKnownZ)).unwrap();
        let report = audit_latent_empirical(&result, 0.01, SplitBy::Access).unwrap();
        assert_eq!(report.verdict, Verdict::Unfair);
        assert_eq!(report.strata.len(), LATENT_BINS);
    }

    #[test]
    fn latent_fair_implies_observable_fair() {
        // Stringency chain on decided (non-Inconclusive) analytic audits.
        for kind in [
            PolicyKind::BoKnownZ,
            PolicyKind::Resampling,
            PolicyKind::TestBlank,
            PolicyKind::Equalizing,
        ] {
            let result = run(&fixed(1000, kind)).unwrap();
            let latent = audit_latent(&result, 0.01, SplitBy::Access).unwrap();
            let observable = audit_observable(&result, 0.01, SplitBy::Access).unwrap();
            if latent.verdict == Verdict::Fair {
                assert_ne!(observable.verdict, Verdict::Unfair, "{kind}");
            }
        }
    }

    // ---- demographic ------------------------------------------------------

    #[test]
    fn demographic_verdicts_over_sampled_cohorts() {
        for (kind, expected) in [
            (PolicyKind::Resampling, Verdict::Fair),
            (PolicyKind::BoKnownZ, Verdict::Unfair),
            (PolicyKind::TestBlank, Verdict::Fair),
        ] {
            let result = run(&sim_config(
                kind,
                CohortDesign::SampledProfiles { n_profiles: 1 },
                50_000,
            ))
            .unwrap();
            let report = audit_demographic(&result, 0.01, SplitBy::Access).unwrap();
            assert_eq!(report.verdict, expected, "{kind}");
            assert_eq!(report.strata.len(), 1);
        }
    }

    #[test]
    fn demographic_rejects_fixed_cohorts() {
        let result = run(&fixed(1000, PolicyKind::BoKnownZ)).unwrap();
        assert_eq!(
            audit_demographic(&result, 0.01, SplitBy::Access),
            Err(AuditError::SampledCohortsRequired)
        );
    }

    // ---- test-blank -------------------------------------------------------

    #[test]
    fn test_blank_verdicts_per_policy() {
        let params = ModelParams::new(0.0, 1.0, vec![1.0, 1.0]).unwrap();
        let profiles = vec![FeatureProfile::new(vec![0.0])];
        for (kind, expected) in [
            (PolicyKind::TestBlank, Verdict::Fair),
            (PolicyKind::Equalizing, Verdict::Fair),
            (PolicyKind::BoKnownZ, Verdict::Unfair),
            (PolicyKind::BoUnknownZ, Verdict::Unfair),
            (PolicyKind::Resampling, Verdict::Unfair),
        ] {
            let report = audit_test_blank(kind, &params, &profiles).unwrap();
            assert_eq!(report.verdict, expected, "{kind}");
        }
        assert_eq!(
            audit_test_blank(PolicyKind::TestBlank, &params, &[]),
            Err(AuditError::NoStrata)
        );
    }

    // ---- power and aggregation -------------------------------------------

    #[test]
    fn underpowered_strata_come_back_inconclusive() {
        // 600 students at C = 0.5 put ~300 per side: below the floor.
        let result = run(&fixed(600, PolicyKind::BoUnknownZ)).unwrap();
        let report = audit_observable(&result, 0.01, SplitBy::Access).unwrap();
        assert_eq!(report.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn fair_reports_hold_on_every_stratum() {
        let result = run(&sim_config(
            PolicyKind::Resampling,
            CohortDesign::FixedProfiles(vec![
                FeatureProfile::new(vec![0.0]),
                FeatureProfile::new(vec![2.0]),
            ]),
            1000,
        ))
        .unwrap();
        let report = audit_observable(&result, 0.01, SplitBy::Access).unwrap();
        assert_eq!(report.verdict, Verdict::Fair);
        assert!(report
            .strata
            .iter()
            .all(|s| s.statistic <= s.critical_value && s.verdict == Verdict::Fair));
    }
}
