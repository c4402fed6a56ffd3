//! Synthetic student populations: generate, decide, estimate.
//!
//! A simulation realizes the model at finite `n`: draw latent skills and
//! features, assign test access deterministically, apply the equilibrium
//! decision rule for the configured policy and requirement, then run the
//! estimation policy over every student's information set. The output is a
//! flat record stream suitable for the fairness audits.
//!
//! Determinism contract: every random draw comes from a counter-based
//! generator keyed by `(seed, purpose, cohort, student)`, so records are
//! byte-identical across runs and across thread counts — parallelism only
//! changes who computes a student, never which stream the student reads.
//! Draw order within a student's generation stream is fixed: skill first,
//! then non-test noise terms in feature order, then test noise (drawn only
//! when the student has access).

use crate::equilibrium::{
    known_access_equilibrium, solve_report_threshold, solve_taking_threshold, EquilibriumError,
    EquilibriumSolution, RequirementPolicy, ThresholdKind,
};
use crate::gauss::{
    posterior_without_score, FeatureProfile, Gaussian, GaussError, ModelParams,
};
use crate::policy::{estimate, InfoSet, PolicyError, PolicyKind, PolicySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stream-purpose tags for the per-student generators: generation draws and
/// estimation draws must never share a stream, or adding a draw to one
/// stage would silently shift the other.
const STREAM_GENERATION: u64 = 0;
const STREAM_ESTIMATION: u64 = 1;

/// Cohort index occupies 24 bits of the stream id.
const MAX_COHORTS: usize = 1 << 24;
/// Student index occupies 32 bits of the stream id.
const MAX_N_PER_COHORT: usize = u32::MAX as usize;

/// Errors from configuration validation or the simulation pipeline.
#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("n_per_cohort must be at least 1")]
    EmptyCohortSize,
    #[error("at least one cohort is required")]
    NoCohorts,
    #[error("at most {max} cohorts are supported, got {got}")]
    TooManyCohorts { max: usize, got: usize },
    #[error("at most {max} students per cohort are supported, got {got}")]
    CohortTooLarge { max: usize, got: usize },
    #[error("access fraction must lie strictly inside (0,1), got {value}")]
    InvalidAccessFraction { value: f64 },
    #[error("fixed cohort profiles must not embed a test score")]
    ProfileEmbedsScore,
    #[error("an equalizing target is only meaningful for the equalizing policy")]
    TargetWithoutEqualizing,
    #[error("{policy} cannot observe access, so the {requirement:?} requirement cannot be enforced")]
    UnenforceableRequirement {
        policy: PolicyKind,
        requirement: RequirementPolicy,
    },
    #[error("a {kind} equilibrium does not match the {requirement:?} requirement")]
    MismatchedEquilibrium {
        kind: ThresholdKind,
        requirement: RequirementPolicy,
    },
    #[error("a {kind} equilibrium needs a canonical threshold to apply decisions")]
    MissingThreshold { kind: ThresholdKind },
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One simulated student.
///
/// `features.test_score` is the realized score for every student with
/// access — reporters and withholders alike, so counterfactual checks can
/// ask what a withholder would have gotten — and absent without access.
/// Policies never see it directly: estimation goes through an [`InfoSet`],
/// which refuses profiles that embed a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    /// Latent skill `q`.
    pub q: f64,
    /// Access indicator `Z`.
    pub access: bool,
    /// Taking indicator `Y`.
    pub takes: bool,
    /// Reporting indicator `X`.
    pub reports: bool,
    pub features: FeatureProfile,
    /// Skill estimate `q̃`; NaN until the estimation stage has run.
    pub estimate: f64,
    pub policy: PolicyKind,
    pub cohort: usize,
    /// Index within the cohort; keys the student's RNG streams.
    pub student: usize,
}

impl StudentRecord {
    /// Action-space feasibility `Z ≥ Y ≥ X`.
    pub fn decisions_feasible(&self) -> bool {
        self.access >= self.takes && self.takes >= self.reports
    }
}

/// How cohorts get their non-test features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CohortDesign {
    /// One cohort per listed profile; every student in a cohort shares its
    /// features, and skill is drawn from the exact conditional given them.
    FixedProfiles(Vec<FeatureProfile>),
    /// `n_profiles` cohorts of students whose skill and features are drawn
    /// jointly from the generative model, independently per student.
    SampledProfiles { n_profiles: usize },
}

/// Which estimation policy to run, plus the one piece of runtime input a
/// policy can take from configuration: the equalizing target. Equilibrium
/// payloads are produced by [`run`], not supplied here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyChoice {
    pub kind: PolicyKind,
    /// Target distribution for the equalizing policy. Defaults to the
    /// cohort's predictive score distribution (fixed cohorts) or the
    /// population score marginal (sampled cohorts).
    pub equalizing_target: Option<Gaussian>,
}

impl PolicyChoice {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            equalizing_target: None,
        }
    }
}

/// Full description of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub params: ModelParams,
    pub access_fraction: f64,
    pub policy: PolicyChoice,
    pub requirement: RequirementPolicy,
    pub cohorts: CohortDesign,
    pub n_per_cohort: usize,
    pub seed: u64,
    /// Residual tolerance for threshold solves.
    pub solver_tol: f64,
}

impl SimulationConfig {
    /// Check every cross-field invariant. [`run`] validates implicitly;
    /// callers composing the stages manually should validate first.
    pub fn validate(&self) -> Result<(), SimulateError> {
        if self.n_per_cohort == 0 {
            return Err(SimulateError::EmptyCohortSize);
        }
        if self.n_per_cohort > MAX_N_PER_COHORT {
            return Err(SimulateError::CohortTooLarge {
                max: MAX_N_PER_COHORT,
                got: self.n_per_cohort,
            });
        }
        let c = self.access_fraction;
        if !(c.is_finite() && c > 0.0 && c < 1.0) {
            return Err(SimulateError::InvalidAccessFraction { value: c });
        }
        match &self.cohorts {
            CohortDesign::FixedProfiles(profiles) => {
                if profiles.is_empty() {
                    return Err(SimulateError::NoCohorts);
                }
                if profiles.len() > MAX_COHORTS {
                    return Err(SimulateError::TooManyCohorts {
                        max: MAX_COHORTS,
                        got: profiles.len(),
                    });
                }
                for profile in profiles {
                    if profile.test_score.is_some() {
                        return Err(SimulateError::ProfileEmbedsScore);
                    }
                    profile.check_against(&self.params)?;
                }
            }
            CohortDesign::SampledProfiles { n_profiles } => {
                if *n_profiles == 0 {
                    return Err(SimulateError::NoCohorts);
                }
                if *n_profiles > MAX_COHORTS {
                    return Err(SimulateError::TooManyCohorts {
                        max: MAX_COHORTS,
                        got: *n_profiles,
                    });
                }
            }
        }
        if self.policy.equalizing_target.is_some() && self.policy.kind != PolicyKind::Equalizing {
            return Err(SimulateError::TargetWithoutEqualizing);
        }
        // Policies that cannot observe access cannot enforce a requirement
        // conditioned on access.
        if self.requirement == RequirementPolicy::ReportIfAccess
            && matches!(
                self.policy.kind,
                PolicyKind::BoUnknownZ | PolicyKind::Equalizing
            )
        {
            return Err(SimulateError::UnenforceableRequirement {
                policy: self.policy.kind,
                requirement: self.requirement,
            });
        }
        Ok(())
    }

    fn n_cohorts(&self) -> usize {
        match &self.cohorts {
            CohortDesign::FixedProfiles(profiles) => profiles.len(),
            CohortDesign::SampledProfiles { n_profiles } => *n_profiles,
        }
    }

    /// Number of with-access students per cohort: exactly `⌊C·n⌋`, by the
    /// deterministic-access design.
    pub fn access_count(&self) -> usize {
        (self.access_fraction * self.n_per_cohort as f64).floor() as usize
    }
}

/// Result of a full simulation: the record stream, the equilibrium each
/// cohort's decisions were driven by, and the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub records: Vec<StudentRecord>,
    pub equilibria: Vec<CohortEquilibrium>,
    pub config: SimulationConfig,
}

/// Equilibrium metadata for one cohort.
#[derive(Debug, Clone, PartialEq)]
pub enum CohortEquilibrium {
    /// Every student in the cohort faces the same equilibrium.
    Shared(EquilibriumSolution),
    /// Sampled cohorts under unknown-access estimation: each student's
    /// threshold depends on their own features, summarized here.
    PerStudent {
        kind: ThresholdKind,
        /// Canonical threshold per student, in record order.
        canonical_thresholds: Vec<f64>,
        /// Number of roots found per student, in record order.
        root_counts: Vec<usize>,
    },
}

fn stream_id(purpose: u64, cohort: usize, student: usize) -> u64 {
    (purpose << 56) | ((cohort as u64) << 32) | student as u64
}

fn student_rng(seed: u64, purpose: u64, cohort: usize, student: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(purpose, cohort, student));
    rng
}

fn noise(variance: f64) -> Normal<f64> {
    Normal::new(0.0, variance.sqrt()).expect("validated variance is positive")
}

/// Draw skills, access, and features for every student; decisions are left
/// unset and estimates are NaN placeholders until the later stages run.
///
/// Within each cohort exactly `⌊C·n⌋` students (the lowest indices) have
/// access. Fixed cohorts share their listed features and draw skill from
/// its exact conditional given them; sampled cohorts draw skill from the
/// prior and features from the noise model. Every student with access draws
/// a test score — whether it is ever taken or reported is decided later.
pub fn generate_population(config: &SimulationConfig) -> Result<Vec<StudentRecord>, SimulateError> {
    config.validate()?;
    let n = config.n_per_cohort;
    let n_access = config.access_count();
    let test_noise = noise(config.params.test_var());

    let make_cohort = |cohort: usize| -> Result<Vec<StudentRecord>, SimulateError> {
        let fixed = match &config.cohorts {
            CohortDesign::FixedProfiles(profiles) => {
                let profile = &profiles[cohort];
                Some((profile, posterior_without_score(&config.params, profile)?))
            }
            CohortDesign::SampledProfiles { .. } => None,
        };
        (0..n)
            .into_par_iter()
            .map(|student| {
                let mut rng =
                    student_rng(config.seed, STREAM_GENERATION, cohort, student);
                let access = student < n_access;
                let (q, others) = match &fixed {
                    Some((profile, conditional)) => {
                        let q = Normal::new(conditional.mean, conditional.std_dev())
                            .expect("posterior std dev is positive")
                            .sample(&mut rng);
                        (q, profile.others.clone())
                    }
                    None => {
                        let q = Normal::new(config.params.mu(), config.params.sigma2().sqrt())
                            .expect("validated prior variance")
                            .sample(&mut rng);
                        let others = config.params.feature_vars()
                            [..config.params.k() - 1]
                            .iter()
                            .map(|&v| q + noise(v).sample(&mut rng))
                            .collect();
                        (q, others)
                    }
                };
                let test_score = access.then(|| q + test_noise.sample(&mut rng));
                Ok(StudentRecord {
                    q,
                    access,
                    takes: false,
                    reports: false,
                    features: FeatureProfile {
                        others,
                        test_score,
                    },
                    estimate: f64::NAN,
                    policy: config.policy.kind,
                    cohort,
                    student,
                })
            })
            .collect()
    };

    let cohorts: Result<Vec<Vec<StudentRecord>>, SimulateError> =
        (0..config.n_cohorts()).map(make_cohort).collect();
    Ok(cohorts?.into_iter().flatten().collect())
}

/// Set `Y` and `X` on every record per the equilibrium's threshold rule and
/// the requirement regime. Students without access never take or report.
pub fn apply_decisions(
    records: &mut [StudentRecord],
    config: &SimulationConfig,
    equilibrium: &EquilibriumSolution,
) -> Result<(), SimulateError> {
    let requirement = config.requirement;
    let mismatched = || SimulateError::MismatchedEquilibrium {
        kind: equilibrium.kind,
        requirement,
    };
    match equilibrium.kind {
        ThresholdKind::ScoreThreshold => {
            if requirement != RequirementPolicy::ReportOptional {
                return Err(mismatched());
            }
            let threshold = equilibrium
                .canonical
                .ok_or(SimulateError::MissingThreshold {
                    kind: equilibrium.kind,
                })?;
            for r in records {
                r.takes = r.access;
                r.reports = r.access
                    && r.features
                        .test_score
                        .is_some_and(|score| score >= threshold);
            }
        }
        ThresholdKind::SkillThreshold => {
            if requirement != RequirementPolicy::ReportIfTake {
                return Err(mismatched());
            }
            let cutoff = equilibrium
                .canonical
                .ok_or(SimulateError::MissingThreshold {
                    kind: equilibrium.kind,
                })?;
            for r in records {
                let takes = r.access && r.q >= cutoff;
                r.takes = takes;
                r.reports = takes;
            }
        }
        ThresholdKind::FullReporting => {
            for r in records {
                r.takes = r.access;
                r.reports = r.access;
            }
        }
        ThresholdKind::NoReporting => match requirement {
            RequirementPolicy::ReportOptional => {
                for r in records {
                    r.takes = r.access;
                    r.reports = false;
                }
            }
            RequirementPolicy::ReportIfTake => {
                for r in records {
                    r.takes = false;
                    r.reports = false;
                }
            }
            RequirementPolicy::ReportIfAccess => return Err(mismatched()),
        },
    }
    Ok(())
}

/// Resolve the equilibrium a cohort's decisions follow, for policies where
/// one equilibrium serves the whole cohort.
///
/// Known-access estimation (and resampling, which behaves identically on
/// the equilibrium path) admits only full reporting. Test-blank estimation
/// leaves every student indifferent; the tie is broken toward full
/// reporting so the requirement regimes stay comparable. The equalizing
/// policy unravels reporting completely. Unknown-access Bayesian estimation
/// requires an actual solve in the regime's variable.
pub fn resolve_cohort_equilibrium(
    config: &SimulationConfig,
    profile: &FeatureProfile,
) -> Result<EquilibriumSolution, SimulateError> {
    let c = config.access_fraction;
    match config.policy.kind {
        PolicyKind::BoKnownZ | PolicyKind::Resampling | PolicyKind::TestBlank => Ok(
            known_access_equilibrium(&config.params, profile, config.requirement, c)?,
        ),
        PolicyKind::Equalizing => Ok(EquilibriumSolution {
            kind: ThresholdKind::NoReporting,
            roots: Vec::new(),
            canonical: None,
            residuals: Vec::new(),
            access_fraction: c,
            profile: profile.clone(),
        }),
        PolicyKind::BoUnknownZ => match config.requirement {
            RequirementPolicy::ReportOptional => Ok(solve_report_threshold(
                &config.params,
                profile,
                c,
                config.solver_tol,
            )?),
            RequirementPolicy::ReportIfTake => Ok(solve_taking_threshold(
                &config.params,
                profile,
                c,
                config.solver_tol,
            )?),
            RequirementPolicy::ReportIfAccess => Err(SimulateError::UnenforceableRequirement {
                policy: config.policy.kind,
                requirement: config.requirement,
            }),
        },
    }
}

/// The policy spec used for a cohort, given its resolved equilibrium.
fn cohort_policy_spec(
    config: &SimulationConfig,
    cohort_profile: Option<&FeatureProfile>,
    equilibrium: &EquilibriumSolution,
) -> Result<PolicySpec, SimulateError> {
    Ok(match config.policy.kind {
        PolicyKind::BoKnownZ => PolicySpec::BoKnownZ,
        PolicyKind::Resampling => PolicySpec::Resampling,
        PolicyKind::TestBlank => PolicySpec::TestBlank,
        PolicyKind::BoUnknownZ => PolicySpec::BoUnknownZ {
            equilibrium: equilibrium.clone(),
        },
        PolicyKind::Equalizing => {
            let target = match (&config.policy.equalizing_target, cohort_profile) {
                (Some(target), _) => *target,
                (None, Some(profile)) => {
                    crate::gauss::predictive_test_score(&config.params, profile)?
                }
                // Sampled cohorts have no shared profile; default to the
                // population score marginal.
                (None, None) => Gaussian {
                    mean: config.params.mu(),
                    variance: config.params.sigma2() + config.params.test_var(),
                },
            };
            PolicySpec::Equalizing { target }
        }
    })
}

/// Run the estimation policy over a cohort's records, in place.
fn estimate_cohort(
    records: &mut [StudentRecord],
    config: &SimulationConfig,
    spec: &PolicySpec,
) -> Result<(), SimulateError> {
    // Policies that observe access receive it; unknown-access policies and
    // the test-blank policy get an access-free info set.
    let reveals_access = matches!(
        config.policy.kind,
        PolicyKind::BoKnownZ | PolicyKind::Resampling
    );
    let estimates: Result<Vec<f64>, SimulateError> = records
        .par_iter()
        .map(|r| {
            let profile = FeatureProfile::new(r.features.others.clone());
            let access = reveals_access.then_some(r.access);
            let info = if r.reports {
                let score = r
                    .features
                    .test_score
                    .expect("reporting students have a realized score");
                InfoSet::reported(profile, score, access)?
            } else {
                InfoSet::withheld(profile, access)?
            };
            let mut rng = student_rng(config.seed, STREAM_ESTIMATION, r.cohort, r.student);
            Ok(estimate(spec, &config.params, &info, &mut rng)?)
        })
        .collect();
    for (r, est) in records.iter_mut().zip(estimates?) {
        r.estimate = est;
    }
    Ok(())
}

/// Full pipeline: solve each cohort's equilibrium, generate its population,
/// apply decisions, and estimate every student. Deterministic under a fixed
/// config, regardless of thread count.
pub fn run(config: &SimulationConfig) -> Result<SimulationResult, SimulateError> {
    config.validate()?;
    let mut records = generate_population(config)?;
    let n = config.n_per_cohort;
    let mut equilibria = Vec::with_capacity(config.n_cohorts());

    let per_student_mode = config.policy.kind == PolicyKind::BoUnknownZ
        && matches!(config.cohorts, CohortDesign::SampledProfiles { .. });

    if per_student_mode {
        // Each student's threshold and pool depend on their own features:
        // solve, decide, and estimate per student.
        for cohort in 0..config.n_cohorts() {
            let slice = &mut records[cohort * n..(cohort + 1) * n];
            let solved: Result<Vec<(f64, EquilibriumSolution)>, SimulateError> = slice
                .par_iter()
                .map(|r| {
                    let profile = FeatureProfile::new(r.features.others.clone());
                    let sol = match config.requirement {
                        RequirementPolicy::ReportOptional => solve_report_threshold(
                            &config.params,
                            &profile,
                            config.access_fraction,
                            config.solver_tol,
                        )?,
                        RequirementPolicy::ReportIfTake => solve_taking_threshold(
                            &config.params,
                            &profile,
                            config.access_fraction,
                            config.solver_tol,
                        )?,
                        RequirementPolicy::ReportIfAccess => {
                            return Err(SimulateError::UnenforceableRequirement {
                                policy: config.policy.kind,
                                requirement: config.requirement,
                            })
                        }
                    };
                    let threshold = sol.canonical.expect("solver always returns a root");
                    Ok((threshold, sol))
                })
                .collect();
            let solved = solved?;

            for (r, (threshold, sol)) in slice.iter_mut().zip(&solved) {
                match sol.kind {
                    ThresholdKind::ScoreThreshold => {
                        r.takes = r.access;
                        r.reports = r.access
                            && r.features
                                .test_score
                                .is_some_and(|score| score >= *threshold);
                    }
                    ThresholdKind::SkillThreshold => {
                        let takes = r.access && r.q >= *threshold;
                        r.takes = takes;
                        r.reports = takes;
                    }
                    _ => unreachable!("per-student solves return threshold kinds"),
                }
            }

            let estimates: Result<Vec<f64>, SimulateError> = slice
                .par_iter()
                .zip(&solved)
                .map(|(r, (_, sol))| {
                    let profile = FeatureProfile::new(r.features.others.clone());
                    let info = if r.reports {
                        let score = r
                            .features
                            .test_score
                            .expect("reporting students have a realized score");
                        InfoSet::reported(profile, score, None)?
                    } else {
                        InfoSet::withheld(profile, None)?
                    };
                    let spec = PolicySpec::BoUnknownZ {
                        equilibrium: sol.clone(),
                    };
                    let mut rng =
                        student_rng(config.seed, STREAM_ESTIMATION, r.cohort, r.student);
                    Ok(estimate(&spec, &config.params, &info, &mut rng)?)
                })
                .collect();
            for (r, est) in slice.iter_mut().zip(estimates?) {
                r.estimate = est;
            }

            equilibria.push(CohortEquilibrium::PerStudent {
                kind: solved[0].1.kind,
                canonical_thresholds: solved.iter().map(|(t, _)| *t).collect(),
                root_counts: solved.iter().map(|(_, s)| s.roots.len()).collect(),
            });
        }
    } else {
        for cohort in 0..config.n_cohorts() {
            let slice = &mut records[cohort * n..(cohort + 1) * n];
            let cohort_profile = match &config.cohorts {
                CohortDesign::FixedProfiles(profiles) => Some(&profiles[cohort]),
                CohortDesign::SampledProfiles { .. } => None,
            };
            // Sampled cohorts under shared-equilibrium policies only reach
            // the degenerate kinds, whose decisions ignore the profile; an
            // empty stand-in profile keeps the solution well-formed.
            let stand_in = FeatureProfile::new(vec![0.0; config.params.k() - 1]);
            let profile = cohort_profile.unwrap_or(&stand_in);
            let equilibrium = resolve_cohort_equilibrium(config, profile)?;
            apply_decisions(slice, config, &equilibrium)?;
            let spec = cohort_policy_spec(config, cohort_profile, &equilibrium)?;
            estimate_cohort(slice, config, &spec)?;
            equilibria.push(CohortEquilibrium::Shared(equilibrium));
        }
    }

    Ok(SimulationResult {
        records,
        equilibria,
        config: config.clone(),
    })
}
