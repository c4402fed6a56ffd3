//! TOML run configuration: schema, defaults, validation, canonical hash.
//!
//! One file fully determines a run. Required sections are `[model]`,
//! `access_fraction`, `[policy]`, `requirement`, and `[cohorts]`;
//! `[simulation]`, `[solver]`, `[audit]`, and `[dynamics]` carry documented
//! defaults (n = 10⁵, seed = 0, tol = 1e-9, α = 0.01, max_iter = 500).
//! Validation errors name the offending field path. The canonical hash is
//! taken over the validated configuration (seed override applied), so two
//! files that differ only in formatting or section order hash identically.

use crate::audit::FairnessNotion;
use crate::equilibrium::RequirementPolicy;
use crate::gauss::{FeatureProfile, Gaussian, ModelParams};
use crate::policy::PolicyKind;
use crate::simulate::{CohortDesign, PolicyChoice, SimulationConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_N: usize = 100_000;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_MAX_ITER: usize = 500;

const POLICY_CHOICES: &str = "bo_known_z, bo_unknown_z, resampling, test_blank, equalizing";
const REQUIREMENT_CHOICES: &str = "report_optional, report_if_take, report_if_access";
const MODE_CHOICES: &str = "fixed, sampled";
const NOTION_CHOICES: &str = "latent_skill, observable, demographic, test_blank";

/// Errors from reading, parsing, or validating a configuration file. Every
/// message renders on one line; validation messages start with the field
/// path.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error{at}: {message}")]
    Parse { at: String, message: String },
    #[error("{path}: {detail}")]
    Invalid { path: String, detail: String },
}

fn invalid(path: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Raw schema (what the TOML file contains)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    access_fraction: f64,
    policy: RawPolicy,
    requirement: String,
    cohorts: RawCohorts,
    #[serde(default)]
    simulation: RawSimulation,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    audit: RawAudit,
    #[serde(default)]
    dynamics: RawDynamics,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    mu: f64,
    sigma2: f64,
    feature_vars: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    name: String,
    target_mean: Option<f64>,
    target_variance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCohorts {
    mode: String,
    profiles: Option<Vec<Vec<f64>>>,
    n_profiles: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    n: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAudit {
    alpha: Option<f64>,
    notions: Option<Vec<String>>,
    expected: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDynamics {
    init_threshold: Option<f64>,
    max_iter: Option<usize>,
}

// ---------------------------------------------------------------------------
// Validated configuration
// ---------------------------------------------------------------------------

/// Audit settings with defaults applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSettings {
    pub alpha: f64,
    /// Notions to audit, in configured order.
    pub notions: Vec<FairnessNotion>,
    /// Notions the run asserts must come back Fair (CI gate).
    pub expected_fair: Vec<FairnessNotion>,
}

/// Best-response iteration settings with defaults applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsSettings {
    /// Starting threshold; absent means the cohort's predictive mean.
    pub init_threshold: Option<f64>,
    pub max_iter: usize,
}

/// A fully validated run description; the unit the canonical hash covers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppConfig {
    pub simulation: SimulationConfig,
    pub audit: AuditSettings,
    pub dynamics: DynamicsSettings,
}

/// Read, parse, and validate a configuration file.
pub fn parse_config(path: &Path) -> Result<AppConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

/// Parse and validate configuration text.
pub fn parse_config_str(text: &str) -> Result<AppConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        at: e
            .span()
            .map(|s| format!(" at bytes {}..{}", s.start, s.end))
            .unwrap_or_default(),
        message: e.message().to_string(),
    })?;
    validate(raw)
}

/// Hex SHA-256 of the canonical serialization of a validated config.
pub fn config_hash(config: &AppConfig) -> String {
    let canonical =
        serde_json::to_string(config).expect("validated config serializes without error");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(hex, "{byte:02x}").expect("writing to a String cannot fail");
    }
    hex
}

fn validate(raw: RawConfig) -> Result<AppConfig, ConfigError> {
    // [model]
    if !raw.model.mu.is_finite() {
        return Err(invalid("model.mu", "must be finite"));
    }
    if !(raw.model.sigma2.is_finite() && raw.model.sigma2 > 0.0) {
        return Err(invalid(
            "model.sigma2",
            format!("must be a positive finite variance, got {}", raw.model.sigma2),
        ));
    }
    if raw.model.feature_vars.is_empty() {
        return Err(invalid(
            "model.feature_vars",
            "at least one feature variance is required (the last entry is the test)",
        ));
    }
    for (i, v) in raw.model.feature_vars.iter().enumerate() {
        if !(v.is_finite() && *v > 0.0) {
            return Err(invalid(
                &format!("model.feature_vars[{i}]"),
                format!("must be a positive finite variance, got {v}"),
            ));
        }
    }
    let params = ModelParams::new(raw.model.mu, raw.model.sigma2, raw.model.feature_vars)
        .expect("model fields checked above");
    let k = params.k();

    // access_fraction
    let c = raw.access_fraction;
    if !(c.is_finite() && c > 0.0 && c < 1.0) {
        return Err(invalid(
            "access_fraction",
            format!("must lie strictly inside (0,1), got {c}"),
        ));
    }

    // [policy]
    let kind = match raw.policy.name.as_str() {
        "bo_known_z" => PolicyKind::BoKnownZ,
        "bo_unknown_z" => PolicyKind::BoUnknownZ,
        "resampling" => PolicyKind::Resampling,
        "test_blank" => PolicyKind::TestBlank,
        "equalizing" => PolicyKind::Equalizing,
        other => {
            return Err(invalid(
                "policy.name",
                format!("unknown policy \"{other}\"; choose one of {POLICY_CHOICES}"),
            ))
        }
    };
    let equalizing_target = match (raw.policy.target_mean, raw.policy.target_variance) {
        (None, None) => None,
        (Some(_), None) => {
            return Err(invalid(
                "policy.target_variance",
                "required when policy.target_mean is set",
            ))
        }
        (None, Some(_)) => {
            return Err(invalid(
                "policy.target_mean",
                "required when policy.target_variance is set",
            ))
        }
        (Some(mean), Some(variance)) => {
            if kind != PolicyKind::Equalizing {
                return Err(invalid(
                    "policy.target_mean",
                    "a target distribution is only valid for the equalizing policy",
                ));
            }
            if !mean.is_finite() {
                return Err(invalid("policy.target_mean", "must be finite"));
            }
            if !(variance.is_finite() && variance > 0.0) {
                return Err(invalid(
                    "policy.target_variance",
                    format!("must be a positive finite variance, got {variance}"),
                ));
            }
            Some(Gaussian::new(mean, variance).expect("checked above"))
        }
    };

    // requirement
    let requirement = match raw.requirement.as_str() {
        "report_optional" => RequirementPolicy::ReportOptional,
        "report_if_take" => RequirementPolicy::ReportIfTake,
        "report_if_access" => RequirementPolicy::ReportIfAccess,
        other => {
            return Err(invalid(
                "requirement",
                format!("unknown requirement \"{other}\"; choose one of {REQUIREMENT_CHOICES}"),
            ))
        }
    };
    if requirement == RequirementPolicy::ReportIfAccess
        && matches!(kind, PolicyKind::BoUnknownZ | PolicyKind::Equalizing)
    {
        return Err(invalid(
            "requirement",
            format!("report_if_access cannot be enforced by {kind}, which does not observe access"),
        ));
    }

    // [cohorts]
    let cohorts = match raw.cohorts.mode.as_str() {
        "fixed" => {
            if raw.cohorts.n_profiles.is_some() {
                return Err(invalid(
                    "cohorts.n_profiles",
                    "only valid when mode = \"sampled\"",
                ));
            }
            let profiles = raw
                .cohorts
                .profiles
                .ok_or_else(|| invalid("cohorts.profiles", "required when mode = \"fixed\""))?;
            if profiles.is_empty() {
                return Err(invalid("cohorts.profiles", "at least one profile is required"));
            }
            let mut checked = Vec::with_capacity(profiles.len());
            for (i, features) in profiles.into_iter().enumerate() {
                if features.len() != k - 1 {
                    return Err(invalid(
                        &format!("cohorts.profiles[{i}]"),
                        format!(
                            "expected {} non-test feature values, got {}",
                            k - 1,
                            features.len()
                        ),
                    ));
                }
                if let Some(v) = features.iter().find(|v| !v.is_finite()) {
                    return Err(invalid(
                        &format!("cohorts.profiles[{i}]"),
                        format!("feature values must be finite, got {v}"),
                    ));
                }
                checked.push(FeatureProfile::new(features));
            }
            CohortDesign::FixedProfiles(checked)
        }
        "sampled" => {
            if raw.cohorts.profiles.is_some() {
                return Err(invalid(
                    "cohorts.profiles",
                    "only valid when mode = \"fixed\"",
                ));
            }
            let n_profiles = raw
                .cohorts
                .n_profiles
                .ok_or_else(|| invalid("cohorts.n_profiles", "required when mode = \"sampled\""))?;
            if n_profiles == 0 {
                return Err(invalid("cohorts.n_profiles", "must be at least 1"));
            }
            CohortDesign::SampledProfiles { n_profiles }
        }
        other => {
            return Err(invalid(
                "cohorts.mode",
                format!("unknown mode \"{other}\"; choose one of {MODE_CHOICES}"),
            ))
        }
    };

    // [simulation]
    let n = raw.simulation.n.unwrap_or(DEFAULT_N);
    if n == 0 {
        return Err(invalid("simulation.n", "must be at least 1"));
    }
    let seed = raw.simulation.seed.unwrap_or(DEFAULT_SEED);

    // [solver]
    let tol = raw.solver.tol.unwrap_or(DEFAULT_TOL);
    if !(tol.is_finite() && tol > 0.0) {
        return Err(invalid(
            "solver.tol",
            format!("must be a positive finite tolerance, got {tol}"),
        ));
    }

    // [audit]
    let alpha = raw.audit.alpha.unwrap_or(DEFAULT_ALPHA);
    if !(alpha.is_finite() && alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(
            "audit.alpha",
            format!("must lie strictly inside (0,1), got {alpha}"),
        ));
    }
    let parse_notion = |name: &str, path: &str| -> Result<FairnessNotion, ConfigError> {
        match name {
            "latent_skill" => Ok(FairnessNotion::LatentSkill),
            "observable" => Ok(FairnessNotion::Observable),
            "demographic" => Ok(FairnessNotion::Demographic),
            "test_blank" => Ok(FairnessNotion::TestBlank),
            other => Err(invalid(
                path,
                format!("unknown notion \"{other}\"; choose one of {NOTION_CHOICES}"),
            )),
        }
    };
    let notions = match raw.audit.notions {
        Some(names) => {
            if names.is_empty() {
                return Err(invalid("audit.notions", "at least one notion is required"));
            }
            names
                .iter()
                .map(|n| parse_notion(n, "audit.notions"))
                .collect::<Result<Vec<_>, _>>()?
        }
        // Defaults by cohort mode: per-profile notions need fixed cohorts,
        // the demographic notion needs sampled ones.
        None => match &cohorts {
            CohortDesign::FixedProfiles(_) => vec![
                FairnessNotion::LatentSkill,
                FairnessNotion::Observable,
                FairnessNotion::TestBlank,
            ],
            CohortDesign::SampledProfiles { .. } => {
                vec![FairnessNotion::Demographic, FairnessNotion::TestBlank]
            }
        },
    };
    for notion in &notions {
        let compatible = match notion {
            FairnessNotion::LatentSkill | FairnessNotion::Observable => {
                matches!(cohorts, CohortDesign::FixedProfiles(_))
            }
            FairnessNotion::Demographic => {
                matches!(cohorts, CohortDesign::SampledProfiles { .. })
            }
            FairnessNotion::TestBlank => true,
        };
        if !compatible {
            return Err(invalid(
                "audit.notions",
                format!("\"{notion}\" requires cohorts.mode = \"{}\"", match notion {
                    FairnessNotion::Demographic => "sampled",
                    _ => "fixed",
                }),
            ));
        }
    }
    let expected_fair = match raw.audit.expected {
        Some(names) => {
            let parsed = names
                .iter()
                .map(|n| parse_notion(n, "audit.expected"))
                .collect::<Result<Vec<_>, _>>()?;
            for notion in &parsed {
                if !notions.contains(notion) {
                    return Err(invalid(
                        "audit.expected",
                        format!("\"{notion}\" is not among the audited notions"),
                    ));
                }
            }
            parsed
        }
        None => Vec::new(),
    };

    // [dynamics]
    if let Some(init) = raw.dynamics.init_threshold {
        if init.is_nan() {
            return Err(invalid("dynamics.init_threshold", "must not be NaN"));
        }
    }
    let max_iter = raw.dynamics.max_iter.unwrap_or(DEFAULT_MAX_ITER);
    if max_iter == 0 {
        return Err(invalid("dynamics.max_iter", "must be at least 1"));
    }

    let simulation = SimulationConfig {
        params,
        access_fraction: c,
        policy: PolicyChoice {
            kind,
            equalizing_target,
        },
        requirement,
        cohorts,
        n_per_cohort: n,
        seed,
        solver_tol: tol,
    };
    // Field checks above cover the domain invariants; this guards against
    // the two layers drifting apart.
    simulation
        .validate()
        .map_err(|e| invalid("config", e.to_string()))?;

    Ok(AppConfig {
        simulation,
        audit: AuditSettings {
            alpha,
            notions,
            expected_fair,
        },
        dynamics: DynamicsSettings {
            init_threshold: raw.dynamics.init_threshold,
            max_iter,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        access_fraction = 0.5
        requirement = "report_optional"

        [model]
        mu = 0.0
        sigma2 = 1.0
        feature_vars = [1.0, 1.0]

        [policy]
        name = "bo_unknown_z"

        [cohorts]
        mode = "fixed"
        profiles = [[0.0]]
    "#;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let config = parse_config_str(MINIMAL).unwrap();
        assert_eq!(config.simulation.n_per_cohort, DEFAULT_N);
        assert_eq!(config.simulation.seed, DEFAULT_SEED);
        assert_eq!(config.simulation.solver_tol, DEFAULT_TOL);
        assert_eq!(config.audit.alpha, DEFAULT_ALPHA);
        assert_eq!(config.dynamics.max_iter, DEFAULT_MAX_ITER);
        assert_eq!(config.dynamics.init_threshold, None);
        assert_eq!(
            config.audit.notions,
            vec![
                FairnessNotion::LatentSkill,
                FairnessNotion::Observable,
                FairnessNotion::TestBlank
            ]
        );
        assert!(config.audit.expected_fair.is_empty());
    }

    #[test]
    fn out_of_range_access_fraction_names_the_field() {
        let text = MINIMAL.replace("access_fraction = 0.5", "access_fraction = 1.2");
        let err = parse_config_str(&text).unwrap_err();
        let message = err.to_string();
        assert!(message.starts_with("access_fraction:"), "{message}");
        assert!(message.contains("1.2"), "{message}");
    }

    #[test]
    fn unknown_policy_enumerates_choices() {
        let text = MINIMAL.replace("bo_unknown_z", "p_magic");
        let message = parse_config_str(&text).unwrap_err().to_string();
        assert!(message.starts_with("policy.name:"), "{message}");
        assert!(message.contains("p_magic"), "{message}");
        for choice in [
            "bo_known_z",
            "bo_unknown_z",
            "resampling",
            "test_blank",
            "equalizing",
        ] {
            assert!(message.contains(choice), "{message}");
        }
    }

    #[test]
    fn missing_required_field_is_a_parse_error_naming_it() {
        let text = MINIMAL.replace("requirement = \"report_optional\"", "");
        let message = parse_config_str(&text).unwrap_err().to_string();
        assert!(message.contains("requirement"), "{message}");
        assert!(!message.contains('\n'), "errors must be one line: {message}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[extra]\nx = 1\n");
        let message = parse_config_str(&text).unwrap_err().to_string();
        assert!(message.contains("extra"), "{message}");
    }

    #[test]
    fn profile_arity_errors_name_the_entry() {
        let text = MINIMAL.replace("profiles = [[0.0]]", "profiles = [[0.0], [0.0, 1.0]]");
        let message = parse_config_str(&text).unwrap_err().to_string();
        assert!(message.starts_with("cohorts.profiles[1]:"), "{message}");
    }

    #[test]
    fn notion_mode_compatibility_is_enforced() {
        let text = format!("{MINIMAL}\n[audit]\nnotions = [\"demographic\"]\n");
        let message = parse_config_str(&text).unwrap_err().to_string();
        assert!(message.starts_with("audit.notions:"), "{message}");
        assert!(message.contains("sampled"), "{message}");
    }

    #[test]
    fn expected_must_be_audited() {
        let text = format!(
            "{MINIMAL}\n[audit]\nnotions = [\"observable\"]\nexpected = [\"test_blank\"]\n"
        );
        let message = parse_config_str(&text).unwrap_err().to_string();
        assert!(message.starts_with("audit.expected:"), "{message}");
    }

    #[test]
    fn target_requires_equalizing_policy() {
        let text = MINIMAL.replace(
            "name = \"bo_unknown_z\"",
            "name = \"resampling\"\ntarget_mean = 0.0\ntarget_variance = 1.0",
        );
        let message = parse_config_str(&text).unwrap_err().to_string();
        assert!(message.starts_with("policy.target_mean:"), "{message}");
    }

    #[test]
    fn unenforceable_requirement_is_rejected_with_path() {
        let text = MINIMAL.replace("report_optional", "report_if_access");
        let message = parse_config_str(&text).unwrap_err().to_string();
        assert!(message.starts_with("requirement:"), "{message}");
    }

    #[test]
    fn hash_is_stable_under_reformatting_and_moves_with_content() {
        let a = parse_config_str(MINIMAL).unwrap();
        // Same content, different section order and spacing.
        let reordered = r#"
            requirement = "report_optional"
            access_fraction = 0.5

            [cohorts]
            profiles = [[0.0]]
            mode = "fixed"

            [policy]
            name = "bo_unknown_z"

            [model]
            feature_vars = [1.0, 1.0]
            sigma2 = 1.0
            mu = 0.0
        "#;
        let b = parse_config_str(reordered).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));

        let c = parse_config_str(&MINIMAL.replace("0.5", "0.6")).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
