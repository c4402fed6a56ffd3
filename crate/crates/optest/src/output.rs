//! Tabular output: schema-stable CSV files and the run manifest.
//!
//! Column order is fixed and documented here; floats are serialized with 17
//! significant digits so a round trip through the text is exact; booleans
//! are `0`/`1`; absent values are empty fields. Given the same validated
//! config and seed, every CSV is byte-identical across runs and thread
//! counts. The manifest carries the run's provenance (config hash, seed,
//! thread count, wall-clock timestamps, solver diagnostics) and is the one
//! output allowed to differ between otherwise identical runs.

use crate::audit::FairnessReport;
use crate::equilibrium::DynamicsTrace;
use crate::simulate::{CohortEquilibrium, SimulationResult};
use serde::Serialize;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

/// Exact float serialization: 17 significant digits round-trip `f64`.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

fn fmt_bool(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

fn open_csv(path: &Path) -> Result<csv::Writer<File>, anyhow::Error> {
    let file = File::create(path)
        .map_err(|e| anyhow::anyhow!("failed to create {}: {e}", path.display()))?;
    Ok(csv::Writer::from_writer(file))
}

/// `records.csv`: one row per student.
///
/// Columns: `cohort, student, q, z, y, x, theta_1..theta_{K-1},
/// test_score, estimate, policy`. `test_score` is empty without access.
pub fn write_records_csv(path: &Path, result: &SimulationResult) -> Result<(), anyhow::Error> {
    let mut w = open_csv(path)?;
    let k = result.config.params.k();
    let mut header: Vec<String> = vec![
        "cohort".into(),
        "student".into(),
        "q".into(),
        "z".into(),
        "y".into(),
        "x".into(),
    ];
    for i in 1..k {
        header.push(format!("theta_{i}"));
    }
    header.push("test_score".into());
    header.push("estimate".into());
    header.push("policy".into());
    w.write_record(&header)?;
    for r in &result.records {
        let mut row: Vec<String> = vec![
            r.cohort.to_string(),
            r.student.to_string(),
            fmt_float(r.q),
            fmt_bool(r.access).into(),
            fmt_bool(r.takes).into(),
            fmt_bool(r.reports).into(),
        ];
        for theta in &r.features.others {
            row.push(fmt_float(*theta));
        }
        row.push(r.features.test_score.map(fmt_float).unwrap_or_default());
        row.push(fmt_float(r.estimate));
        row.push(r.policy.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `thresholds.csv`: one row per root per cohort with a shared equilibrium.
///
/// Columns: `cohort, kind, access_fraction, n_roots, root_index, root,
/// residual, is_canonical`. Degenerate kinds (full/no reporting) write one
/// row with `n_roots = 0` and the root fields empty. Cohorts with
/// per-student equilibria are summarized in the manifest, not here.
pub fn write_thresholds_csv(
    path: &Path,
    access_fraction: f64,
    equilibria: &[CohortEquilibrium],
) -> Result<(), anyhow::Error> {
    let mut w = open_csv(path)?;
    w.write_record([
        "cohort",
        "kind",
        "access_fraction",
        "n_roots",
        "root_index",
        "root",
        "residual",
        "is_canonical",
    ])?;
    for (cohort, eq) in equilibria.iter().enumerate() {
        let CohortEquilibrium::Shared(sol) = eq else {
            continue;
        };
        if sol.roots.is_empty() {
            w.write_record([
                cohort.to_string(),
                sol.kind.to_string(),
                fmt_float(access_fraction),
                "0".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
            continue;
        }
        for (idx, (root, residual)) in sol.roots.iter().zip(&sol.residuals).enumerate() {
            let is_canonical = sol.canonical == Some(*root);
            w.write_record([
                cohort.to_string(),
                sol.kind.to_string(),
                fmt_float(access_fraction),
                sol.roots.len().to_string(),
                idx.to_string(),
                fmt_float(*root),
                fmt_float(*residual),
                fmt_bool(is_canonical).into(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `dynamics.csv`: one row per best-response iteration per cohort.
///
/// Columns: `cohort, iteration, threshold, reporting_fraction,
/// withhold_estimate, outcome`; the outcome is repeated on every row of a
/// cohort's trace.
pub fn write_dynamics_csv(
    path: &Path,
    traces: &[(usize, DynamicsTrace)],
) -> Result<(), anyhow::Error> {
    let mut w = open_csv(path)?;
    w.write_record([
        "cohort",
        "iteration",
        "threshold",
        "reporting_fraction",
        "withhold_estimate",
        "outcome",
    ])?;
    for (cohort, trace) in traces {
        for (iteration, step) in trace.iterations.iter().enumerate() {
            w.write_record([
                cohort.to_string(),
                iteration.to_string(),
                fmt_float(step.threshold),
                fmt_float(step.reporting_fraction),
                fmt_float(step.withhold_estimate),
                trace.converged_to.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `audit.csv`: a summary row per report followed by one row per stratum.
///
/// Columns: `notion, method, row_type, stratum, statistic, critical_value,
/// n_left, n_right, verdict`. Summary rows put the conditioning
/// description in the stratum column and leave the counts empty; analytic
/// strata have zero counts.
pub fn write_audit_csv(path: &Path, reports: &[FairnessReport]) -> Result<(), anyhow::Error> {
    let mut w = open_csv(path)?;
    w.write_record([
        "notion",
        "method",
        "row_type",
        "stratum",
        "statistic",
        "critical_value",
        "n_left",
        "n_right",
        "verdict",
    ])?;
    for report in reports {
        w.write_record([
            report.notion.to_string(),
            report.method.to_string(),
            "summary".into(),
            report.conditioning.clone(),
            fmt_float(report.statistic),
            fmt_float(report.critical_value),
            String::new(),
            String::new(),
            report.verdict.to_string(),
        ])?;
        for s in &report.strata {
            w.write_record([
                report.notion.to_string(),
                s.method.to_string(),
                "stratum".into(),
                s.label.clone(),
                fmt_float(s.statistic),
                fmt_float(s.critical_value),
                s.n_left.to_string(),
                s.n_right.to_string(),
                s.verdict.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `summary.csv`: flat `(section, key, value)` rows for quick inspection.
pub fn write_summary_csv(
    path: &Path,
    rows: &[(String, String, String)],
) -> Result<(), anyhow::Error> {
    let mut w = open_csv(path)?;
    w.write_record(["section", "key", "value"])?;
    for (section, key, value) in rows {
        w.write_record([section, key, value])?;
    }
    w.flush()?;
    Ok(())
}

/// Solver provenance for one cohort, as recorded in the manifest.
#[derive(Debug, Serialize)]
pub struct SolverDiagnostic {
    pub cohort: usize,
    pub kind: String,
    /// False when the cohort ran per-student solves.
    pub shared: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_roots: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canonical: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_students: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_max: Option<f64>,
}

impl SolverDiagnostic {
    pub fn from_equilibrium(cohort: usize, eq: &CohortEquilibrium) -> Self {
        match eq {
            CohortEquilibrium::Shared(sol) => SolverDiagnostic {
                cohort,
                kind: sol.kind.to_string(),
                shared: true,
                n_roots: Some(sol.roots.len()),
                canonical: sol.canonical,
                max_abs_residual: sol
                    .residuals
                    .iter()
                    .map(|r| r.abs())
                    .fold(None, |acc: Option<f64>, r| {
                        Some(acc.map_or(r, |a| a.max(r)))
                    }),
                n_students: None,
                threshold_min: None,
                threshold_max: None,
            },
            CohortEquilibrium::PerStudent {
                kind,
                canonical_thresholds,
                ..
            } => SolverDiagnostic {
                cohort,
                kind: kind.to_string(),
                shared: false,
                n_roots: None,
                canonical: None,
                max_abs_residual: None,
                n_students: Some(canonical_thresholds.len()),
                threshold_min: canonical_thresholds.iter().copied().reduce(f64::min),
                threshold_max: canonical_thresholds.iter().copied().reduce(f64::max),
            },
        }
    }
}

/// `manifest.json`: provenance for one CLI invocation. Timestamps are Unix
/// seconds; everything else is reproducible from config + seed.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    pub solver: Vec<SolverDiagnostic>,
    /// File names written by this invocation, manifest excluded.
    pub outputs: Vec<String>,
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), anyhow::Error> {
    let mut file = File::create(path)
        .map_err(|e| anyhow::anyhow!("failed to create {}: {e}", path.display()))?;
    let json = serde_json::to_string_pretty(manifest)?;
    file.write_all(json.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
// Reference values carry every digit the arbitrating computation printed.
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for v in [
            0.0,
            -0.33806608777774749,
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            1.7976931348623157e308,
            -2.2250738585072014e-308,
        ] {
            let s = fmt_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_float(f64::INFINITY), "inf");
        assert_eq!(fmt_float(f64::NEG_INFINITY), "-inf");
    }
}
