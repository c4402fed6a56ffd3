//! `optest`: equilibria, simulations, and fairness audits for the
//! test-optional reporting game, driven by one TOML config per run.
//!
//! Exit codes: 0 success; 1 runtime failure; 2 configuration error; 3 an
//! audited notion asserted as expected-Fair came back Unfair; 4 solver
//! non-convergence. Every failure prints a single machine-parsable line to
//! stderr, prefixed `error[<class>]:`.

use clap::{Args, Parser, Subcommand};
use optest::audit::{
    audit_demographic, audit_latent, audit_observable, audit_test_blank, FairnessNotion,
    FairnessReport, SplitBy, Verdict,
};
use optest::config::{config_hash, parse_config, AppConfig, ConfigError};
use optest::equilibrium::{
    best_response_dynamics, DynamicsOutcome, DynamicsTrace, EquilibriumError,
};
use optest::gauss::{predictive_test_score, FeatureProfile};
use optest::output::{
    fmt_float, write_audit_csv, write_dynamics_csv, write_records_csv, write_summary_csv,
    write_thresholds_csv, write_manifest, RunManifest, SolverDiagnostic,
};
use optest::policy::PolicyKind;
use optest::simulate::{
    resolve_cohort_equilibrium, run, CohortDesign, CohortEquilibrium, SimulateError,
    SimulationResult,
};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(
    name = "optest",
    version,
    about = "Equilibria, simulations, and fairness audits for test-optional score reporting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve each cohort's reporting equilibrium and tabulate the roots
    Solve(CommonArgs),
    /// Generate a population, apply equilibrium decisions, estimate skills
    Simulate(CommonArgs),
    /// Run the configured fairness audits over a fresh simulation
    Audit(CommonArgs),
    /// Iterate best-response dynamics from a starting threshold
    Dynamics(CommonArgs),
    /// Summarize a simulation and its audits in one flat table
    Report(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing
    #[arg(long, default_value = "optest_out")]
    out: PathBuf,
    /// Override the configured RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (fallback: OPTEST_THREADS env var, then all cores)
    #[arg(long)]
    threads: Option<usize>,
}

/// Failure classes, each with its exit code and stderr prefix.
enum AppError {
    Config(ConfigError),
    Solver(String),
    ExpectedFair(String),
    Runtime(anyhow::Error),
}

impl AppError {
    fn class(&self) -> &'static str {
        match self {
            AppError::Config(_) => "config",
            AppError::Solver(_) => "solver",
            AppError::ExpectedFair(_) => "audit",
            AppError::Runtime(_) => "runtime",
        }
    }

    fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            AppError::Runtime(_) => 1,
            AppError::Config(_) => 2,
            AppError::ExpectedFair(_) => 3,
            AppError::Solver(_) => 4,
        })
    }

    fn message(&self) -> String {
        let raw = match self {
            AppError::Config(e) => e.to_string(),
            AppError::Solver(m) | AppError::ExpectedFair(m) => m.clone(),
            // {:#} renders the anyhow chain on one line.
            AppError::Runtime(e) => format!("{e:#}"),
        };
        raw.replace('\n', "; ")
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e)
    }
}

impl From<anyhow::Error> for AppError {
    fn from(e: anyhow::Error) -> Self {
        AppError::Runtime(e)
    }
}

fn solver_failure(e: &EquilibriumError) -> bool {
    matches!(
        e,
        EquilibriumError::NoSignChange { .. } | EquilibriumError::ResidualExceedsTolerance { .. }
    )
}

fn from_sim(e: SimulateError) -> AppError {
    match &e {
        SimulateError::Equilibrium(eq) if solver_failure(eq) => AppError::Solver(e.to_string()),
        _ => AppError::Runtime(anyhow::anyhow!(e)),
    }
}

fn from_equilibrium(e: EquilibriumError) -> AppError {
    if solver_failure(&e) {
        AppError::Solver(e.to_string())
    } else {
        AppError::Runtime(anyhow::anyhow!(e))
    }
}

fn config_invalid(path: &str, detail: impl Into<String>) -> AppError {
    AppError::Config(ConfigError::Invalid {
        path: path.to_string(),
        detail: detail.into(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Dynamics(args) => cmd_dynamics(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.message());
            e.exit_code()
        }
    }
}

/// Everything a command needs after the shared setup.
struct Ctx {
    app: AppConfig,
    out: PathBuf,
    hash: String,
    threads: usize,
    started_at_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn prepare(args: &CommonArgs) -> Result<Ctx, AppError> {
    let threads = match args.threads {
        Some(t) => Some(t),
        None => match std::env::var("OPTEST_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                AppError::Runtime(anyhow::anyhow!(
                    "OPTEST_THREADS must be a non-negative integer, got {v:?}"
                ))
            })?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        // A zero count means "all cores" to the pool builder. The global
        // pool can only be built once; a later attempt in-process is a
        // no-op, which matches "first configuration wins".
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let mut app = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        app.simulation.seed = seed;
    }
    let hash = config_hash(&app);
    std::fs::create_dir_all(&args.out).map_err(|e| {
        AppError::Runtime(anyhow::anyhow!(
            "failed to create output directory {}: {e}",
            args.out.display()
        ))
    })?;
    Ok(Ctx {
        app,
        out: args.out.clone(),
        hash,
        threads: rayon::current_num_threads(),
        started_at_unix: now_unix(),
    })
}

fn finish_manifest(
    ctx: &Ctx,
    command: &str,
    solver: Vec<SolverDiagnostic>,
    outputs: Vec<String>,
) -> Result<(), AppError> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_hash: ctx.hash.clone(),
        seed: ctx.app.simulation.seed,
        threads: ctx.threads,
        started_at_unix: ctx.started_at_unix,
        finished_at_unix: now_unix(),
        solver,
        outputs,
    };
    write_manifest(&ctx.out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn fixed_profiles(app: &AppConfig, command: &str) -> Result<Vec<FeatureProfile>, AppError> {
    match &app.simulation.cohorts {
        CohortDesign::FixedProfiles(profiles) => Ok(profiles.clone()),
        CohortDesign::SampledProfiles { .. } => Err(config_invalid(
            "cohorts.mode",
            format!("{command} needs per-cohort profiles; use mode = \"fixed\""),
        )),
    }
}

fn solver_diagnostics(equilibria: &[CohortEquilibrium]) -> Vec<SolverDiagnostic> {
    equilibria
        .iter()
        .enumerate()
        .map(|(cohort, eq)| SolverDiagnostic::from_equilibrium(cohort, eq))
        .collect()
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_solve(args: CommonArgs) -> Result<(), AppError> {
    let ctx = prepare(&args)?;
    let profiles = fixed_profiles(&ctx.app, "solve")?;
    let sim = &ctx.app.simulation;
    let mut equilibria = Vec::with_capacity(profiles.len());
    println!("cohort kind n_roots canonical max_residual");
    for profile in &profiles {
        let sol = resolve_cohort_equilibrium(sim, profile).map_err(from_sim)?;
        let cohort = equilibria.len();
        let canonical = sol.canonical.map(fmt_float).unwrap_or_default();
        let max_residual = sol
            .residuals
            .iter()
            .map(|r| r.abs())
            .fold(None::<f64>, |acc, r| Some(acc.map_or(r, |a| a.max(r))))
            .map(fmt_float)
            .unwrap_or_default();
        println!(
            "{cohort} {} {} {canonical} {max_residual}",
            sol.kind,
            sol.roots.len()
        );
        equilibria.push(CohortEquilibrium::Shared(sol));
    }
    write_thresholds_csv(
        &ctx.out.join("thresholds.csv"),
        sim.access_fraction,
        &equilibria,
    )?;
    finish_manifest(
        &ctx,
        "solve",
        solver_diagnostics(&equilibria),
        vec!["thresholds.csv".into()],
    )
}

fn cmd_simulate(args: CommonArgs) -> Result<(), AppError> {
    let ctx = prepare(&args)?;
    let result = run(&ctx.app.simulation).map_err(from_sim)?;
    write_records_csv(&ctx.out.join("records.csv"), &result)?;
    write_thresholds_csv(
        &ctx.out.join("thresholds.csv"),
        ctx.app.simulation.access_fraction,
        &result.equilibria,
    )?;
    println!(
        "wrote {} records across {} cohorts to {}",
        result.records.len(),
        result.equilibria.len(),
        ctx.out.display()
    );
    finish_manifest(
        &ctx,
        "simulate",
        solver_diagnostics(&result.equilibria),
        vec!["records.csv".into(), "thresholds.csv".into()],
    )
}

fn run_audits(ctx: &Ctx, result: &SimulationResult) -> Result<Vec<FairnessReport>, AppError> {
    let settings = &ctx.app.audit;
    let sim = &ctx.app.simulation;
    let mut reports = Vec::with_capacity(settings.notions.len());
    for notion in &settings.notions {
        let report = match notion {
            FairnessNotion::LatentSkill => audit_latent(result, settings.alpha, SplitBy::Access),
            FairnessNotion::Observable => {
                audit_observable(result, settings.alpha, SplitBy::Access)
            }
            FairnessNotion::Demographic => {
                audit_demographic(result, settings.alpha, SplitBy::Access)
            }
            FairnessNotion::TestBlank => {
                // The test-blank notion examines the policy itself; in
                // sampled mode no shared profile exists, so probe the
                // population-typical one.
                let profiles = match &sim.cohorts {
                    CohortDesign::FixedProfiles(p) => p.clone(),
                    CohortDesign::SampledProfiles { .. } => {
                        vec![FeatureProfile::new(vec![0.0; sim.params.k() - 1])]
                    }
                };
                audit_test_blank(sim.policy.kind, &sim.params, &profiles)
            }
        }
        .map_err(|e| AppError::Runtime(anyhow::anyhow!(e)))?;
        reports.push(report);
    }
    Ok(reports)
}

fn expected_fair_failures(ctx: &Ctx, reports: &[FairnessReport]) -> Vec<String> {
    ctx.app
        .audit
        .expected_fair
        .iter()
        .filter_map(|notion| {
            reports
                .iter()
                .find(|r| r.notion == *notion)
                .filter(|r| r.verdict != Verdict::Fair)
                .map(|r| format!("{}={}", r.notion, r.verdict))
        })
        .collect()
}

fn cmd_audit(args: CommonArgs) -> Result<(), AppError> {
    let ctx = prepare(&args)?;
    let result = run(&ctx.app.simulation).map_err(from_sim)?;
    let reports = run_audits(&ctx, &result)?;
    write_audit_csv(&ctx.out.join("audit.csv"), &reports)?;
    for report in &reports {
        println!("{}: {} ({})", report.notion, report.verdict, report.method);
    }
    finish_manifest(
        &ctx,
        "audit",
        solver_diagnostics(&result.equilibria),
        vec!["audit.csv".into()],
    )?;
    let failures = expected_fair_failures(&ctx, &reports);
    if !failures.is_empty() {
        return Err(AppError::ExpectedFair(format!(
            "expected fair, got: {}",
            failures.join(", ")
        )));
    }
    Ok(())
}

fn cmd_dynamics(args: CommonArgs) -> Result<(), AppError> {
    let ctx = prepare(&args)?;
    let profiles = fixed_profiles(&ctx.app, "dynamics")?;
    let sim = &ctx.app.simulation;
    let kind = sim.policy.kind;
    if !matches!(
        kind,
        PolicyKind::BoKnownZ | PolicyKind::BoUnknownZ | PolicyKind::Equalizing
    ) {
        return Err(config_invalid(
            "policy.name",
            format!(
                "dynamics needs a best-response map; {kind} has none (choose bo_known_z, bo_unknown_z, or equalizing)"
            ),
        ));
    }
    let mut traces: Vec<(usize, DynamicsTrace)> = Vec::with_capacity(profiles.len());
    let mut stuck = Vec::new();
    for (cohort, profile) in profiles.iter().enumerate() {
        let init = match ctx.app.dynamics.init_threshold {
            Some(t) => t,
            None => {
                predictive_test_score(&sim.params, profile)
                    .map_err(|e| AppError::Runtime(anyhow::anyhow!(e)))?
                    .mean
            }
        };
        let trace = best_response_dynamics(
            &sim.params,
            profile,
            kind,
            sim.access_fraction,
            init,
            ctx.app.dynamics.max_iter,
            sim.solver_tol,
        )
        .map_err(from_equilibrium)?;
        println!(
            "cohort={cohort} outcome={} iterations={} final_threshold={}",
            trace.converged_to,
            trace.iterations.len(),
            trace.final_threshold().map(fmt_float).unwrap_or_default()
        );
        if trace.converged_to == DynamicsOutcome::NonConvergent {
            stuck.push(cohort.to_string());
        }
        traces.push((cohort, trace));
    }
    write_dynamics_csv(&ctx.out.join("dynamics.csv"), &traces)?;
    finish_manifest(&ctx, "dynamics", Vec::new(), vec!["dynamics.csv".into()])?;
    if !stuck.is_empty() {
        return Err(AppError::Solver(format!(
            "best-response dynamics did not converge within {} iterations (cohorts: {})",
            ctx.app.dynamics.max_iter,
            stuck.join(", ")
        )));
    }
    Ok(())
}

fn cmd_report(args: CommonArgs) -> Result<(), AppError> {
    let ctx = prepare(&args)?;
    let sim = &ctx.app.simulation;
    let result = run(sim).map_err(from_sim)?;
    let reports = run_audits(&ctx, &result)?;

    let mut rows: Vec<(String, String, String)> = vec![
        ("run".into(), "policy".into(), sim.policy.kind.to_string()),
        (
            "run".into(),
            "requirement".into(),
            format!("{:?}", sim.requirement),
        ),
        (
            "run".into(),
            "access_fraction".into(),
            fmt_float(sim.access_fraction),
        ),
        (
            "run".into(),
            "n_per_cohort".into(),
            sim.n_per_cohort.to_string(),
        ),
        ("run".into(), "seed".into(), sim.seed.to_string()),
        (
            "run".into(),
            "cohorts".into(),
            match &sim.cohorts {
                CohortDesign::FixedProfiles(p) => format!("fixed:{}", p.len()),
                CohortDesign::SampledProfiles { n_profiles } => format!("sampled:{n_profiles}"),
            },
        ),
    ];

    for (cohort, eq) in result.equilibria.iter().enumerate() {
        let section = format!("cohort={cohort}");
        let records: Vec<_> = result.records.iter().filter(|r| r.cohort == cohort).collect();
        let n_access = records.iter().filter(|r| r.access).count();
        rows.push((section.clone(), "n_records".into(), records.len().to_string()));
        rows.push((section.clone(), "n_access".into(), n_access.to_string()));
        let mean = |values: Vec<f64>| -> String {
            if values.is_empty() {
                String::new()
            } else {
                fmt_float(values.iter().sum::<f64>() / values.len() as f64)
            }
        };
        rows.push((
            section.clone(),
            "mean_q".into(),
            mean(records.iter().map(|r| r.q).collect()),
        ));
        rows.push((
            section.clone(),
            "mean_estimate_access".into(),
            mean(records.iter().filter(|r| r.access).map(|r| r.estimate).collect()),
        ));
        rows.push((
            section.clone(),
            "mean_estimate_no_access".into(),
            mean(
                records
                    .iter()
                    .filter(|r| !r.access)
                    .map(|r| r.estimate)
                    .collect(),
            ),
        ));
        if n_access > 0 {
            let reporting = records.iter().filter(|r| r.reports).count() as f64;
            rows.push((
                section.clone(),
                "reporting_fraction_access".into(),
                fmt_float(reporting / n_access as f64),
            ));
        }
        match eq {
            CohortEquilibrium::Shared(sol) => {
                rows.push((section.clone(), "equilibrium_kind".into(), sol.kind.to_string()));
                if let Some(t) = sol.canonical {
                    rows.push((section.clone(), "threshold".into(), fmt_float(t)));
                }
            }
            CohortEquilibrium::PerStudent {
                kind,
                canonical_thresholds,
                ..
            } => {
                rows.push((section.clone(), "equilibrium_kind".into(), kind.to_string()));
                rows.push((
                    section.clone(),
                    "per_student_thresholds".into(),
                    canonical_thresholds.len().to_string(),
                ));
            }
        }
    }

    for report in &reports {
        rows.push((
            "audit".into(),
            report.notion.to_string(),
            report.verdict.to_string(),
        ));
    }

    write_summary_csv(&ctx.out.join("summary.csv"), &rows)?;
    println!(
        "wrote summary ({} rows) for {} records to {}",
        rows.len(),
        result.records.len(),
        ctx.out.display()
    );
    finish_manifest(
        &ctx,
        "report",
        solver_diagnostics(&result.equilibria),
        vec!["summary.csv".into()],
    )
}
