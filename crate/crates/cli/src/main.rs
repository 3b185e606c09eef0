//! Operator entry point for the CVE reproduction pipeline.
//!
//! Exit codes: 0 confirmed/auto-verified, 10 intervention-assisted,
//! 11 verification-assisted, 20 code-generation failure, 21 environment
//! failure, 22 both, 23 non-verifiable, 2 usage error, 3 infrastructure
//! error.

mod config;
mod steps;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use cvepipe_core::constraint_engine::{FixtureFetcher, HttpFetcher, PageFetcher};
use cvepipe_core::cve_model::parse_cve_record;
use cvepipe_core::env_planner::{self, ContainerPlan, ContainerSpec, EnvironmentBundle};
use cvepipe_core::llm_gateway::{BackendDescriptor, Gateway};
use cvepipe_core::refinement_loop::{
    LoopConfig, PipelineResult, PipelineRunner, RunOptions, Termination,
};
use cvepipe_core::run_ledger::{
    self, compute_stats, format_duration, LedgerStore, RunRecord,
};
use cvepipe_core::sandbox_runner::{ExecutionEngine, FakeEngine, HostEngine};
use cvepipe_core::verdict_engine::{FailureReason, Outcome, Verdict};

use config::Settings;

pub const EXIT_INFRASTRUCTURE: u8 = 3;

#[derive(Parser)]
#[command(name = "cvepipe", version, about = "Reproduce CVE attacks in containerized environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file (flags > env vars > config file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
}

#[derive(Args, Clone, Default)]
struct BackendFlags {
    /// Backend kind: live or scripted.
    #[arg(long)]
    backend: Option<String>,
    /// Chat-completion endpoint URL (live backend).
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long)]
    model: Option<String>,
    /// Transcript directory (scripted backend).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Execution engine: real or fake.
    #[arg(long)]
    engine: Option<String>,
    /// Scripted results file for the fake engine.
    #[arg(long)]
    engine_script: Option<PathBuf>,
    /// Working directory for per-run workspaces.
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[arg(long)]
    attempts: Option<u32>,
    /// Execution timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    /// Distillation budget in bytes.
    #[arg(long)]
    distill_budget: Option<usize>,
    /// File whose contents become the persona system message.
    #[arg(long)]
    persona_file: Option<PathBuf>,
    /// Ledger directory for run records.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Directory mapping CWE definition URLs onto local pages.
    #[arg(long)]
    cwe_fixtures: Option<PathBuf>,
    /// Env var holding the backend credential.
    #[arg(long)]
    api_key_env: Option<String>,
    /// Assert that reproduction is blocked by factors outside the pipeline.
    #[arg(long, default_value_t = false)]
    external_blocker: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline against one CVE record.
    Reproduce {
        /// CVE JSON 5.x record file.
        cve_path: PathBuf,
        #[command(flatten)]
        flags: BackendFlags,
    },
    /// Run a single pipeline stage against stored prior-stage outputs.
    Step {
        /// Stage tag: s1.1, s1.2, s2, s3.1, s3.2, s4, s5, or s8.
        step: String,
        /// CVE JSON 5.x record file.
        cve_path: PathBuf,
        #[arg(long, default_value_t = 1)]
        attempt: u32,
        #[arg(long, default_value_t = 0)]
        iteration: u32,
        /// Execution log for the s8 stage.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        flags: BackendFlags,
    },
    /// Lint a generated environment against the rule table.
    LintEnv {
        /// Directory of environment files, or one build file.
        env_path: PathBuf,
        /// Exploit language driving the language-specific rules.
        #[arg(long, default_value = "Python")]
        language: String,
        /// Post-condition text, repeatable; drives the non-root rule.
        #[arg(long = "postcondition")]
        postconditions: Vec<String>,
        /// Expected container count.
        #[arg(long, default_value_t = 1)]
        containers: usize,
    },
    /// Aggregate statistics over a ledger or record fixture.
    Stats {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value_t = false)]
        json: bool,
    },
    /// Resume a paused or limit-terminated run with an operator hint.
    Resume {
        /// Hint text injected into every subsequent debugging prompt.
        #[arg(long)]
        hint: String,
        #[command(flatten)]
        flags: BackendFlags,
    },
    /// Export a recorded run as a self-contained bundle.
    Export {
        /// CVE id to export (latest run wins).
        cve_id: String,
        #[arg(long)]
        dest: PathBuf,
        #[command(flatten)]
        flags: BackendFlags,
    },
}

/// Exhaustive verdict-to-exit-code mapping.
fn exit_code_for(verdict: &Verdict) -> u8 {
    match verdict.outcome {
        Outcome::AutoVerified => 0,
        Outcome::InterventionAssisted => 10,
        Outcome::VerificationAssisted => 11,
        Outcome::Failed => match verdict.failure_reason {
            Some(FailureReason::CodeGeneration) | None => 20,
            Some(FailureReason::EnvSetup) => 21,
            Some(FailureReason::EnvAndCode) => 22,
            Some(FailureReason::NonVerifiable) => 23,
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();

    let result = match cli.command {
        Command::Reproduce { cve_path, flags } => cmd_reproduce(&cve_path, flags, cli.config),
        Command::Step {
            step,
            cve_path,
            attempt,
            iteration,
            log,
            flags,
        } => steps::cmd_step(&step, &cve_path, attempt, iteration, log, flags, cli.config),
        Command::LintEnv {
            env_path,
            language,
            postconditions,
            containers,
        } => cmd_lint_env(&env_path, &language, postconditions, containers),
        Command::Stats { ledger, json } => cmd_stats(&ledger, json),
        Command::Resume { hint, flags } => cmd_resume(&hint, flags, cli.config),
        Command::Export {
            cve_id,
            dest,
            flags,
        } => cmd_export(&cve_id, &dest, flags, cli.config),
    };

    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INFRASTRUCTURE)
        }
    }
}

type CmdResult = Result<u8, Box<dyn std::error::Error>>;

pub(crate) struct Runtime {
    pub gateway: Gateway,
    pub engine: Box<dyn ExecutionEngine>,
    pub fetcher: Option<Box<dyn PageFetcher>>,
    pub options: RunOptions,
    pub ledger: Option<LedgerStore>,
}

pub(crate) fn build_runtime(flags: BackendFlags, config_path: Option<PathBuf>) -> CmdResult2<Runtime> {
    let settings = Settings::resolve(&flags, config_path)?;

    let descriptor = match settings.backend.as_str() {
        "scripted" => {
            let transcript = settings
                .transcript
                .clone()
                .ok_or("scripted backend requires --transcript")?;
            BackendDescriptor::scripted(transcript)
        }
        "live" => {
            let endpoint = settings
                .endpoint
                .clone()
                .ok_or("live backend requires --endpoint")?;
            BackendDescriptor::live(endpoint, settings.model.clone())
        }
        other => return Err(format!("unknown backend `{other}` (use live or scripted)").into()),
    };
    let api_key = std::env::var(&settings.api_key_env).ok();
    let gateway = Gateway::with_credential(&descriptor, api_key)?;

    let engine: Box<dyn ExecutionEngine> = match settings.engine.as_str() {
        "real" => Box::new(HostEngine),
        "fake" => {
            let script = settings
                .engine_script
                .clone()
                .ok_or("fake engine requires --engine-script")?;
            Box::new(FakeEngine::from_script_file(&script)?)
        }
        other => return Err(format!("unknown engine `{other}` (use real or fake)").into()),
    };

    let fetcher: Option<Box<dyn PageFetcher>> = match &settings.cwe_fixtures {
        Some(dir) => Some(Box::new(FixtureFetcher::open(dir)?)),
        None if settings.backend == "live" => Some(Box::new(HttpFetcher::new())),
        None => None,
    };

    let persona = match &settings.persona_file {
        Some(path) => Some(std::fs::read_to_string(path)?),
        None => None,
    };

    let options = RunOptions {
        workspace_root: settings.workdir.clone(),
        persona,
        timeout: Duration::from_secs(settings.timeout_secs),
        distill_budget: settings.distill_budget,
        config: LoopConfig {
            max_iterations: settings.max_iterations,
            max_attempts: settings.attempts,
            reanchor_period: 3,
        },
        external_blocker: settings.external_blocker,
    };

    let ledger = match &settings.ledger {
        Some(dir) => Some(LedgerStore::open(dir)?),
        None => None,
    };

    Ok(Runtime {
        gateway,
        engine,
        fetcher,
        options,
        ledger,
    })
}

type CmdResult2<T> = Result<T, Box<dyn std::error::Error>>;

fn print_result(result: &PipelineResult) {
    let verdict = &result.verdict;
    println!(
        "termination: {}",
        match result.outcome.termination {
            Termination::Confirmed => "confirmed",
            Termination::IterationLimit => "iteration_limit",
            Termination::AttemptsExhausted => "attempts_exhausted",
            Termination::OperatorAbort => "operator_abort",
        }
    );
    println!(
        "verdict: {}",
        serde_json::to_value(verdict.outcome)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    );
    if let Some(reason) = verdict.failure_reason {
        println!(
            "failure_reason: {}",
            serde_json::to_value(reason)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        );
    }
    println!("containers: {}", result.record.containers);
    println!("iterations: {}", result.record.iterations);
    if let Some(image) = &result.record.image_name {
        println!("image: {image}");
    }
    println!("evidence_items: {}", verdict.evidence.len());
    println!(
        "duration: {}",
        format_duration(result.record.total_duration_secs)
    );
}

fn cmd_reproduce(cve_path: &Path, flags: BackendFlags, config: Option<PathBuf>) -> CmdResult {
    let document = std::fs::read_to_string(cve_path)?;
    let record = parse_cve_record(&document)?;
    let mut runtime = build_runtime(flags, config)?;

    let catalog = cvepipe_core::prompt_catalog::PromptCatalog::builtin();
    let mut runner = PipelineRunner::new(
        &catalog,
        &mut runtime.gateway,
        runtime.engine.as_mut(),
        runtime.fetcher.as_deref(),
        runtime.ledger.as_ref(),
        runtime.options,
    );
    let result = runner.run_pipeline(record)?;
    print_result(&result);
    Ok(exit_code_for(&result.verdict))
}

fn cmd_resume(hint: &str, flags: BackendFlags, config: Option<PathBuf>) -> CmdResult {
    let mut runtime = build_runtime(flags, config)?;
    let workspace_root = runtime.options.workspace_root.clone();
    let catalog = cvepipe_core::prompt_catalog::PromptCatalog::builtin();
    let mut runner = PipelineRunner::new(
        &catalog,
        &mut runtime.gateway,
        runtime.engine.as_mut(),
        runtime.fetcher.as_deref(),
        runtime.ledger.as_ref(),
        runtime.options,
    );
    match runner.attended_resume(&workspace_root, hint) {
        Ok(result) => {
            print_result(&result);
            Ok(exit_code_for(&result.verdict))
        }
        Err(cvepipe_core::refinement_loop::ResumeError::NoResumableRun(path)) => {
            eprintln!("error: no resumable run in {}", path.display());
            Ok(2)
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_lint_env(
    env_path: &Path,
    language: &str,
    postconditions: Vec<String>,
    containers: usize,
) -> CmdResult {
    let mut files = BTreeMap::new();
    if env_path.is_dir() {
        for entry in std::fs::read_dir(env_path)? {
            let path = entry?.path();
            if path.is_file() {
                let name = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                files.insert(name, std::fs::read_to_string(&path)?);
            }
        }
    } else {
        let name = env_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("Dockerfile")
            .to_string();
        files.insert(name, std::fs::read_to_string(env_path)?);
    }
    if files.is_empty() {
        return Err("no environment files found".into());
    }

    let bundle = EnvironmentBundle {
        multi_container: files.iter().any(|(n, b)| env_planner::is_compose_file(n, b)),
        files,
    };
    let plan = ContainerPlan {
        count: containers,
        specs: (0..containers)
            .map(|i| ContainerSpec {
                name: format!("container-{i}"),
                image: String::new(),
                purpose: String::new(),
                configuration: String::new(),
            })
            .collect(),
        dependency_notes: vec![],
    };
    let postconditions = if postconditions.is_empty() {
        vec!["unspecified".to_string()]
    } else {
        postconditions
    };
    let profile = cvepipe_core::constraint_engine::VulnerabilityProfile {
        title: String::new(),
        cwes: vec![],
        preconditions: vec!["unspecified".to_string()],
        postconditions,
        exploit_language: language.to_string(),
        steps: vec!["unspecified".to_string()],
        no_simulation_obligation: true,
    };

    let findings = env_planner::lint_environment(&bundle, &plan, &profile);
    if !findings.is_empty() {
        println!("{}", env_planner::findings_to_jsonl(&findings));
    }
    Ok(if env_planner::has_errors(&findings) { 1 } else { 0 })
}

fn percent(value: f64) -> String {
    format!("{:.1}%", value * 100.0)
}

fn cmd_stats(ledger: &Path, json: bool) -> CmdResult {
    let records = run_ledger::load_records(ledger)?;
    let stats = compute_stats(&records);
    if json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
        return Ok(0);
    }
    println!("total_runs: {}", stats.total_runs);
    println!("successes: {}", stats.successes);
    let fraction = |name: &str, v: Option<f64>| match v {
        Some(v) => println!("{name}: {}", percent(v)),
        None => println!("{name}: n/a"),
    };
    fraction("success_rate", stats.success_rate);
    fraction("poc_share", stats.poc_share);
    fraction("multi_container_fraction", stats.multi_container_fraction);
    let mean = |name: &str, v: Option<f64>| match v {
        Some(v) => println!("{name}: {v:.2}"),
        None => println!("{name}: n/a"),
    };
    mean("mean_iterations_overall", stats.mean_iterations_overall);
    mean("mean_iterations_with_poc", stats.mean_iterations_with_poc);
    mean(
        "mean_iterations_without_poc",
        stats.mean_iterations_without_poc,
    );
    match stats.mean_duration_secs {
        Some(secs) => println!("mean_duration: {}", format_duration(secs)),
        None => println!("mean_duration: n/a"),
    }
    Ok(0)
}

fn cmd_export(cve_id: &str, dest: &Path, flags: BackendFlags, config: Option<PathBuf>) -> CmdResult {
    let settings = Settings::resolve(&flags, config)?;
    let ledger_dir = settings.ledger.clone().ok_or("export requires --ledger")?;
    let store = LedgerStore::open(&ledger_dir)?;
    let records = store.load_runs()?;
    let wanted = cve_id.to_ascii_uppercase();
    let record: &RunRecord = records
        .iter()
        .rev()
        .find(|r| r.cve_id.eq_ignore_ascii_case(&wanted))
        .ok_or_else(|| format!("no run recorded for {wanted}"))?;
    let artifacts = settings
        .workdir
        .join(record.cve_id.to_ascii_lowercase());
    let artifacts = artifacts.exists().then_some(artifacts);
    run_ledger::export_run_bundle(record, artifacts.as_deref(), dest)?;
    println!("exported {} to {}", record.cve_id, dest.display());
    Ok(0)
}
