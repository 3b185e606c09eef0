//! The closed refinement loop and the end-to-end pipeline driver.
//!
//! Each attempt executes the current driver script, distills the output,
//! feeds it back through the debugging prompt, and applies the reply: a
//! revised script replaces the bundle (after validation and one
//! reassessment), a verified confirmation ends the run, and anything else
//! counts against an invalid-reply streak. Three attempts with distinct
//! strategy directives run per CVE; environments are regenerated per
//! attempt.
//!
//! Backend usage is bounded by construction: a run-wide call budget of
//! `7 + max_attempts * (max_iterations * 2 + 1)` cuts an attempt short
//! before it can overrun, whatever the backend replies.
//!
//! A confirmation only terminates the loop as `Confirmed` when the same
//! iteration's execution shows a trigger marker or a sanitizer finding. A
//! bare "Successful exploit confirmed" over a clean log is treated as an
//! invalid reply and flags the run for human verification instead.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint_engine::{self, VulnerabilityProfile};
use crate::cve_model::CveRecord;
use crate::env_planner::{self, ContainerPlan, EnvironmentBundle};
use crate::exploit_builder::{self, ExploitBundle, Reassessment};
use crate::llm_gateway::{ChatRequest, Gateway, GatewayError, TranscriptEntry};
use crate::prompt_catalog::{PromptCatalog, StepContext, StepId};
use crate::run_ledger::{ExecutionDigest, IterationRecord, LedgerStore, RunRecord};
use crate::sandbox_runner::{
    self, ExecutionEngine, ExecutionResult, DISTILLED_LOG_FILENAME,
};
use crate::verdict_engine::{self, EvaluationFlags, MarkerKind, Verdict};

pub const RESUME_STATE_FILENAME: &str = "resume.json";
pub const HINT_FILENAME: &str = "HINT";
/// Consecutive invalid replies tolerated before an attempt aborts early.
pub const INVALID_REPLY_STREAK_LIMIT: u32 = 2;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_iterations: u32,
    pub max_attempts: u32,
    /// Iterations between full profile/plan/environment re-embeddings.
    pub reanchor_period: u32,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_iterations: 10,
            max_attempts: 3,
            reanchor_period: 3,
        }
    }
}

impl LoopConfig {
    pub fn validated(mut self) -> Self {
        self.max_attempts = self.max_attempts.clamp(1, 3);
        self.max_iterations = self.max_iterations.max(1);
        self.reanchor_period = self.reanchor_period.max(1);
        self
    }
}

/// Upper bound on backend calls for one CVE run.
pub const fn call_budget(config: &LoopConfig) -> u32 {
    7 + config.max_attempts * (config.max_iterations * 2 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyKind {
    Confirmed,
    RevisedScript,
    Invalid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationDigest {
    pub iteration: u32,
    pub exit_code: i32,
    pub timed_out: bool,
    pub evidence_seen: bool,
    pub reply: ReplyKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopState {
    pub attempt: u32,
    /// Completed execute-distill-refine cycles in this attempt.
    pub iteration: u32,
    pub current_bundle: ExploitBundle,
    pub past_mistakes: Vec<String>,
    pub hints: Vec<String>,
    pub history: Vec<IterationDigest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Confirmed,
    IterationLimit,
    AttemptsExhausted,
    OperatorAbort,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub termination: Termination,
    pub final_state: LoopState,
    pub confirmation_evidence: Option<String>,
    /// Set when the model claimed success the execution log could not back.
    pub verification_needed: bool,
}

#[derive(Debug)]
pub enum ReplyClass {
    Confirmed { explanation: String },
    RevisedScript { script: String },
    Invalid { reason: String },
}

/// Classifies a debugging-step reply.
///
/// Confirmed means the final non-empty line is exactly the confirmation
/// phrase (whitespace and the prompt's own bold markers ignored); a reply
/// shaped like a single script is a revision; anything else is invalid.
pub fn classify_model_reply(reply: &str) -> ReplyClass {
    let final_line = reply
        .lines()
        .rev()
        .map(|l| l.trim().trim_matches('*').trim())
        .find(|l| !l.is_empty());
    if final_line == Some("Successful exploit confirmed") {
        return ReplyClass::Confirmed {
            explanation: reply.trim().to_string(),
        };
    }
    match exploit_builder::is_single_script(reply) {
        Ok(script) => ReplyClass::RevisedScript { script },
        Err(e) => ReplyClass::Invalid {
            reason: e.to_string(),
        },
    }
}

#[derive(Debug, Error)]
#[error("hint must be non-empty")]
pub struct EmptyHint;

/// Appends an operator hint. The hint joins every subsequent debugging
/// prompt and permanently marks the run as intervention-assisted.
pub fn inject_hint(state: &mut LoopState, hint: &str) -> Result<(), EmptyHint> {
    let trimmed = hint.trim();
    if trimmed.is_empty() {
        return Err(EmptyHint);
    }
    state.hints.push(trimmed.to_string());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workspace_root: PathBuf,
    pub persona: Option<String>,
    pub timeout: Duration,
    pub distill_budget: usize,
    pub config: LoopConfig,
    /// Operator-asserted external blocker (missing images, hardware
    /// dependence); routes an unconfirmed run to the non-verifiable bucket.
    pub external_blocker: bool,
}

impl RunOptions {
    pub fn new(workspace_root: impl Into<PathBuf>) -> Self {
        RunOptions {
            workspace_root: workspace_root.into(),
            persona: None,
            timeout: sandbox_runner::DEFAULT_TIMEOUT,
            distill_budget: sandbox_runner::DEFAULT_DISTILL_BUDGET,
            config: LoopConfig::default(),
            external_blocker: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {step} failed: {message}")]
    Stage { step: &'static str, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ledger(#[from] crate::run_ledger::LedgerError),
    #[error("workspace I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ResumeError {
    #[error("no resumable run in {0}")]
    NoResumableRun(PathBuf),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Hint(#[from] EmptyHint),
}

#[derive(Debug)]
pub struct PipelineResult {
    pub outcome: LoopOutcome,
    pub verdict: Verdict,
    pub record: RunRecord,
}

/// Serialized continuation written next to the run's workspaces whenever a
/// run ends unconfirmed.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResumeState {
    pub cve_raw: serde_json::Value,
    #[serde(default)]
    pub extracted: Option<crate::cve_model::ExtractedContent>,
    #[serde(default)]
    pub language_info: Option<crate::cve_model::LanguageAndSnippets>,
    pub profile: Option<VulnerabilityProfile>,
    pub plan: Option<ContainerPlan>,
    pub environment: Option<EnvironmentBundle>,
    pub bundle: Option<ExploitBundle>,
    pub attempt: u32,
    pub iterations_in_attempt: u32,
    pub total_iterations: u32,
    pub past_mistakes: Vec<String>,
    pub hints: Vec<String>,
    pub intervention: bool,
    pub verification_claim: bool,
    pub env_failed: bool,
    pub code_failed: bool,
    pub started_at: f64,
    pub confirmed: bool,
}

enum StageFailure {
    Gateway(GatewayError),
    Invalid(String),
    BudgetExhausted,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageFailure::Gateway(e) => write!(f, "{e}"),
            StageFailure::Invalid(m) => f.write_str(m),
            StageFailure::BudgetExhausted => f.write_str("backend call budget exhausted"),
        }
    }
}

pub struct PipelineRunner<'a> {
    pub catalog: &'a PromptCatalog,
    pub gateway: &'a mut Gateway,
    pub engine: &'a mut dyn ExecutionEngine,
    pub fetcher: Option<&'a dyn constraint_engine::PageFetcher>,
    pub ledger: Option<&'a LedgerStore>,
    pub options: RunOptions,
    calls_used: u32,
    budget: u32,
    records: Vec<IterationRecord>,
    warnings: Vec<String>,
    intervention: bool,
    verification_claim: bool,
    env_failed: bool,
    code_failed: bool,
    total_iterations: u32,
}

impl<'a> PipelineRunner<'a> {
    pub fn new(
        catalog: &'a PromptCatalog,
        gateway: &'a mut Gateway,
        engine: &'a mut dyn ExecutionEngine,
        fetcher: Option<&'a dyn constraint_engine::PageFetcher>,
        ledger: Option<&'a LedgerStore>,
        options: RunOptions,
    ) -> Self {
        let config = options.config.validated();
        let budget = call_budget(&config);
        let options = RunOptions { config, ..options };
        PipelineRunner {
            catalog,
            gateway,
            engine,
            fetcher,
            ledger,
            options,
            calls_used: 0,
            budget,
            records: Vec::new(),
            warnings: Vec::new(),
            intervention: false,
            verification_claim: false,
            env_failed: false,
            code_failed: false,
            total_iterations: 0,
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.warnings.push(message);
    }

    fn complete_step(
        &mut self,
        step: StepId,
        attempt: u32,
        iteration: u32,
        context: &StepContext,
    ) -> Result<(String, TranscriptEntry), StageFailure> {
        if self.calls_used >= self.budget {
            return Err(StageFailure::BudgetExhausted);
        }
        let messages = self
            .catalog
            .render_step(step, context, self.options.persona.as_deref())
            .map_err(|e| StageFailure::Invalid(e.to_string()))?;
        let request = ChatRequest::new(messages, step.step_tag(attempt, iteration));
        let completion = self
            .gateway
            .complete(&request)
            .map_err(StageFailure::Gateway)?;
        self.calls_used += 1;
        let entry = self
            .gateway
            .transcript_record()
            .last()
            .expect("transcript entry recorded")
            .clone();
        Ok((completion.text, entry))
    }

    fn push_step_record(&mut self, entry: &TranscriptEntry, attempt: u32, iteration: u32) {
        self.records.push(IterationRecord {
            step_tag: entry.step_tag.clone(),
            attempt,
            iteration,
            prompt_digest: entry.request_digest.clone(),
            reply_digest: entry.reply_digest.clone(),
            execution: None,
            distilled_ref: None,
            timestamp: now_epoch(),
        });
    }

    fn hint_file(&self, cve: &CveRecord) -> PathBuf {
        self.options
            .workspace_root
            .join(cve.cve_id.image_name())
            .join(HINT_FILENAME)
    }

    fn consume_hint_file(&mut self, cve: &CveRecord, state: &mut LoopState) {
        let path = self.hint_file(cve);
        let Ok(text) = std::fs::read_to_string(&path) else {
            return;
        };
        if inject_hint(state, &text).is_ok() {
            self.intervention = true;
            self.warn(format!("hint injected from {}", path.display()));
        }
        let _ = std::fs::remove_file(&path);
    }

    /// Runs the refinement loop for one attempt, starting at the state's
    /// current iteration. Exactly one ledger record lands per iteration.
    pub fn run_attempt(
        &mut self,
        mut state: LoopState,
        context: &mut StepContext,
        cve: &CveRecord,
        iteration_budget: u32,
    ) -> LoopOutcome {
        let mut invalid_streak = 0u32;
        let mut confirmation_evidence: Option<String> = None;
        let mut termination = Termination::IterationLimit;

        while state.iteration < iteration_budget {
            let iteration = state.iteration;

            // Operators may drop a hint between iterations.
            self.consume_hint_file(cve, &mut state);

            let bundle = state.current_bundle.clone();
            let workspace = match sandbox_runner::prepare_workspace(
                &self.options.workspace_root,
                &cve.cve_id,
                state.attempt,
                iteration,
                &bundle,
            ) {
                Ok(ws) => ws,
                Err(e) => {
                    self.warn(format!("workspace preparation failed: {e}"));
                    break;
                }
            };
            let execution =
                match sandbox_runner::execute_bundle(&workspace, self.engine, self.options.timeout)
                {
                    Ok(result) => result,
                    Err(e) => {
                        self.warn(format!(
                            "engine error at attempt {} iteration {iteration}: {e}",
                            state.attempt
                        ));
                        break;
                    }
                };

            let events = verdict_engine::scan_markers(&execution.merged);
            let findings = verdict_engine::parse_sanitizer_report(&execution.merged);
            let evidence_seen = !findings.is_empty()
                || events.iter().any(|e| e.kind == MarkerKind::Triggered);

            let distilled = sandbox_runner::distill_log(&execution.merged, self.options.distill_budget);
            let distilled_text = distilled.render();
            let distilled_path = workspace.dir().join(DISTILLED_LOG_FILENAME);
            if let Err(e) = std::fs::write(&distilled_path, &distilled_text) {
                self.warn(format!("could not persist distilled log: {e}"));
            }

            if execution.exit_code != 0 || !evidence_seen {
                state
                    .past_mistakes
                    .push(failure_digest(state.attempt, iteration, &execution, &distilled_text));
            }

            // Re-anchor the full context periodically; otherwise the
            // debugging prompt carries only conditions, script, and log.
            let reanchor = iteration % self.options.config.reanchor_period == 0;
            let mut s8_context = context.clone();
            s8_context.bundle = Some(bundle.clone());
            s8_context.distilled_log = Some(distilled_text.clone());
            s8_context.past_mistakes = state.past_mistakes.clone();
            s8_context.hint = join_hints(&state.hints, None);
            if !reanchor {
                s8_context.plan = None;
                s8_context.environment = None;
            }

            let (reply, entry) =
                match self.complete_step(StepId::S8, state.attempt, iteration, &s8_context) {
                    Ok(ok) => ok,
                    Err(failure) => {
                        self.warn(format!(
                            "refinement call failed at attempt {} iteration {iteration}: {failure}",
                            state.attempt
                        ));
                        // The execution still counts as an iteration.
                        self.records.push(IterationRecord {
                            step_tag: StepId::S8.step_tag(state.attempt, iteration),
                            attempt: state.attempt,
                            iteration,
                            prompt_digest: String::new(),
                            reply_digest: String::new(),
                            execution: Some(execution_digest(&execution)),
                            distilled_ref: Some(distilled_path.display().to_string()),
                            timestamp: now_epoch(),
                        });
                        state.history.push(IterationDigest {
                            iteration,
                            exit_code: execution.exit_code,
                            timed_out: execution.timed_out,
                            evidence_seen,
                            reply: ReplyKind::Invalid,
                        });
                        state.iteration += 1;
                        self.total_iterations += 1;
                        break;
                    }
                };

            let classification = classify_model_reply(&reply);
            let reply_kind = match &classification {
                ReplyClass::Confirmed { .. } => ReplyKind::Confirmed,
                ReplyClass::RevisedScript { .. } => ReplyKind::RevisedScript,
                ReplyClass::Invalid { .. } => ReplyKind::Invalid,
            };

            self.records.push(IterationRecord {
                step_tag: entry.step_tag.clone(),
                attempt: state.attempt,
                iteration,
                prompt_digest: entry.request_digest.clone(),
                reply_digest: entry.reply_digest.clone(),
                execution: Some(execution_digest(&execution)),
                distilled_ref: Some(distilled_path.display().to_string()),
                timestamp: now_epoch(),
            });
            state.history.push(IterationDigest {
                iteration,
                exit_code: execution.exit_code,
                timed_out: execution.timed_out,
                evidence_seen,
                reply: reply_kind,
            });
            state.iteration += 1;
            self.total_iterations += 1;

            match classification {
                ReplyClass::Confirmed { explanation } => {
                    if evidence_seen {
                        confirmation_evidence = Some(explanation);
                        termination = Termination::Confirmed;
                        break;
                    }
                    // Claimed success over a clean log: hallucination guard.
                    self.verification_claim = true;
                    state.past_mistakes.push(format!(
                        "attempt {} iteration {iteration}: claimed success without observable evidence",
                        state.attempt
                    ));
                    invalid_streak += 1;
                    if invalid_streak >= INVALID_REPLY_STREAK_LIMIT {
                        break;
                    }
                }
                ReplyClass::RevisedScript { .. } => {
                    invalid_streak = 0;
                    match exploit_builder::validate_exploit_bundle(
                        &reply,
                        &cve.cve_id,
                        context.profile.as_ref().expect("profile set before loop"),
                    ) {
                        Ok((revised, warnings)) => {
                            for w in warnings {
                                self.warn(format!("revision warning: {w}"));
                            }
                            match exploit_builder::enforce_confidence_gate(&revised) {
                                Ok(_) => {
                                    let reassessed = self.reassess_revision(
                                        revised,
                                        context,
                                        state.attempt,
                                        iteration,
                                    );
                                    match reassessed {
                                        Some(bundle) => state.current_bundle = bundle,
                                        None => break,
                                    }
                                }
                                Err(e) => {
                                    state.past_mistakes.push(format!(
                                        "attempt {} iteration {iteration}: revision rejected: {e}",
                                        state.attempt
                                    ));
                                    invalid_streak += 1;
                                    if invalid_streak >= INVALID_REPLY_STREAK_LIMIT {
                                        break;
                                    }
                                }
                            }
                        }
                        Err(e) => {
                            state.past_mistakes.push(format!(
                                "attempt {} iteration {iteration}: invalid revision: {e}",
                                state.attempt
                            ));
                            invalid_streak += 1;
                            if invalid_streak >= INVALID_REPLY_STREAK_LIMIT {
                                break;
                            }
                        }
                    }
                }
                ReplyClass::Invalid { reason } => {
                    state.past_mistakes.push(format!(
                        "attempt {} iteration {iteration}: unusable reply: {}",
                        state.attempt,
                        reason.chars().take(120).collect::<String>()
                    ));
                    invalid_streak += 1;
                    if invalid_streak >= INVALID_REPLY_STREAK_LIMIT {
                        break;
                    }
                }
            }
        }

        LoopOutcome {
            termination,
            verification_needed: self.verification_claim
                && termination != Termination::Confirmed,
            confirmation_evidence,
            final_state: state,
        }
    }

    /// One reassessment per iteration; a failed reassessment keeps the
    /// validated revision rather than discarding the iteration's progress.
    /// Returns None only when the gateway is gone (attempt must end).
    fn reassess_revision(
        &mut self,
        revised: ExploitBundle,
        context: &StepContext,
        attempt: u32,
        iteration: u32,
    ) -> Option<ExploitBundle> {
        if self.calls_used >= self.budget {
            return Some(revised);
        }
        let mut s5_context = context.clone();
        s5_context.bundle = Some(revised.clone());
        match exploit_builder::run_reassessment(
            &s5_context,
            self.catalog,
            self.gateway,
            self.options.persona.as_deref(),
            attempt,
            iteration,
        ) {
            Ok(outcome) => {
                self.calls_used += 1;
                if let Some(entry) = self.gateway.transcript_record().last().cloned() {
                    self.push_step_record(&entry, attempt, iteration);
                }
                match outcome {
                    Reassessment::Unchanged => Some(revised),
                    Reassessment::Revised(better) => Some(better),
                }
            }
            Err(exploit_builder::ReassessError::Gateway(e)) => {
                self.calls_used += 1;
                self.warn(format!("reassessment gateway failure: {e}"));
                None
            }
            Err(e) => {
                self.calls_used += 1;
                if let Some(entry) = self.gateway.transcript_record().last().cloned() {
                    self.push_step_record(&entry, attempt, iteration);
                }
                self.warn(format!("reassessment rejected: {e}; keeping prior revision"));
                Some(revised)
            }
        }
    }

    /// Builds plan, environment, and bundle for one attempt. Returns the
    /// initial bundle, or the step tag that failed.
    fn generate_attempt_artifacts(
        &mut self,
        context: &mut StepContext,
        cve: &CveRecord,
        attempt: u32,
        hints: &[String],
    ) -> Result<ExploitBundle, &'static str> {
        context.plan = None;
        context.environment = None;
        context.bundle = None;

        // Container plan.
        let (reply, entry) = match self.complete_step(StepId::S3_1, attempt, 0, context) {
            Ok(ok) => ok,
            Err(e) => {
                self.warn(format!("container planning failed: {e}"));
                self.env_failed = true;
                return Err("s3.1");
            }
        };
        self.push_step_record(&entry, attempt, 0);
        match env_planner::validate_container_plan(&reply) {
            Ok(plan) => context.plan = Some(plan),
            Err(e) => {
                self.warn(format!("invalid container plan: {e}"));
                self.env_failed = true;
                return Err("s3.1");
            }
        }

        // Environment files.
        let (reply, entry) = match self.complete_step(StepId::S3_2, attempt, 0, context) {
            Ok(ok) => ok,
            Err(e) => {
                self.warn(format!("environment generation failed: {e}"));
                self.env_failed = true;
                return Err("s3.2");
            }
        };
        self.push_step_record(&entry, attempt, 0);
        let plan = context.plan.clone().expect("plan just set");
        match env_planner::split_environment_output(&reply, &plan) {
            Ok(environment) => {
                let findings = env_planner::lint_environment(
                    &environment,
                    &plan,
                    context.profile.as_ref().expect("profile set"),
                );
                for finding in &findings {
                    self.warn(format!(
                        "lint {}: {} ({}:{})",
                        finding.rule_id,
                        finding.message,
                        finding.path,
                        finding.line.unwrap_or(0)
                    ));
                }
                context.environment = Some(environment);
            }
            Err(e) => {
                self.warn(format!("environment output rejected: {e}"));
                self.env_failed = true;
                return Err("s3.2");
            }
        }

        // Driver script, steered by this attempt's strategy.
        let directive = self
            .catalog
            .attempt_strategy_directive(attempt)
            .map_err(|_| "s4")?
            .to_string();
        context.hint = join_hints(hints, Some(&directive));
        let (reply, entry) = match self.complete_step(StepId::S4, attempt, 0, context) {
            Ok(ok) => ok,
            Err(e) => {
                self.warn(format!("code generation failed: {e}"));
                self.code_failed = true;
                return Err("s4");
            }
        };
        self.push_step_record(&entry, attempt, 0);
        let profile = context.profile.as_ref().expect("profile set");
        let bundle = match exploit_builder::validate_exploit_bundle(&reply, &cve.cve_id, profile) {
            Ok((bundle, warnings)) => {
                for w in warnings {
                    self.warn(format!("bundle warning: {w}"));
                }
                bundle
            }
            Err(e) => {
                self.warn(format!("driver script rejected: {e}"));
                self.code_failed = true;
                return Err("s4");
            }
        };
        if let Err(e) = exploit_builder::enforce_confidence_gate(&bundle) {
            self.warn(format!("confidence gate: {e}"));
            self.code_failed = true;
            return Err("s4");
        }
        match exploit_builder::detect_simulated_implementation(&bundle, profile) {
            Ok(findings) if !findings.is_empty() => {
                for f in &findings {
                    self.warn(format!(
                        "simulation check: {} {:?} ({})",
                        f.symbol, f.kind, f.evidence
                    ));
                }
            }
            Err(_) => self.warn("simulation check inconclusive: no symbols in steps"),
            _ => {}
        }

        // Initial reassessment round.
        context.bundle = Some(bundle.clone());
        match self.reassess_revision(bundle, context, attempt, 0) {
            Some(final_bundle) => {
                context.bundle = Some(final_bundle.clone());
                Ok(final_bundle)
            }
            None => {
                self.code_failed = true;
                Err("s5")
            }
        }
    }

    /// The full run: content extraction through refinement attempts,
    /// verdict, persistence.
    pub fn run_pipeline(&mut self, cve: CveRecord) -> Result<PipelineResult, PipelineError> {
        let started_at = now_epoch();
        let mut context = StepContext::new(cve.clone());

        // Content extraction.
        let (reply, entry) = self
            .complete_step(StepId::S1_1, 1, 0, &context)
            .map_err(|e| stage_error("s1.1", e))?;
        self.push_step_record(&entry, 1, 0);
        let (extracted, deviations) = crate::cve_model::validate_extracted_content(&reply)
            .map_err(|e| PipelineError::Stage {
                step: "s1.1",
                message: e.to_string(),
            })?;
        for d in deviations {
            self.warn(format!("content extraction deviation: {d:?}"));
        }
        context.extracted = Some(extracted);

        // Language and code extraction.
        let (reply, entry) = self
            .complete_step(StepId::S1_2, 1, 0, &context)
            .map_err(|e| stage_error("s1.2", e))?;
        self.push_step_record(&entry, 1, 0);
        let (language_info, _) = crate::cve_model::validate_language_extraction(&reply)
            .map_err(|e| PipelineError::Stage {
                step: "s1.2",
                message: e.to_string(),
            })?;
        context.language_info = Some(language_info);

        // Constraint extraction.
        let (reply, entry) = self
            .complete_step(StepId::S2, 1, 0, &context)
            .map_err(|e| stage_error("s2", e))?;
        self.push_step_record(&entry, 1, 0);
        let mut profile =
            constraint_engine::validate_profile(&reply).map_err(|e| PipelineError::Stage {
                step: "s2",
                message: e.to_string(),
            })?;
        if let Some(info) = &context.language_info {
            if let Some(w) = constraint_engine::check_language_consistency(&profile, info) {
                self.warn(w);
            }
        }
        if let Some(fetcher) = self.fetcher {
            let mut enriched = Vec::with_capacity(profile.cwes.len());
            for pointer in profile.cwes.drain(..) {
                if pointer.description.is_some() {
                    enriched.push(pointer);
                    continue;
                }
                let (pointer, warning) = constraint_engine::fetch_cwe_context(pointer, fetcher);
                if let Some(w) = warning {
                    self.warn(format!("cwe fetch: {} ({})", w.message, w.url));
                }
                enriched.push(pointer);
            }
            profile.cwes = enriched;
        }
        context.profile = Some(profile);

        // Refinement attempts.
        let mut hints: Vec<String> = Vec::new();
        let mut past_mistakes: Vec<String> = Vec::new();
        let mut outcome: Option<LoopOutcome> = None;
        let mut last_confirmed_execution: Option<ExecutionResult> = None;

        for attempt in 1..=self.options.config.max_attempts {
            let bundle =
                match self.generate_attempt_artifacts(&mut context, &cve, attempt, &hints) {
                    Ok(bundle) => bundle,
                    Err(_step) => continue,
                };
            let state = LoopState {
                attempt,
                iteration: 0,
                current_bundle: bundle,
                past_mistakes: std::mem::take(&mut past_mistakes),
                hints: std::mem::take(&mut hints),
                history: Vec::new(),
            };
            let attempt_outcome = self.run_attempt(
                state,
                &mut context,
                &cve,
                self.options.config.max_iterations,
            );
            hints = attempt_outcome.final_state.hints.clone();
            past_mistakes = attempt_outcome.final_state.past_mistakes.clone();
            if !hints.is_empty() {
                self.intervention = true;
            }
            let confirmed = attempt_outcome.termination == Termination::Confirmed;
            if confirmed {
                last_confirmed_execution = self.load_last_execution(&cve, &attempt_outcome);
            }
            outcome = Some(attempt_outcome);
            if confirmed {
                break;
            }
        }

        let mut outcome = outcome.unwrap_or_else(|| LoopOutcome {
            termination: Termination::AttemptsExhausted,
            final_state: LoopState {
                attempt: self.options.config.max_attempts,
                iteration: 0,
                current_bundle: placeholder_bundle(),
                past_mistakes,
                hints,
                history: Vec::new(),
            },
            confirmation_evidence: None,
            verification_needed: self.verification_claim,
        });
        if outcome.termination != Termination::Confirmed
            && outcome.final_state.attempt >= self.options.config.max_attempts
        {
            outcome.termination = Termination::AttemptsExhausted;
        }

        self.finish_run(cve, context, outcome, last_confirmed_execution, started_at)
    }

    fn load_last_execution(
        &self,
        cve: &CveRecord,
        outcome: &LoopOutcome,
    ) -> Option<ExecutionResult> {
        // The confirming iteration is the last one executed.
        let iteration = outcome.final_state.iteration.checked_sub(1)?;
        let dir = self
            .options
            .workspace_root
            .join(cve.cve_id.image_name())
            .join(format!("attempt-{}", outcome.final_state.attempt))
            .join(format!("iter-{iteration}"));
        let merged = std::fs::read_to_string(dir.join(sandbox_runner::OUTPUT_LOG_FILENAME)).ok()?;
        Some(ExecutionResult {
            exit_code: 0,
            stdout: String::new(),
            stderr: String::new(),
            merged,
            duration_secs: 0.0,
            timed_out: false,
            phase_markers: Vec::new(),
        })
    }

    fn finish_run(
        &mut self,
        cve: CveRecord,
        context: StepContext,
        outcome: LoopOutcome,
        confirmed_execution: Option<ExecutionResult>,
        started_at: f64,
    ) -> Result<PipelineResult, PipelineError> {
        let confirmed = outcome.termination == Termination::Confirmed;

        let (events, findings) = match (&confirmed_execution, confirmed) {
            (Some(execution), true) => (
                verdict_engine::scan_markers(&execution.merged),
                verdict_engine::parse_sanitizer_report(&execution.merged),
            ),
            _ => (Vec::new(), Vec::new()),
        };
        let flags = EvaluationFlags {
            intervention: self.intervention,
            manual_check: outcome.verification_needed,
            env_failed: !confirmed && self.env_failed,
            code_failed: !confirmed && self.code_failed,
            external_blocker: !confirmed && self.options.external_blocker,
        };
        let postconditions = context
            .profile
            .as_ref()
            .map(|p| p.postconditions.clone())
            .unwrap_or_default();
        let verdict = verdict_engine::evaluate_outcome(&postconditions, &events, &findings, flags)
            .map_err(|e| PipelineError::Stage {
                step: "verdict",
                message: e.to_string(),
            })?;

        let record = RunRecord {
            cve_id: cve.cve_id.to_string(),
            exploit_language: context
                .profile
                .as_ref()
                .map(|p| p.exploit_language.clone())
                .or_else(|| {
                    context
                        .language_info
                        .as_ref()
                        .map(|l| l.exploit_language.clone())
                })
                .unwrap_or_default(),
            library: cve
                .affected
                .first()
                .map(|a| a.product.clone())
                .filter(|p| p != "n/a")
                .or_else(|| context.extracted.as_ref().map(|e| e.product.name.clone()))
                .unwrap_or_default(),
            cwe_ids: cve.cwe_ids.clone(),
            containers: context.plan.as_ref().map(|p| p.count as u32).unwrap_or(0),
            iterations: self.total_iterations,
            poc_present: context
                .language_info
                .as_ref()
                .map(|l| !l.snippets.is_empty())
                .unwrap_or(false),
            intervention: self.intervention,
            manual_postcondition: verdict.manual_postcondition_check,
            outcome: verdict.clone(),
            total_duration_secs: now_epoch() - started_at,
            started_at,
            image_name: context
                .bundle
                .as_ref()
                .map(|b| b.image_name.clone())
                .filter(|n| !n.is_empty()),
            iteration_records: self.records.clone(),
        };

        if let Some(ledger) = self.ledger {
            ledger.append_run(&record)?;
        }

        let run_dir = self.options.workspace_root.join(cve.cve_id.image_name());
        std::fs::create_dir_all(&run_dir)?;
        let resume_path = run_dir.join(RESUME_STATE_FILENAME);
        if confirmed {
            let _ = std::fs::remove_file(&resume_path);
        } else {
            let resume = ResumeState {
                cve_raw: cve.raw.clone(),
                extracted: context.extracted.clone(),
                language_info: context.language_info.clone(),
                profile: context.profile.clone(),
                plan: context.plan.clone(),
                environment: context.environment.clone(),
                bundle: Some(outcome.final_state.current_bundle.clone()),
                attempt: outcome.final_state.attempt,
                iterations_in_attempt: outcome.final_state.iteration,
                total_iterations: self.total_iterations,
                past_mistakes: outcome.final_state.past_mistakes.clone(),
                hints: outcome.final_state.hints.clone(),
                intervention: self.intervention,
                verification_claim: self.verification_claim,
                env_failed: self.env_failed,
                code_failed: self.code_failed,
                started_at,
                confirmed,
            };
            std::fs::write(
                &resume_path,
                serde_json::to_string_pretty(&resume).expect("resume state serializes"),
            )?;
        }

        Ok(PipelineResult {
            outcome,
            verdict,
            record,
        })
    }

    /// Resumes a paused or limit-terminated run with an operator hint. The
    /// final verdict can no longer be automatically verified.
    pub fn attended_resume(
        &mut self,
        workspace_root: &Path,
        hint: &str,
    ) -> Result<PipelineResult, ResumeError> {
        let (cve, resume) = load_resume_state(workspace_root)?;
        let started_at = resume.started_at;
        self.intervention = true;
        self.verification_claim = resume.verification_claim;
        self.env_failed = resume.env_failed;
        self.code_failed = resume.code_failed;
        self.total_iterations = resume.total_iterations;

        let mut context = StepContext::new(cve.clone());
        context.extracted = resume.extracted.clone();
        context.language_info = resume.language_info.clone();
        context.profile = resume.profile.clone();
        context.plan = resume.plan.clone();
        context.environment = resume.environment.clone();
        context.bundle = resume.bundle.clone();

        let mut hints = resume.hints.clone();
        {
            let trimmed = hint.trim();
            if trimmed.is_empty() {
                return Err(ResumeError::Hint(EmptyHint));
            }
            hints.push(trimmed.to_string());
        }

        let config = self.options.config;
        let (attempt, start_iteration, bundle) = if resume.attempt < config.max_attempts {
            // A fresh attempt: regenerate the environment and script.
            let attempt = resume.attempt + 1;
            match self.generate_attempt_artifacts(&mut context, &cve, attempt, &hints) {
                Ok(bundle) => (attempt, 0, bundle),
                Err(step) => {
                    return Err(ResumeError::Pipeline(PipelineError::Stage {
                        step: "resume",
                        message: format!("artifact regeneration failed at {step}"),
                    }));
                }
            }
        } else {
            // Attempts exhausted: continue the final attempt where it
            // stopped, with a fresh iteration budget.
            let bundle = resume.bundle.clone().ok_or_else(|| {
                ResumeError::Pipeline(PipelineError::Stage {
                    step: "resume",
                    message: "stored state has no bundle to continue from".into(),
                })
            })?;
            (resume.attempt, resume.iterations_in_attempt, bundle)
        };

        let state = LoopState {
            attempt,
            iteration: start_iteration,
            current_bundle: bundle,
            past_mistakes: resume.past_mistakes.clone(),
            hints,
            history: Vec::new(),
        };
        let iteration_budget = start_iteration + config.max_iterations;
        let outcome = self.run_attempt(state, &mut context, &cve, iteration_budget);

        let confirmed = outcome.termination == Termination::Confirmed;
        let confirmed_execution = confirmed
            .then(|| self.load_last_execution(&cve, &outcome))
            .flatten();
        self.finish_run(cve, context, outcome, confirmed_execution, started_at)
            .map_err(ResumeError::Pipeline)
    }
}

fn load_resume_state(workspace_root: &Path) -> Result<(CveRecord, ResumeState), ResumeError> {
    // The workspace root holds one directory per CVE; a resumable run is
    // one whose resume state exists and is not confirmed.
    let mut candidates = Vec::new();
    if workspace_root.join(RESUME_STATE_FILENAME).exists() {
        candidates.push(workspace_root.to_path_buf());
    }
    if let Ok(entries) = std::fs::read_dir(workspace_root) {
        for entry in entries.flatten() {
            let dir = entry.path();
            if dir.join(RESUME_STATE_FILENAME).exists() {
                candidates.push(dir);
            }
        }
    }
    for dir in candidates {
        let text = std::fs::read_to_string(dir.join(RESUME_STATE_FILENAME))
            .map_err(|e| ResumeError::Pipeline(PipelineError::Io(e)))?;
        let state: ResumeState = serde_json::from_str(&text).map_err(|e| {
            ResumeError::Pipeline(PipelineError::Stage {
                step: "resume",
                message: format!("corrupt resume state: {e}"),
            })
        })?;
        if state.confirmed {
            continue;
        }
        let record = crate::cve_model::parse_cve_record(&state.cve_raw.to_string())
            .map_err(|e| {
                ResumeError::Pipeline(PipelineError::Stage {
                    step: "resume",
                    message: e.to_string(),
                })
            })?;
        return Ok((record, state));
    }
    Err(ResumeError::NoResumableRun(workspace_root.to_path_buf()))
}

fn stage_error(step: &'static str, failure: StageFailure) -> PipelineError {
    match failure {
        StageFailure::Gateway(e) => PipelineError::Gateway(e),
        other => PipelineError::Stage {
            step,
            message: other.to_string(),
        },
    }
}

fn execution_digest(execution: &ExecutionResult) -> ExecutionDigest {
    ExecutionDigest {
        exit_code: execution.exit_code,
        duration_secs: execution.duration_secs,
        timed_out: execution.timed_out,
    }
}

fn failure_digest(
    attempt: u32,
    iteration: u32,
    execution: &ExecutionResult,
    distilled: &str,
) -> String {
    let first_error = distilled
        .lines()
        .find(|l| crate::sandbox_runner::looks_like_failure_line(l))
        .unwrap_or("no diagnostic line retained");
    format!(
        "attempt {attempt} iteration {iteration}: exit {}{}; {}",
        execution.exit_code,
        if execution.timed_out { " (timed out)" } else { "" },
        first_error.trim()
    )
}

fn join_hints(hints: &[String], directive: Option<&str>) -> Option<String> {
    let mut parts: Vec<String> = Vec::new();
    if let Some(d) = directive {
        parts.push(d.to_string());
    }
    parts.extend(hints.iter().cloned());
    if parts.is_empty() {
        None
    } else {
        Some(parts.join("\n"))
    }
}

fn placeholder_bundle() -> ExploitBundle {
    ExploitBundle {
        script: String::new(),
        embedded_files: Vec::new(),
        image_name: String::new(),
        expected_markers: Vec::new(),
        confidence_declared: None,
    }
}

fn now_epoch() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_secs_f64()
}
