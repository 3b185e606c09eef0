//! Engine for reproducing known CVE attacks inside containerized environments.
//!
//! The pipeline turns a CVE JSON record into a container environment plus a
//! single self-contained driver script, iteratively repairs both against
//! compiler/runtime feedback obtained through a pluggable chat-completion
//! backend, and grades the outcome against the vulnerability's extracted
//! post-conditions.
//!
//! Stages, in order:
//!
//! 1. content extraction from the CVE record ([`cve_model`])
//! 2. exploit-language and code-snippet retrieval ([`cve_model`])
//! 3. pre-/post-condition and reproduction-step extraction ([`constraint_engine`])
//! 4. container topology planning and environment generation ([`env_planner`])
//! 5. driver-script generation and reassessment ([`exploit_builder`])
//! 6. sandboxed execution with log distillation ([`sandbox_runner`])
//! 7. the closed refinement loop ([`refinement_loop`])
//! 8. verdict grading and persistence ([`verdict_engine`], [`run_ledger`])
//!
//! Backends and execution engines are pluggable; scripted/fake variants make
//! every stage replayable offline from recorded transcripts.

pub mod constraint_engine;
pub mod cve_model;
pub mod env_planner;
pub mod exploit_builder;
pub mod llm_gateway;
pub mod prompt_catalog;
pub mod refinement_loop;
pub mod run_ledger;
pub mod sandbox_runner;
pub mod strict_json;
pub mod verdict_engine;

pub use constraint_engine::{CwePointer, VulnerabilityProfile};
pub use cve_model::{CveRecord, ExtractedContent, LanguageAndSnippets};
pub use env_planner::{ContainerPlan, ContainerSpec, EnvironmentBundle, LintFinding};
pub use exploit_builder::ExploitBundle;
pub use llm_gateway::{BackendDescriptor, ChatMessage, ChatRequest, Gateway, Role, StepTag};
pub use prompt_catalog::{PromptCatalog, StepContext, StepId};
pub use refinement_loop::{LoopConfig, LoopOutcome, LoopState, PipelineResult, Termination};
pub use run_ledger::{IterationRecord, LedgerStats, LedgerStore, RunRecord};
pub use sandbox_runner::{DistilledLog, ExecutionResult, Workspace};
pub use verdict_engine::{MarkerEvent, Outcome, SanitizerFinding, Verdict};
