//! The `step` subcommand: run one pipeline stage against stored
//! prior-stage outputs, for debugging transcripts stage by stage.
//!
//! Stage outputs persist under `<workdir>/<cve-id>/steps/` as JSON
//! documents; each stage loads what the earlier stages wrote.

use std::path::{Path, PathBuf};

use cvepipe_core::constraint_engine::{self, VulnerabilityProfile};
use cvepipe_core::cve_model::{
    parse_cve_record, validate_extracted_content, validate_language_extraction, CveRecord,
    ExtractedContent, LanguageAndSnippets,
};
use cvepipe_core::env_planner::{self, ContainerPlan, EnvironmentBundle};
use cvepipe_core::exploit_builder::{self, ExploitBundle};
use cvepipe_core::llm_gateway::ChatRequest;
use cvepipe_core::prompt_catalog::{PromptCatalog, StepContext, StepId};
use cvepipe_core::refinement_loop::{classify_model_reply, ReplyClass};
use cvepipe_core::sandbox_runner::distill_log;

use crate::{build_runtime, BackendFlags};

type CmdResult = Result<u8, Box<dyn std::error::Error>>;

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("{} (run the earlier stages first): {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializes"))
}

struct StepStore {
    dir: PathBuf,
}

impl StepStore {
    fn extracted(&self) -> Result<ExtractedContent, String> {
        load_json(&self.dir.join("extracted.json"))
    }
    fn language(&self) -> Result<LanguageAndSnippets, String> {
        load_json(&self.dir.join("language.json"))
    }
    fn profile(&self) -> Result<VulnerabilityProfile, String> {
        load_json(&self.dir.join("profile.json"))
    }
    fn plan(&self) -> Result<ContainerPlan, String> {
        load_json(&self.dir.join("plan.json"))
    }
    fn environment(&self) -> Result<EnvironmentBundle, String> {
        load_json(&self.dir.join("environment.json"))
    }
    fn bundle(&self) -> Result<ExploitBundle, String> {
        load_json(&self.dir.join("bundle.json"))
    }
}

pub fn cmd_step(
    step: &str,
    cve_path: &Path,
    attempt: u32,
    iteration: u32,
    log: Option<PathBuf>,
    flags: BackendFlags,
    config: Option<PathBuf>,
) -> CmdResult {
    let Some(step_id) = StepId::from_tag(step) else {
        eprintln!("error: unknown step `{step}`");
        return Ok(2);
    };
    let document = std::fs::read_to_string(cve_path)?;
    let record: CveRecord = parse_cve_record(&document)?;

    let mut runtime = build_runtime(flags, config)?;
    let store = StepStore {
        dir: runtime
            .options
            .workspace_root
            .join(record.cve_id.image_name())
            .join("steps"),
    };
    let catalog = PromptCatalog::builtin();
    let persona = runtime.options.persona.clone();

    let mut context = StepContext::new(record.clone());
    match step_id {
        StepId::S1_1 => {}
        StepId::S1_2 => context.extracted = Some(store.extracted()?),
        StepId::S2 => {
            context.extracted = Some(store.extracted()?);
            context.language_info = Some(store.language()?);
        }
        StepId::S3_1 => context.profile = Some(store.profile()?),
        StepId::S3_2 => {
            context.profile = Some(store.profile()?);
            context.plan = Some(store.plan()?);
        }
        StepId::S4 | StepId::S5 => {
            context.language_info = store.language().ok();
            context.profile = Some(store.profile()?);
            context.plan = Some(store.plan()?);
            context.environment = Some(store.environment()?);
            if step_id == StepId::S5 {
                context.bundle = Some(store.bundle()?);
            } else {
                context.hint = catalog
                    .attempt_strategy_directive(attempt)
                    .ok()
                    .map(str::to_string);
            }
        }
        StepId::S8 => {
            context.profile = Some(store.profile()?);
            context.plan = Some(store.plan()?);
            context.environment = Some(store.environment()?);
            context.bundle = Some(store.bundle()?);
            let log_path = log.ok_or("stage s8 requires --log <execution log>")?;
            let raw = std::fs::read_to_string(&log_path)?;
            context.distilled_log =
                Some(distill_log(&raw, runtime.options.distill_budget).render());
        }
    }
    if context.language_info.is_none() && step_id == StepId::S4 {
        context.language_info = Some(LanguageAndSnippets {
            exploit_language: context
                .profile
                .as_ref()
                .map(|p| p.exploit_language.clone())
                .unwrap_or_default(),
            snippets: vec![],
        });
    }

    let messages = catalog.render_step(step_id, &context, persona.as_deref())?;
    let request = ChatRequest::new(messages, step_id.step_tag(attempt, iteration));
    let reply = runtime.gateway.complete(&request)?.text;

    match step_id {
        StepId::S1_1 => {
            let (extracted, _) = validate_extracted_content(&reply)?;
            save_json(&store.dir.join("extracted.json"), &extracted)?;
            println!("{}", serde_json::to_string_pretty(&extracted.to_reply_json())?);
        }
        StepId::S1_2 => {
            let (language, _) = validate_language_extraction(&reply)?;
            save_json(&store.dir.join("language.json"), &language)?;
            println!("{}", serde_json::to_string_pretty(&language.to_reply_json())?);
        }
        StepId::S2 => {
            let profile = constraint_engine::validate_profile(&reply)?;
            save_json(&store.dir.join("profile.json"), &profile)?;
            println!("{}", profile.to_prompt_text());
        }
        StepId::S3_1 => {
            let plan = env_planner::validate_container_plan(&reply)?;
            save_json(&store.dir.join("plan.json"), &plan)?;
            println!("{}", serde_json::to_string_pretty(&plan.to_reply_json())?);
        }
        StepId::S3_2 => {
            let plan = context.plan.as_ref().expect("plan loaded");
            let environment = env_planner::split_environment_output(&reply, plan)?;
            let profile = context.profile.as_ref().expect("profile loaded");
            let findings = env_planner::lint_environment(&environment, plan, profile);
            save_json(&store.dir.join("environment.json"), &environment)?;
            if !findings.is_empty() {
                println!("{}", env_planner::findings_to_jsonl(&findings));
            }
            println!("files: {}", environment.files.len());
            if env_planner::has_errors(&findings) {
                return Ok(1);
            }
        }
        StepId::S4 | StepId::S5 => {
            let profile = context.profile.as_ref().expect("profile loaded");
            let (bundle, warnings) =
                exploit_builder::validate_exploit_bundle(&reply, &record.cve_id, profile)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            std::fs::write(store.dir.join("exploit.sh"), &bundle.script)?;
            save_json(&store.dir.join("bundle.json"), &bundle)?;
            println!("image: {}", bundle.image_name);
            println!("embedded_files: {}", bundle.embedded_files.len());
        }
        StepId::S8 => match classify_model_reply(&reply) {
            ReplyClass::Confirmed { .. } => println!("classification: confirmed"),
            ReplyClass::RevisedScript { .. } => {
                let profile = context.profile.as_ref().expect("profile loaded");
                let (bundle, _) =
                    exploit_builder::validate_exploit_bundle(&reply, &record.cve_id, profile)?;
                std::fs::write(store.dir.join("exploit.sh"), &bundle.script)?;
                save_json(&store.dir.join("bundle.json"), &bundle)?;
                println!("classification: revised_script");
            }
            ReplyClass::Invalid { reason } => {
                println!("classification: invalid ({reason})");
                return Ok(1);
            }
        },
    }
    Ok(0)
}
