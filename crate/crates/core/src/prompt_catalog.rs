//! The eight step prompts as fixed text assets, plus per-step message
//! assembly.
//!
//! Template bodies ship under `assets/prompts/` and are embedded at compile
//! time; the manifest pins a sha256 per body so drift fails loudly. Because
//! memory-constrained models lose track of earlier turns, every rendered
//! step re-embeds the CVE descriptions and the prior-step outputs it depends
//! on verbatim, never by allusion.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cve_model::dedupe_multilingual;
use crate::llm_gateway::{ChatMessage, StepTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepId {
    S1_1,
    S1_2,
    S2,
    S3_1,
    S3_2,
    S4,
    S5,
    S8,
}

pub const ALL_STEPS: [StepId; 8] = [
    StepId::S1_1,
    StepId::S1_2,
    StepId::S2,
    StepId::S3_1,
    StepId::S3_2,
    StepId::S4,
    StepId::S5,
    StepId::S8,
];

impl StepId {
    /// Canonical tag used in transcripts, filenames, and ledger records.
    pub fn tag(self) -> &'static str {
        match self {
            StepId::S1_1 => "s1.1",
            StepId::S1_2 => "s1.2",
            StepId::S2 => "s2",
            StepId::S3_1 => "s3.1",
            StepId::S3_2 => "s3.2",
            StepId::S4 => "s4",
            StepId::S5 => "s5",
            StepId::S8 => "s8",
        }
    }

    pub fn from_tag(tag: &str) -> Option<StepId> {
        ALL_STEPS.iter().copied().find(|s| s.tag() == tag)
    }

    pub fn step_tag(self, attempt: u32, iteration: u32) -> StepTag {
        StepTag::new(self.tag(), attempt, iteration)
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub step_id: StepId,
    pub body: &'static str,
    pub required_placeholders: BTreeSet<String>,
    pub sha256: String,
}

/// Everything earlier steps have produced for one CVE run. Fields populate
/// monotonically in step order; a step's renderer reads only fields produced
/// before it.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub cve: crate::cve_model::CveRecord,
    pub extracted: Option<crate::cve_model::ExtractedContent>,
    pub language_info: Option<crate::cve_model::LanguageAndSnippets>,
    pub profile: Option<crate::constraint_engine::VulnerabilityProfile>,
    pub plan: Option<crate::env_planner::ContainerPlan>,
    pub environment: Option<crate::env_planner::EnvironmentBundle>,
    pub bundle: Option<crate::exploit_builder::ExploitBundle>,
    pub distilled_log: Option<String>,
    pub past_mistakes: Vec<String>,
    pub hint: Option<String>,
}

impl StepContext {
    pub fn new(cve: crate::cve_model::CveRecord) -> Self {
        StepContext {
            cve,
            extracted: None,
            language_info: None,
            profile: None,
            plan: None,
            environment: None,
            bundle: None,
            distilled_log: None,
            past_mistakes: Vec::new(),
            hint: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("step {step} requires context field `{field}` which is not populated yet")]
    MissingContext { step: &'static str, field: &'static str },
    #[error("unknown step `{0}`")]
    UnknownStep(String),
    #[error("template for {step} still contains unfilled placeholder `{name}`")]
    UnfilledPlaceholder { step: &'static str, name: String },
}

#[derive(Debug, Error)]
#[error("attempt number {0} is outside the three-attempt limit")]
pub struct AttemptExhausted(pub u32);

const MANIFEST_JSON: &str = include_str!("../assets/prompts/manifest.json");

macro_rules! template_body {
    ($file:literal) => {
        include_str!(concat!("../assets/prompts/", $file))
    };
}

fn builtin_bodies() -> [(StepId, &'static str); 8] {
    [
        (StepId::S1_1, template_body!("s1_1.txt")),
        (StepId::S1_2, template_body!("s1_2.txt")),
        (StepId::S2, template_body!("s2.txt")),
        (StepId::S3_1, template_body!("s3_1.txt")),
        (StepId::S3_2, template_body!("s3_2.txt")),
        (StepId::S4, template_body!("s4.txt")),
        (StepId::S5, template_body!("s5.txt")),
        (StepId::S8, template_body!("s8.txt")),
    ]
}

#[derive(Debug, Deserialize)]
struct ManifestFile {
    templates: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    step: String,
    file: String,
    sha256: String,
    placeholders: Vec<String>,
}

/// Per-attempt steering sentences. Each of the three attempts explores a
/// strategy distinct from the prior ones.
const ATTEMPT_STRATEGIES: [&str; 3] = [
    "Attempt strategy 1: follow the CVE references and any public PoC closely and reproduce the documented exploitation path step by step.",
    "Attempt strategy 2: set the references aside and derive the exploit from the CWE semantics, constructing inputs that violate the weakness class underlying this vulnerability.",
    "Attempt strategy 3: reduce the driver to a minimal direct invocation of the vulnerable function with adversarial arguments, stripping every nonessential dependency.",
];

pub const PAST_MISTAKES_ENTRY_CAP: usize = 10;
pub const PAST_MISTAKES_LINE_BUDGET: usize = 200;

pub struct PromptCatalog {
    templates: Vec<PromptTemplate>,
    strategies: Vec<String>,
}

impl PromptCatalog {
    /// Loads the embedded templates and asserts every body still matches its
    /// manifest checksum.
    pub fn builtin() -> Self {
        let manifest: ManifestFile =
            serde_json::from_str(MANIFEST_JSON).expect("prompt manifest must parse");
        let mut templates = Vec::with_capacity(8);
        for (step_id, body) in builtin_bodies() {
            let entry = manifest
                .templates
                .iter()
                .find(|e| e.step == step_id.tag())
                .unwrap_or_else(|| panic!("manifest entry missing for {}", step_id.tag()));
            let digest = hex::encode(Sha256::digest(body.as_bytes()));
            assert_eq!(
                digest, entry.sha256,
                "template body for {} ({}) does not match its manifest checksum",
                step_id.tag(),
                entry.file
            );
            templates.push(PromptTemplate {
                step_id,
                body,
                required_placeholders: entry.placeholders.iter().cloned().collect(),
                sha256: digest,
            });
        }
        PromptCatalog {
            templates,
            strategies: ATTEMPT_STRATEGIES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Replaces the three per-attempt strategy directives.
    pub fn with_strategies(mut self, strategies: Vec<String>) -> Self {
        assert_eq!(strategies.len(), 3, "exactly three attempt strategies");
        self.strategies = strategies;
        self
    }

    pub fn template(&self, step: StepId) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.step_id == step)
            .expect("all eight templates are loaded")
    }

    /// Steering sentence for attempt 1..=3.
    pub fn attempt_strategy_directive(&self, attempt_number: u32) -> Result<&str, AttemptExhausted> {
        match attempt_number {
            1..=3 => Ok(&self.strategies[(attempt_number - 1) as usize]),
            n => Err(AttemptExhausted(n)),
        }
    }

    /// Renders a step into its message list: an optional persona system
    /// message, then the filled template body as a single user message.
    ///
    /// Placeholder names come from the template text itself, before any
    /// substitution; values (logs, code) may legitimately contain `{{`.
    pub fn render_step(
        &self,
        step: StepId,
        context: &StepContext,
        persona: Option<&str>,
    ) -> Result<Vec<ChatMessage>, RenderError> {
        let template = self.template(step);
        let names = placeholder_names(template.body);
        for name in &names {
            if !template.required_placeholders.contains(name) {
                return Err(RenderError::UnfilledPlaceholder {
                    step: step.tag(),
                    name: name.clone(),
                });
            }
        }
        let mut body = template.body.to_string();
        for name in &names {
            let value = placeholder_value(step, name, context)?;
            body = body.replace(&format!("{{{{{name}}}}}"), &value);
        }

        let mut messages = Vec::with_capacity(2);
        match persona {
            Some(p) if !p.trim().is_empty() => messages.push(ChatMessage::system(p)),
            _ => {}
        }
        messages.push(ChatMessage::user(body));
        Ok(messages)
    }

    /// String-tag front end for `render_step`, used by the single-step CLI.
    pub fn render_step_tag(
        &self,
        tag: &str,
        context: &StepContext,
        persona: Option<&str>,
    ) -> Result<Vec<ChatMessage>, RenderError> {
        let step = StepId::from_tag(tag).ok_or_else(|| RenderError::UnknownStep(tag.to_string()))?;
        self.render_step(step, context, persona)
    }
}

/// `{{snake_case}}` slots appearing in a template body, in order, deduped.
fn placeholder_names(body: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        if let Some(close) = after.find("}}") {
            let candidate = &after[..close];
            if !candidate.is_empty()
                && candidate
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            {
                if !names.contains(&candidate.to_string()) {
                    names.push(candidate.to_string());
                }
                rest = &after[close + 2..];
                continue;
            }
        }
        rest = &rest[open + 2..];
    }
    names
}

fn missing(step: StepId, field: &'static str) -> RenderError {
    RenderError::MissingContext {
        step: step.tag(),
        field,
    }
}

fn placeholder_value(
    step: StepId,
    name: &str,
    ctx: &StepContext,
) -> Result<String, RenderError> {
    let pretty = |v: &serde_json::Value| serde_json::to_string_pretty(v).expect("value serializes");
    match name {
        "cve_record" => Ok(pretty(&ctx.cve.raw)),
        "cve_descriptions" => {
            let texts = dedupe_multilingual(&ctx.cve.descriptions);
            if texts.is_empty() {
                Ok("(none)".into())
            } else {
                Ok(texts.join("\n\n"))
            }
        }
        "extracted" => ctx
            .extracted
            .as_ref()
            .map(|e| pretty(&e.to_reply_json()))
            .ok_or(missing(step, "extracted")),
        "language_info" => ctx
            .language_info
            .as_ref()
            .map(|l| pretty(&l.to_reply_json()))
            .ok_or(missing(step, "language_info")),
        "profile" => ctx
            .profile
            .as_ref()
            .map(|p| p.to_prompt_text())
            .ok_or(missing(step, "profile")),
        "conditions" => ctx
            .profile
            .as_ref()
            .map(|p| p.conditions_text())
            .ok_or(missing(step, "profile")),
        "plan" => ctx
            .plan
            .as_ref()
            .map(|p| pretty(&p.to_reply_json()))
            .ok_or(missing(step, "plan")),
        "environment" => ctx
            .environment
            .as_ref()
            .map(|e| e.to_prompt_text())
            .ok_or(missing(step, "environment")),
        "script" => ctx
            .bundle
            .as_ref()
            .map(|b| b.script.clone())
            .ok_or(missing(step, "bundle")),
        "terminal_output" => ctx
            .distilled_log
            .clone()
            .ok_or(missing(step, "distilled_log")),
        "past_mistakes" => Ok(or_none(build_refinement_preamble(&ctx.past_mistakes))),
        "hints" => Ok(or_none(ctx.hint.clone().unwrap_or_default())),
        // S8 re-anchoring block: full profile/plan/environment context,
        // re-embedded only on the iterations the loop decides to re-anchor
        // (it passes plan/environment then; otherwise the block is empty).
        "full_context" => {
            let mut parts = Vec::new();
            if let (Some(plan), Some(env)) = (&ctx.plan, &ctx.environment) {
                if let Some(profile) = &ctx.profile {
                    parts.push(profile.to_prompt_text());
                }
                parts.push(plan.to_reply_json().to_string());
                parts.push(env.to_prompt_text());
            }
            Ok(or_none(parts.join("\n\n")))
        }
        other => Err(RenderError::UnfilledPlaceholder {
            step: step.tag(),
            name: other.to_string(),
        }),
    }
}

fn or_none(text: String) -> String {
    if text.trim().is_empty() {
        "(none)".into()
    } else {
        text
    }
}

/// Deterministic numbered digest of previously failed strategies: newest
/// last, capped to the newest ten entries, each truncated to 200 characters.
pub fn build_refinement_preamble(past_mistakes: &[String]) -> String {
    if past_mistakes.is_empty() {
        return String::new();
    }
    let start = past_mistakes.len().saturating_sub(PAST_MISTAKES_ENTRY_CAP);
    past_mistakes[start..]
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let mut line: String = entry.chars().take(PAST_MISTAKES_LINE_BUDGET).collect();
            if entry.chars().count() > PAST_MISTAKES_LINE_BUDGET {
                line.push('…');
            }
            format!("{}. {}", i + 1, line.replace('\n', " "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cve_model::parse_cve_record;

    fn minimal_context() -> StepContext {
        let record = parse_cve_record(
            r#"{"cveMetadata": {"cveId": "CVE-2023-25668"},
                "containers": {"cna": {"descriptions": [
                  {"lang": "en", "value": "TensorFlow heap out of bounds."}]}}}"#,
        )
        .unwrap();
        StepContext::new(record)
    }

    #[test]
    fn catalog_loads_and_checksums_hold() {
        let catalog = PromptCatalog::builtin();
        for step in ALL_STEPS {
            assert!(!catalog.template(step).body.is_empty());
        }
    }

    #[test]
    fn rendering_is_pure() {
        let catalog = PromptCatalog::builtin();
        let ctx = minimal_context();
        let a = catalog.render_step(StepId::S1_1, &ctx, Some("persona text")).unwrap();
        let b = catalog.render_step(StepId::S1_1, &ctx, Some("persona text")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].content, "persona text");
        assert!(a[1].content.contains("CVE-2023-25668"));
        assert!(!a[1].content.contains("{{"));
    }

    #[test]
    fn persona_defaults_to_absent() {
        let catalog = PromptCatalog::builtin();
        let ctx = minimal_context();
        let messages = catalog.render_step(StepId::S1_1, &ctx, None).unwrap();
        assert_eq!(messages.len(), 1);
    }

    #[test]
    fn missing_plan_fails_s4() {
        let catalog = PromptCatalog::builtin();
        let ctx = minimal_context();
        // S4's first required gap in this empty context is reported by field.
        let err = catalog.render_step(StepId::S4, &ctx, None).unwrap_err();
        assert!(matches!(err, RenderError::MissingContext { step: "s4", .. }));
    }

    #[test]
    fn unknown_step_tag_is_rejected() {
        let catalog = PromptCatalog::builtin();
        let ctx = minimal_context();
        assert!(matches!(
            catalog.render_step_tag("s9", &ctx, None),
            Err(RenderError::UnknownStep(_))
        ));
    }

    #[test]
    fn preamble_of_nothing_is_empty() {
        assert_eq!(build_refinement_preamble(&[]), "");
    }

    #[test]
    fn preamble_numbers_entries() {
        let out = build_refinement_preamble(&["used wrong frame count".to_string()]);
        assert_eq!(out, "1. used wrong frame count");
    }

    #[test]
    fn preamble_keeps_newest_ten_of_fifty() {
        let entries: Vec<String> = (0..50).map(|i| format!("mistake {i}")).collect();
        let out = build_refinement_preamble(&entries);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], "1. mistake 40");
        assert_eq!(lines[9], "10. mistake 49");
    }

    #[test]
    fn preamble_truncates_long_entries() {
        let out = build_refinement_preamble(&["x".repeat(500)]);
        // "1. " + 200 chars + ellipsis
        assert_eq!(out.chars().count(), 3 + 200 + 1);
    }

    #[test]
    fn strategies_are_pairwise_distinct() {
        let catalog = PromptCatalog::builtin();
        let d1 = catalog.attempt_strategy_directive(1).unwrap();
        let d2 = catalog.attempt_strategy_directive(2).unwrap();
        let d3 = catalog.attempt_strategy_directive(3).unwrap();
        assert_ne!(d1, d2);
        assert_ne!(d2, d3);
        assert_ne!(d1, d3);
        assert!(d1.contains("PoC"));
    }

    #[test]
    fn attempt_four_is_exhausted() {
        let catalog = PromptCatalog::builtin();
        assert!(catalog.attempt_strategy_directive(4).is_err());
        assert!(catalog.attempt_strategy_directive(0).is_err());
    }
}
