//! Driver-script validation and reassessment.
//!
//! The code-generation stage must answer with one self-contained Bash script
//! that creates every file it needs (heredocs), builds the container image
//! named after the CVE (lower case), runs it, and greps the output for the
//! trigger marker. The validator enforces that shape, extracts the embedded
//! file manifest, and records any confidence the reply declares. A second
//! pass cross-checks generated code against the profile's reproduction
//! steps to catch simulated implementations of the vulnerable function.

use std::collections::HashMap;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::constraint_engine::VulnerabilityProfile;
use crate::cve_model::CveId;
use crate::env_planner::is_compose_file;
use crate::llm_gateway::{Completion, Gateway, GatewayError};
use crate::prompt_catalog::{PromptCatalog, RenderError, StepContext, StepId};

pub const TRIGGER_MARKERS: [&str; 2] = ["VULNERABILITY TRIGGERED", "VULNERABILITY_TRIGGERED"];
pub const MIN_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddedFileKind {
    Code,
    BuildFile,
    Compose,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddedFile {
    pub name: String,
    pub kind: EmbeddedFileKind,
    pub content: String,
}

/// A validated driver script plus everything extracted from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitBundle {
    pub script: String,
    pub embedded_files: Vec<EmbeddedFile>,
    pub image_name: String,
    pub expected_markers: Vec<String>,
    pub confidence_declared: Option<f64>,
}

impl ExploitBundle {
    pub fn code_files(&self) -> impl Iterator<Item = &EmbeddedFile> {
        self.embedded_files
            .iter()
            .filter(|f| matches!(f.kind, EmbeddedFileKind::Code | EmbeddedFileKind::Test))
    }

    /// Manifest in the shape persisted next to `exploit.sh`.
    pub fn manifest_json(&self) -> serde_json::Value {
        serde_json::json!({
            "image_name": self.image_name,
            "expected_markers": self.expected_markers,
            "confidence_declared": self.confidence_declared,
            "embedded_files": self.embedded_files.iter().map(|f| {
                serde_json::json!({"name": f.name, "kind": f.kind})
            }).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Build,
    Run,
    Verify,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Build => "build",
            Phase::Run => "run",
            Phase::Verify => "verify",
        })
    }
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("reply is not a single script: {0}")]
    NotASingleScript(String),
    #[error("script lacks its {0} phase")]
    MissingPhase(Phase),
    #[error("script builds image `{found}` but the rules require `{expected}`")]
    WrongImageName { expected: String, found: String },
    #[error("declared confidence {0:.2} is below the {MIN_CONFIDENCE} gate")]
    ConfidenceBelowThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulationKind {
    NotInvoked,
    LocallyRedefined,
}

/// Evidence that generated code sidestepped the actual vulnerable symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationFinding {
    pub symbol: String,
    pub kind: SimulationKind,
    pub evidence: String,
}

#[derive(Debug, Error)]
#[error("no callable symbols extractable from the profile steps")]
pub struct NoSymbolsExtractable;

struct Heredoc {
    target: Option<String>,
    content: String,
}

struct ScriptScan {
    /// (1-based line number, text) of lines outside heredoc bodies.
    command_lines: Vec<(usize, String)>,
    heredocs: Vec<Heredoc>,
    variables: HashMap<String, String>,
}

fn heredoc_start() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"<<-?\s*(?:'(?P<q>[A-Za-z_][A-Za-z0-9_]*)'|"(?P<d>[A-Za-z_][A-Za-z0-9_]*)"|(?P<b>[A-Za-z_][A-Za-z0-9_]*))"#).unwrap())
}

fn redirect_target() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#">>?\s*"?(?P<t>[^\s">]+)"?"#).unwrap())
}

fn assignment() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"^(?:export\s+)?(?P<n>[A-Za-z_][A-Za-z0-9_]*)=(?:"(?P<q>[^"]*)"|'(?P<s>[^']*)'|(?P<b>\S+))\s*$"#)
            .unwrap()
    })
}

fn scan_script(script: &str) -> ScriptScan {
    let mut command_lines = Vec::new();
    let mut heredocs = Vec::new();
    let mut variables = HashMap::new();
    let mut lines = script.lines().enumerate().peekable();

    while let Some((i, line)) = lines.next() {
        command_lines.push((i + 1, line.to_string()));
        if let Some(caps) = assignment().captures(line.trim()) {
            let value = caps
                .name("q")
                .or_else(|| caps.name("s"))
                .or_else(|| caps.name("b"))
                .map(|m| m.as_str().to_string())
                .unwrap_or_default();
            variables.insert(caps["n"].to_string(), value);
        }
        if let Some(caps) = heredoc_start().captures(line) {
            let delimiter = caps
                .name("q")
                .or_else(|| caps.name("d"))
                .or_else(|| caps.name("b"))
                .unwrap()
                .as_str()
                .to_string();
            let target = redirect_target()
                .captures(line)
                .map(|c| c["t"].to_string())
                .or_else(|| tee_target(line));
            let mut content = String::new();
            for (_, body_line) in lines.by_ref() {
                if body_line.trim() == delimiter {
                    break;
                }
                content.push_str(body_line);
                content.push('\n');
            }
            heredocs.push(Heredoc { target, content });
        }
    }
    ScriptScan {
        command_lines,
        heredocs,
        variables,
    }
}

fn tee_target(line: &str) -> Option<String> {
    let re = {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r#"\btee\s+(?:-a\s+)?"?(?P<t>[^\s"|]+)"?"#).unwrap())
    };
    re.captures(line).map(|c| c["t"].to_string())
}

/// Expands `$NAME` / `${NAME}` against literal assignments found in the
/// script, a few rounds deep.
fn resolve_vars(text: &str, variables: &HashMap<String, String>) -> String {
    let mut out = text.to_string();
    for _ in 0..3 {
        let mut next = out.clone();
        for (name, value) in variables {
            next = next.replace(&format!("${{{name}}}"), value);
            next = next.replace(&format!("${name}"), value);
        }
        if next == out {
            break;
        }
        out = next;
    }
    out
}

fn strip_script_fence(reply: &str) -> (&str, bool) {
    let trimmed = reply.trim();
    if !trimmed.starts_with("```") {
        return (reply, false);
    }
    let Some(first_newline) = trimmed.find('\n') else {
        return (reply, false);
    };
    let rest = &trimmed[first_newline + 1..];
    let Some(closer) = rest.rfind("```") else {
        return (reply, false);
    };
    if !rest[closer + 3..].trim().is_empty() {
        return (reply, false);
    }
    (&rest[..closer], true)
}

/// Shape check shared with reply classification: one shebang, nothing but
/// blank lines, comments, or a stray `set -e` before it.
pub fn is_single_script(reply: &str) -> Result<String, BundleError> {
    let (body, _) = strip_script_fence(reply);
    let mut saw_shebang = false;
    for line in body.lines() {
        let t = line.trim();
        if t.starts_with("#!") {
            saw_shebang = true;
            break;
        }
        if t.is_empty() || t.starts_with('#') || t == "set -e" || t == "set -euo pipefail" {
            continue;
        }
        return Err(BundleError::NotASingleScript(format!(
            "non-comment text before the shebang: `{}`",
            t.chars().take(60).collect::<String>()
        )));
    }
    if !saw_shebang {
        return Err(BundleError::NotASingleScript("no shebang line".into()));
    }
    let scan = scan_script(body);
    let shebangs = scan
        .command_lines
        .iter()
        .filter(|(_, l)| l.trim_start().starts_with("#!"))
        .count();
    if shebangs != 1 {
        return Err(BundleError::NotASingleScript(format!(
            "{shebangs} shebang lines outside heredocs, expected exactly 1"
        )));
    }
    Ok(body.trim_start_matches('\n').to_string())
}

fn classify_embedded(name: &str, content: &str) -> EmbeddedFileKind {
    let basename = name.rsplit('/').next().unwrap_or(name);
    if is_compose_file(basename, content) {
        EmbeddedFileKind::Compose
    } else if basename.starts_with("Dockerfile") {
        EmbeddedFileKind::BuildFile
    } else if basename.to_lowercase().contains("test") {
        EmbeddedFileKind::Test
    } else {
        EmbeddedFileKind::Code
    }
}

fn quoted_strings(line: &str) -> Vec<String> {
    let re = {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r#""([^"]+)"|'([^']+)'"#).unwrap())
    };
    re.captures_iter(line)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .map(|m| m.as_str().to_string())
        .collect()
}

fn confidence_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)confidence[^0-9%]{0,30}(\d{1,3})\s*%").unwrap())
}

/// Validates a code-generation (or revision) reply into an [`ExploitBundle`].
///
/// Checks, in order: single-script shape, embedded-file extraction, the
/// build/run/verify phases, and the lower-cased CVE image name. Declared
/// confidence is recorded, not gated here (see [`enforce_confidence_gate`]).
pub fn validate_exploit_bundle(
    reply: &str,
    cve_id: &CveId,
    _profile: &VulnerabilityProfile,
) -> Result<(ExploitBundle, Vec<String>), BundleError> {
    let mut warnings = Vec::new();
    let (_, fence_stripped) = strip_script_fence(reply);
    if fence_stripped {
        warnings.push("markdown fence around the script was stripped".to_string());
    }
    let script = is_single_script(reply)?;
    let scan = scan_script(&script);

    let mut embedded_files = Vec::new();
    for heredoc in &scan.heredocs {
        let Some(raw_target) = &heredoc.target else {
            continue;
        };
        let name = resolve_vars(raw_target, &scan.variables);
        let name = name.rsplit('/').next().unwrap_or(&name).to_string();
        embedded_files.push(EmbeddedFile {
            kind: classify_embedded(&name, &heredoc.content),
            name,
            content: heredoc.content.clone(),
        });
    }

    // Build files that COPY a concrete code file the script never creates
    // point at a phantom; the container build would fail on it.
    let names: Vec<&str> = embedded_files.iter().map(|f| f.name.as_str()).collect();
    for file in &embedded_files {
        if file.kind != EmbeddedFileKind::BuildFile {
            continue;
        }
        for line in file.content.lines() {
            let t = line.trim_start();
            if !(t.starts_with("COPY") || t.starts_with("ADD")) {
                continue;
            }
            let args: Vec<&str> = t
                .split_whitespace()
                .skip(1)
                .filter(|a| !a.starts_with("--"))
                .collect();
            if let Some(src) = args.first() {
                let base = src.rsplit('/').next().unwrap_or(src);
                if base.contains('.')
                    && !base.contains('*')
                    && !src.starts_with('$')
                    && !names.contains(&base)
                {
                    warnings.push(format!(
                        "{} copies `{src}` which the script does not create",
                        file.name
                    ));
                }
            }
        }
    }

    let mut build_seen = false;
    let mut run_seen = false;
    let mut image_names = Vec::new();
    let mut markers = Vec::new();
    for (_, line) in &scan.command_lines {
        let resolved = resolve_vars(line, &scan.variables);
        if resolved.contains("docker build") || resolved.contains("docker-compose build") {
            build_seen = true;
            if let Some(caps) = {
                static RE: OnceLock<Regex> = OnceLock::new();
                RE.get_or_init(|| Regex::new(r"docker\s+build\s+.*-t\s+(\S+)").unwrap())
            }
            .captures(&resolved)
            {
                image_names.push(caps[1].trim_matches('"').to_string());
            }
        }
        if resolved.contains("docker-compose up")
            || resolved.contains("docker compose up")
            || resolved.contains("docker-compose build")
        {
            build_seen = true;
            run_seen = run_seen || resolved.contains("up");
        }
        if resolved.contains("docker run") {
            run_seen = true;
        }
        if line.contains("grep") {
            for s in quoted_strings(line) {
                if !markers.contains(&s) {
                    markers.push(s);
                }
            }
        }
    }

    if !build_seen {
        return Err(BundleError::MissingPhase(Phase::Build));
    }
    if !run_seen {
        return Err(BundleError::MissingPhase(Phase::Run));
    }
    let has_trigger_marker = markers
        .iter()
        .any(|m| TRIGGER_MARKERS.iter().any(|t| m.contains(t)));
    if !has_trigger_marker {
        return Err(BundleError::MissingPhase(Phase::Verify));
    }

    let expected = cve_id.image_name();
    if !image_names.is_empty() && !image_names.iter().any(|n| *n == expected) {
        return Err(BundleError::WrongImageName {
            expected,
            found: image_names[0].clone(),
        });
    }

    let confidence_declared = confidence_pattern()
        .captures(&script)
        .and_then(|c| c[1].parse::<f64>().ok())
        .map(|pct| pct / 100.0);
    if confidence_declared.is_none() {
        warnings.push("reply declares no confidence level".to_string());
    }

    Ok((
        ExploitBundle {
            script,
            embedded_files,
            image_name: expected,
            expected_markers: markers,
            confidence_declared,
        },
        warnings,
    ))
}

/// Rejects a bundle whose declared confidence sits below the 95% gate.
/// An absent declaration passes with a warning, not a rejection.
pub fn enforce_confidence_gate(bundle: &ExploitBundle) -> Result<Option<String>, BundleError> {
    match bundle.confidence_declared {
        Some(c) if c < MIN_CONFIDENCE => Err(BundleError::ConfidenceBelowThreshold(c)),
        Some(_) => Ok(None),
        None => Ok(Some("no declared confidence; proceeding".to_string())),
    }
}

fn symbol_candidates(step: &str) -> Vec<String> {
    let mut out = Vec::new();
    let dotted = {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| {
            Regex::new(r"[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)+").unwrap()
        })
    };
    let backticked = {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"`([^`]+)`").unwrap())
    };
    let call_in_backticks = {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"^@?([A-Za-z_][A-Za-z0-9_.]*)\s*(?:\(.*)?$").unwrap())
    };

    for caps in backticked.captures_iter(step) {
        let inner = caps[1].trim();
        if let Some(c) = call_in_backticks.captures(inner) {
            let sym = c[1].trim_end_matches('.').to_string();
            if sym.contains('.') || inner.contains('(') {
                out.push(sym);
                continue;
            }
        }
        for m in dotted.find_iter(inner) {
            out.push(m.as_str().to_string());
        }
    }
    for m in dotted.find_iter(step) {
        out.push(m.as_str().to_string());
    }
    out
}

fn looks_numeric(symbol: &str) -> bool {
    symbol
        .split('.')
        .all(|seg| seg.chars().all(|c| c.is_ascii_digit()))
}

/// Symbols the profile's reproduction steps say the exploit must call.
pub fn extract_step_symbols(profile: &VulnerabilityProfile) -> Vec<String> {
    let mut symbols = Vec::new();
    for step in &profile.steps {
        for sym in symbol_candidates(step) {
            if !looks_numeric(&sym) && !symbols.contains(&sym) {
                symbols.push(sym);
            }
        }
    }
    symbols
}

fn definition_patterns(terminal: &str) -> Vec<Regex> {
    let escaped = regex::escape(terminal);
    [
        format!(r"\bdef\s+{escaped}\s*\("),
        format!(r"\bfunction\s+{escaped}\s*\("),
        format!(r"\bfn\s+{escaped}\s*\("),
        format!(r"\bfunc\s+{escaped}\s*\("),
        format!(r"#define\s+{escaped}\b"),
    ]
    .iter()
    .map(|p| Regex::new(p).unwrap())
    .collect()
}

/// Flags symbols from the profile steps that the embedded code never
/// invokes, and local redefinitions of their terminal identifiers.
pub fn detect_simulated_implementation(
    bundle: &ExploitBundle,
    profile: &VulnerabilityProfile,
) -> Result<Vec<SimulationFinding>, NoSymbolsExtractable> {
    let symbols = extract_step_symbols(profile);
    if symbols.is_empty() {
        return Err(NoSymbolsExtractable);
    }

    let mut findings = Vec::new();
    for symbol in &symbols {
        let terminal = symbol.rsplit('.').next().unwrap_or(symbol);
        let mut invoked = false;
        let mut redefinition: Option<String> = None;
        for file in bundle.code_files() {
            if file.content.contains(symbol.as_str()) || file.content.contains(terminal) {
                invoked = true;
            }
            for pattern in definition_patterns(terminal) {
                if let Some(m) = pattern.find(&file.content) {
                    let line = file.content[..m.start()].lines().count() + 1;
                    redefinition = Some(format!("{}:{line}", file.name));
                }
            }
        }
        if let Some(evidence) = redefinition {
            findings.push(SimulationFinding {
                symbol: symbol.clone(),
                kind: SimulationKind::LocallyRedefined,
                evidence,
            });
        } else if !invoked {
            findings.push(SimulationFinding {
                symbol: symbol.clone(),
                kind: SimulationKind::NotInvoked,
                evidence: "absent from all embedded code files".to_string(),
            });
        }
    }
    Ok(findings)
}

#[derive(Debug)]
pub enum Reassessment {
    /// The reviewer returned the identical script; the bundle stands.
    Unchanged,
    Revised(ExploitBundle),
}

#[derive(Debug, Error)]
pub enum ReassessError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("revision rejected: {0}")]
    InvalidRevision(#[from] BundleError),
}

/// Runs one sanity-check round: the full repeated context goes back to the
/// backend, and a returned script replaces the bundle after re-validation.
/// At most one reassessment runs per iteration.
pub fn run_reassessment(
    context: &StepContext,
    catalog: &PromptCatalog,
    gateway: &mut Gateway,
    persona: Option<&str>,
    attempt: u32,
    iteration: u32,
) -> Result<Reassessment, ReassessError> {
    let bundle = context.bundle.as_ref().expect("reassessment needs a bundle");
    let profile = context.profile.as_ref().expect("reassessment needs a profile");
    let messages = catalog.render_step(StepId::S5, context, persona)?;
    let request = crate::llm_gateway::ChatRequest::new(
        messages,
        StepId::S5.step_tag(attempt, iteration),
    );
    let Completion { text, .. } = gateway.complete(&request)?;

    let (reply_body, _) = strip_script_fence(&text);
    if reply_body.trim() == bundle.script.trim() {
        return Ok(Reassessment::Unchanged);
    }
    let (revised, warnings) = validate_exploit_bundle(&text, &context.cve.cve_id, profile)?;
    for w in warnings {
        log::debug!("reassessment warning: {w}");
    }
    if revised.script.trim() == bundle.script.trim() {
        Ok(Reassessment::Unchanged)
    } else {
        Ok(Reassessment::Revised(revised))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cve() -> CveId {
        CveId::parse("CVE-2023-25668").unwrap()
    }

    fn profile() -> VulnerabilityProfile {
        VulnerabilityProfile {
            title: "Heap Memory Access in TensorFlow".into(),
            cwes: vec![],
            preconditions: vec!["TensorFlow version is prior to 2.12.0 or 2.11.1.".into()],
            postconditions: vec!["Heap memory outside the control of the user is accessed.".into()],
            exploit_language: "Python".into(),
            steps: vec![
                "Import the TensorFlow library.".into(),
                "Within the function, call `tf.raw_ops.QuantizeAndDequantizeV2` with parameters.".into(),
            ],
            no_simulation_obligation: true,
        }
    }

    fn sample_script() -> String {
        [
            "#!/bin/bash",
            "",
            "set -e",
            "",
            "CVE_ID=\"cve-2023-25668\"",
            "mkdir -p \"$PWD/$CVE_ID\"",
            "",
            "cat > poc.py << 'EOF'",
            "import tensorflow as tf",
            "result = tf.raw_ops.QuantizeAndDequantizeV2(input=[2.5], axis=0x7fffffff)",
            "print(\"[+] VULNERABILITY TRIGGERED\")",
            "EOF",
            "",
            "cat > Dockerfile << 'EOF'",
            "FROM tensorflow/tensorflow:2.11.0",
            "COPY poc.py /app/poc.py",
            "CMD [\"python3\", \"poc.py\"]",
            "EOF",
            "",
            "docker build -t $CVE_ID .",
            "docker run --rm $CVE_ID 2>&1 | tee output.log",
            "if grep -q \"VULNERABILITY TRIGGERED\" output.log; then",
            "    echo \"[+] confirmed\"",
            "    exit 0",
            "fi",
            "exit 1",
        ]
        .join("\n")
    }

    #[test]
    fn valid_script_extracts_manifest_and_image() {
        let (bundle, _) = validate_exploit_bundle(&sample_script(), &cve(), &profile()).unwrap();
        assert_eq!(bundle.image_name, "cve-2023-25668");
        let names: Vec<&str> = bundle.embedded_files.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, vec!["poc.py", "Dockerfile"]);
        assert_eq!(bundle.embedded_files[0].kind, EmbeddedFileKind::Code);
        assert_eq!(bundle.embedded_files[1].kind, EmbeddedFileKind::BuildFile);
        assert!(bundle
            .expected_markers
            .iter()
            .any(|m| m.contains("VULNERABILITY TRIGGERED")));
    }

    #[test]
    fn prose_before_shebang_is_rejected() {
        let reply = format!("Here is the script you asked for:\n{}", sample_script());
        assert!(matches!(
            validate_exploit_bundle(&reply, &cve(), &profile()),
            Err(BundleError::NotASingleScript(_))
        ));
    }

    #[test]
    fn upper_case_image_name_is_rejected() {
        let reply = sample_script().replace("CVE_ID=\"cve-2023-25668\"", "CVE_ID=\"CVE-2023-25668\"");
        match validate_exploit_bundle(&reply, &cve(), &profile()) {
            Err(BundleError::WrongImageName { found, .. }) => {
                assert_eq!(found, "CVE-2023-25668");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_build_phase_is_rejected() {
        let reply = sample_script().replace("docker build -t $CVE_ID .", "true");
        assert!(matches!(
            validate_exploit_bundle(&reply, &cve(), &profile()),
            Err(BundleError::MissingPhase(Phase::Build))
        ));
    }

    #[test]
    fn missing_marker_grep_is_rejected() {
        let reply = sample_script()
            .replace("if grep -q \"VULNERABILITY TRIGGERED\" output.log; then", "if true; then");
        assert!(matches!(
            validate_exploit_bundle(&reply, &cve(), &profile()),
            Err(BundleError::MissingPhase(Phase::Verify))
        ));
    }

    #[test]
    fn fenced_script_is_accepted_with_warning() {
        let reply = format!("```bash\n{}\n```", sample_script());
        let (bundle, warnings) = validate_exploit_bundle(&reply, &cve(), &profile()).unwrap();
        assert!(bundle.script.starts_with("#!/bin/bash"));
        assert!(warnings.iter().any(|w| w.contains("fence")));
    }

    #[test]
    fn phantom_copy_is_warned() {
        let reply = sample_script().replace("COPY poc.py /app/poc.py", "COPY helper.py /app/helper.py");
        let (_, warnings) = validate_exploit_bundle(&reply, &cve(), &profile()).unwrap();
        assert!(warnings.iter().any(|w| w.contains("helper.py")));
    }

    #[test]
    fn confidence_is_recorded_and_gated() {
        let with_confidence = sample_script().replace("set -e", "set -e\n# Confidence: 97%");
        let (bundle, _) = validate_exploit_bundle(&with_confidence, &cve(), &profile()).unwrap();
        assert_eq!(bundle.confidence_declared, Some(0.97));
        assert!(enforce_confidence_gate(&bundle).unwrap().is_none());

        let low = sample_script().replace("set -e", "set -e\n# Confidence: 80%");
        let (bundle, _) = validate_exploit_bundle(&low, &cve(), &profile()).unwrap();
        assert!(matches!(
            enforce_confidence_gate(&bundle),
            Err(BundleError::ConfidenceBelowThreshold(_))
        ));

        let (bundle, warnings) = validate_exploit_bundle(&sample_script(), &cve(), &profile()).unwrap();
        assert!(bundle.confidence_declared.is_none());
        assert!(warnings.iter().any(|w| w.contains("confidence")));
        assert!(enforce_confidence_gate(&bundle).unwrap().is_some());
    }

    #[test]
    fn invoked_symbol_yields_no_findings() {
        let (bundle, _) = validate_exploit_bundle(&sample_script(), &cve(), &profile()).unwrap();
        let findings = detect_simulated_implementation(&bundle, &profile()).unwrap();
        assert!(findings.is_empty(), "unexpected findings: {findings:?}");
    }

    #[test]
    fn local_redefinition_is_flagged() {
        let script = sample_script().replace(
            "import tensorflow as tf",
            "import tensorflow as tf\ndef QuantizeAndDequantizeV2(**kw):\n    return None",
        );
        let (bundle, _) = validate_exploit_bundle(&script, &cve(), &profile()).unwrap();
        let findings = detect_simulated_implementation(&bundle, &profile()).unwrap();
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, SimulationKind::LocallyRedefined);
        assert!(findings[0].evidence.starts_with("poc.py:"));
    }

    #[test]
    fn uninvoked_symbol_is_flagged() {
        let script = sample_script().replace(
            "result = tf.raw_ops.QuantizeAndDequantizeV2(input=[2.5], axis=0x7fffffff)",
            "result = None",
        );
        let (bundle, _) = validate_exploit_bundle(&script, &cve(), &profile()).unwrap();
        let findings = detect_simulated_implementation(&bundle, &profile()).unwrap();
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, SimulationKind::NotInvoked);
    }

    #[test]
    fn steps_without_symbols_are_inconclusive() {
        let mut p = profile();
        p.steps = vec!["run the binary".into()];
        let (bundle, _) = validate_exploit_bundle(&sample_script(), &cve(), &p).unwrap();
        assert!(detect_simulated_implementation(&bundle, &p).is_err());
    }
}
