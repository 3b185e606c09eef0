//! Container-plan validation, environment-output splitting, and static lint
//! of generated Docker environments.
//!
//! The environment-generation stage answers with one snippet holding every
//! file. The splitter recognizes both `# <filename>` comment headers and
//! fenced blocks (real replies mix the two styles), then checks the file set
//! against the validated plan. The linter applies a closed rule table; rules
//! only expressible semantically are downgraded to warnings because the
//! authoritative check is the actual build in the sandbox.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::constraint_engine::VulnerabilityProfile;
use crate::strict_json::{self, ExtractError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub name: String,
    pub image: String,
    pub purpose: String,
    pub configuration: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerPlan {
    pub count: usize,
    pub specs: Vec<ContainerSpec>,
    pub dependency_notes: Vec<String>,
}

impl ContainerPlan {
    pub fn to_reply_json(&self) -> Value {
        serde_json::json!({
            "Number of Containers": self.count,
            "Container Description": self.specs.iter().map(|s| {
                serde_json::json!({
                    "Name": s.name,
                    "Image": s.image,
                    "Purpose": s.purpose,
                    "Configuration": s.configuration,
                })
            }).collect::<Vec<_>>(),
            "Dependency Notes": self.dependency_notes,
        })
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no top-level JSON object found in reply")]
    NoJsonObject,
    #[error("reply contains {0} top-level JSON objects, expected exactly one")]
    MultipleJsonObjects(usize),
    #[error("declared container count {declared} does not match {specs} container descriptions")]
    CountMismatch { declared: usize, specs: usize },
    #[error("schema violation at `{path}`: {reason}")]
    SchemaViolation { path: String, reason: String },
}

impl PlanError {
    fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        PlanError::SchemaViolation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl From<ExtractError> for PlanError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::NoJsonObject | ExtractError::Unterminated(_) => PlanError::NoJsonObject,
            ExtractError::MultipleJsonObjects(n) => PlanError::MultipleJsonObjects(n),
        }
    }
}

/// Validates a container-plan reply: schema, count/spec agreement, at least
/// one container, unique names. "Minimal setup" is advisory and not checked.
pub fn validate_container_plan(reply: &str) -> Result<ContainerPlan, PlanError> {
    let extraction = strict_json::extract_single_object(reply)?;
    let value: Value = serde_json::from_str(extraction.json)
        .map_err(|e| PlanError::schema("", e.to_string()))?;
    let root = value
        .as_object()
        .ok_or_else(|| PlanError::schema("", "expected a JSON object"))?;

    let declared = root
        .get("Number of Containers")
        .and_then(Value::as_u64)
        .ok_or_else(|| PlanError::schema("Number of Containers", "missing integer"))?
        as usize;

    let raw_specs = root
        .get("Container Description")
        .and_then(Value::as_array)
        .ok_or_else(|| PlanError::schema("Container Description", "missing array"))?;

    let mut specs = Vec::with_capacity(raw_specs.len());
    for (i, entry) in raw_specs.iter().enumerate() {
        let path = format!("Container Description[{i}]");
        let obj = entry
            .as_object()
            .ok_or_else(|| PlanError::schema(&path, "expected an object"))?;
        let field = |key: &str| -> Result<String, PlanError> {
            obj.get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| PlanError::schema(format!("{path}.{key}"), "missing string"))
        };
        let spec = ContainerSpec {
            name: field("Name")?,
            image: field("Image")?,
            purpose: field("Purpose")?,
            configuration: field("Configuration")?,
        };
        if spec.name.trim().is_empty() {
            return Err(PlanError::schema(format!("{path}.Name"), "must be non-empty"));
        }
        if specs.iter().any(|s: &ContainerSpec| s.name == spec.name) {
            return Err(PlanError::schema(
                format!("{path}.Name"),
                format!("duplicate container name `{}`", spec.name),
            ));
        }
        specs.push(spec);
    }

    if declared != specs.len() {
        return Err(PlanError::CountMismatch {
            declared,
            specs: specs.len(),
        });
    }
    if declared == 0 {
        return Err(PlanError::schema("Number of Containers", "must be at least 1"));
    }

    let dependency_notes = root
        .get("Dependency Notes")
        .and_then(Value::as_array)
        .map(|arr| {
            arr.iter()
                .filter_map(Value::as_str)
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();

    Ok(ContainerPlan {
        count: declared,
        specs,
        dependency_notes,
    })
}

/// The split environment files. `multi_container` holds exactly when a
/// compose file is present, which in turn is required exactly when the plan
/// calls for more than one container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentBundle {
    pub files: BTreeMap<String, String>,
    pub multi_container: bool,
}

impl EnvironmentBundle {
    pub fn build_files(&self) -> impl Iterator<Item = (&String, &String)> {
        self.files.iter().filter(|(name, body)| is_build_file(name, body))
    }

    pub fn compose_file(&self) -> Option<(&String, &String)> {
        self.files.iter().find(|(name, body)| is_compose_file(name, body))
    }

    /// Concatenated `# path` + content rendering for prompt embedding.
    pub fn to_prompt_text(&self) -> String {
        let mut out = String::new();
        for (path, content) in &self.files {
            out.push_str("# ");
            out.push_str(path);
            out.push('\n');
            out.push_str(content);
            if !content.ends_with('\n') {
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("no recognizable file headers or file content in environment output")]
    UnsplittableOutput,
    #[error("no build file found for container `{0}`")]
    MissingBuildFile(String),
    #[error("plan calls for one container but the output contains a compose file")]
    UnexpectedCompose,
    #[error("plan calls for {0} containers but the output contains no compose file")]
    MissingComposeFile(usize),
    #[error("output contains {found} build files but the plan calls for {expected}")]
    BuildFileCountMismatch { expected: usize, found: usize },
}

const KNOWN_EXTENSIONS: [&str; 24] = [
    "py", "c", "cc", "cpp", "h", "hpp", "sh", "js", "ts", "go", "rs", "java", "rb", "php", "pl",
    "txt", "cfg", "conf", "yml", "yaml", "json", "xml", "html", "sql",
];

fn looks_like_filename(token: &str) -> bool {
    if token.contains(char::is_whitespace) || token.len() > 100 {
        return false;
    }
    let basename = token.rsplit('/').next().unwrap_or(token);
    if basename.starts_with("Dockerfile") || basename == "Makefile" {
        return true;
    }
    if let Some((stem, ext)) = basename.rsplit_once('.') {
        return !stem.is_empty() && KNOWN_EXTENSIONS.contains(&ext.to_lowercase().as_str());
    }
    false
}

fn header_filename(line: &str) -> Option<&str> {
    let body = line
        .trim()
        .strip_prefix('#')
        .or_else(|| line.trim().strip_prefix("//"))?
        .trim();
    looks_like_filename(body).then_some(body)
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

fn content_has_top_level_key(body: &str, key: &str) -> bool {
    body.lines()
        .any(|l| l.starts_with(key) && l[key.len()..].trim_start().starts_with(':'))
}

pub fn is_compose_file(name: &str, body: &str) -> bool {
    let basename = name.rsplit('/').next().unwrap_or(name);
    basename.starts_with("docker-compose")
        || (content_has_top_level_key(body, "version") && content_has_top_level_key(body, "services"))
}

pub fn is_build_file(name: &str, body: &str) -> bool {
    if is_compose_file(name, body) {
        return false;
    }
    let basename = name.rsplit('/').next().unwrap_or(name);
    basename.starts_with("Dockerfile")
        || body
            .lines()
            .any(|l| l.starts_with("FROM ") && !l.trim_end().ends_with(':'))
}

/// Splits a single-snippet environment reply into named files and checks
/// the result against the plan.
pub fn split_environment_output(
    reply: &str,
    plan: &ContainerPlan,
) -> Result<EnvironmentBundle, SplitError> {
    let mut files: Vec<(String, String)> = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    let mut preamble: Vec<&str> = Vec::new();

    let close =
        |current: &mut Option<(String, Vec<&str>)>, files: &mut Vec<(String, String)>| {
            if let Some((name, lines)) = current.take() {
                let body = join_trimmed(&lines);
                if !body.is_empty() {
                    files.push((name, body));
                }
            }
        };

    for line in reply.lines() {
        if is_fence(line) {
            close(&mut current, &mut files);
            continue;
        }
        if let Some(name) = header_filename(line) {
            close(&mut current, &mut files);
            current = Some((name.to_string(), Vec::new()));
            continue;
        }
        match &mut current {
            Some((_, lines)) => lines.push(line),
            None => preamble.push(line),
        }
    }
    close(&mut current, &mut files);

    // Headerless leading content still counts when its kind is evident.
    let preamble_body = join_trimmed(&preamble);
    if !preamble_body.is_empty() {
        if is_compose_file("", &preamble_body) {
            files.insert(0, ("docker-compose.yml".to_string(), preamble_body));
        } else if is_build_file("", &preamble_body) {
            files.insert(0, ("Dockerfile".to_string(), preamble_body));
        }
    }

    if files.is_empty() {
        return Err(SplitError::UnsplittableOutput);
    }

    let mut map = BTreeMap::new();
    for (name, body) in files {
        let mut key = name;
        while map.contains_key(&key) {
            key.push('~');
        }
        map.insert(key, body);
    }

    let compose_count = map.iter().filter(|(n, b)| is_compose_file(n, b)).count();
    let build_names: Vec<String> = map
        .iter()
        .filter(|(n, b)| is_build_file(n, b))
        .map(|(n, _)| n.clone())
        .collect();

    if plan.count == 1 && compose_count > 0 {
        return Err(SplitError::UnexpectedCompose);
    }
    if plan.count > 1 && compose_count == 0 {
        return Err(SplitError::MissingComposeFile(plan.count));
    }

    // Every container in the plan maps to exactly one build file: match by
    // name containment first, then hand leftovers out positionally.
    let mut unclaimed = build_names.clone();
    let mut unmatched_specs = Vec::new();
    for spec in &plan.specs {
        let wanted = spec.name.to_lowercase();
        match unclaimed
            .iter()
            .position(|f| f.to_lowercase().contains(&wanted))
        {
            Some(i) => {
                unclaimed.remove(i);
            }
            None => unmatched_specs.push(spec.name.clone()),
        }
    }
    while !unmatched_specs.is_empty() && !unclaimed.is_empty() {
        unmatched_specs.remove(0);
        unclaimed.remove(0);
    }
    if let Some(name) = unmatched_specs.first() {
        return Err(SplitError::MissingBuildFile(name.clone()));
    }
    if build_names.len() != plan.count {
        return Err(SplitError::BuildFileCountMismatch {
            expected: plan.count,
            found: build_names.len(),
        });
    }

    Ok(EnvironmentBundle {
        files: map,
        multi_container: compose_count > 0,
    })
}

fn join_trimmed(lines: &[&str]) -> String {
    let start = lines.iter().position(|l| !l.trim().is_empty());
    let end = lines.iter().rposition(|l| !l.trim().is_empty());
    match (start, end) {
        (Some(s), Some(e)) => lines[s..=e].join("\n"),
        _ => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "RULE_A1")]
    A1,
    #[serde(rename = "RULE_A4")]
    A4,
    #[serde(rename = "RULE_A5")]
    A5,
    #[serde(rename = "RULE_B6")]
    B6,
    #[serde(rename = "RULE_C9")]
    C9,
    #[serde(rename = "RULE_E15")]
    E15,
    #[serde(rename = "RULE_E16")]
    E16,
    #[serde(rename = "RULE_F18")]
    F18,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RuleId::A1 => "RULE_A1",
            RuleId::A4 => "RULE_A4",
            RuleId::A5 => "RULE_A5",
            RuleId::B6 => "RULE_B6",
            RuleId::C9 => "RULE_C9",
            RuleId::E15 => "RULE_E15",
            RuleId::E16 => "RULE_E16",
            RuleId::F18 => "RULE_F18",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintFinding {
    pub rule_id: RuleId,
    pub path: String,
    pub line: Option<usize>,
    pub severity: Severity,
    pub message: String,
}

impl LintFinding {
    fn new(
        rule_id: RuleId,
        severity: Severity,
        path: &str,
        line: Option<usize>,
        message: impl Into<String>,
    ) -> Self {
        LintFinding {
            rule_id,
            path: path.to_string(),
            line,
            severity,
            message: message.into(),
        }
    }
}

/// Serializes findings as JSON lines for CI consumption.
pub fn findings_to_jsonl(findings: &[LintFinding]) -> String {
    findings
        .iter()
        .map(|f| serde_json::to_string(f).expect("finding serializes"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Joins backslash-continued lines into logical commands, keeping the line
/// number of each command's first physical line.
fn logical_lines(body: &str) -> Vec<(usize, String)> {
    let mut out: Vec<(usize, String)> = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    for (i, raw) in body.lines().enumerate() {
        let continued = raw.trim_end().ends_with('\\');
        let piece = raw.trim_end().trim_end_matches('\\').to_string();
        match &mut pending {
            Some((_, acc)) => {
                acc.push(' ');
                acc.push_str(piece.trim());
            }
            None => pending = Some((i + 1, piece)),
        }
        if !continued {
            if let Some(entry) = pending.take() {
                out.push(entry);
            }
        }
    }
    if let Some(entry) = pending.take() {
        out.push(entry);
    }
    out
}

const INSTALL_COMMANDS: [&str; 10] = [
    "apt-get install",
    "apt install",
    "pip install",
    "pip3 install",
    "apk add",
    "npm install",
    "gem install",
    "yum install",
    "dnf install",
    "cargo install",
];

fn unpinned_packages(segment: &str) -> Vec<String> {
    let Some(cmd) = INSTALL_COMMANDS.iter().find(|c| segment.contains(*c)) else {
        return Vec::new();
    };
    let after = &segment[segment.find(cmd).unwrap() + cmd.len()..];
    after
        .split_whitespace()
        .filter(|tok| {
            !tok.starts_with('-')
                && !tok.contains('=')
                && !tok.contains('@')
                && !tok.contains('/')
                && !tok.ends_with(".txt")
                && !tok.ends_with(".whl")
        })
        .map(str::to_string)
        .collect()
}

fn uses_apt(body: &str) -> bool {
    body.lines()
        .any(|l| l.contains("apt-get ") || l.contains(" apt ") || l.trim_start().starts_with("apt "))
}

fn has_noninteractive_frontend(body: &str) -> bool {
    body.lines().any(|l| {
        let t = l.trim();
        (t.starts_with("ARG ") || t.starts_with("ENV ")) && t.contains("DEBIAN_FRONTEND=noninteractive")
    })
}

fn language_is_python(profile: &VulnerabilityProfile) -> bool {
    profile.exploit_language.trim().eq_ignore_ascii_case("python")
}

fn language_is_c_family(profile: &VulnerabilityProfile) -> bool {
    matches!(
        profile.exploit_language.trim().to_ascii_lowercase().as_str(),
        "c" | "c++" | "cpp" | "c/c++"
    )
}

fn postconditions_mention_privilege_escalation(profile: &VulnerabilityProfile) -> bool {
    profile.postconditions.iter().any(|p| {
        let lower = p.to_lowercase();
        lower.contains("privilege") && (lower.contains("escalat") || lower.contains("elevat"))
    })
}

/// Applies the closed rule table. Zero error-severity findings is the pass
/// condition; findings are deterministic and ordered by (path, line, rule).
pub fn lint_environment(
    bundle: &EnvironmentBundle,
    _plan: &ContainerPlan,
    profile: &VulnerabilityProfile,
) -> Vec<LintFinding> {
    let mut findings = Vec::new();

    let build_files: Vec<(&String, &String)> = bundle.build_files().collect();

    for (path, body) in &build_files {
        // A1: apt-based builds must disarm interactive prompts.
        if uses_apt(body) && !has_noninteractive_frontend(body) {
            let line = body
                .lines()
                .position(|l| l.contains("apt-get ") || l.trim_start().starts_with("apt "))
                .map(|i| i + 1);
            findings.push(LintFinding::new(
                RuleId::A1,
                Severity::Error,
                path,
                line,
                "apt is used without ARG DEBIAN_FRONTEND=noninteractive",
            ));
        }

        for (line_no, logical) in logical_lines(body) {
            // C9: context-wide copies.
            let trimmed = logical.trim_start();
            if trimmed.starts_with("COPY") || trimmed.starts_with("ADD") {
                let args: Vec<&str> = trimmed
                    .split_whitespace()
                    .skip(1)
                    .filter(|a| !a.starts_with("--"))
                    .collect();
                if matches!(args.first(), Some(&".") | Some(&"./")) {
                    findings.push(LintFinding::new(
                        RuleId::C9,
                        Severity::Error,
                        path,
                        Some(line_no),
                        "context-wide copy; specify explicit source paths",
                    ));
                }
            }
            // B6: unpinned package installs.
            for segment in logical.split("&&").flat_map(|s| s.split(';')) {
                let unpinned = unpinned_packages(segment);
                if !unpinned.is_empty() {
                    findings.push(LintFinding::new(
                        RuleId::B6,
                        Severity::Warning,
                        path,
                        Some(line_no),
                        format!("unpinned package install: {}", unpinned.join(", ")),
                    ));
                    break;
                }
            }
        }
    }

    if let Some((path, body)) = bundle.compose_file() {
        for (i, line) in body.lines().enumerate() {
            let t = line.trim_start();
            if t.starts_with("command:") || t.starts_with("command :") {
                findings.push(LintFinding::new(
                    RuleId::A4,
                    Severity::Error,
                    path,
                    Some(i + 1),
                    "compose `command:` key; define behavior in Dockerfiles",
                ));
            }
        }
        let version_line = body
            .lines()
            .enumerate()
            .find(|(_, l)| l.trim_start().starts_with("version") && l.contains(':'));
        match version_line {
            Some((i, line)) => {
                let value = line.split(':').nth(1).unwrap_or("").trim().trim_matches(|c| c == '"' || c == '\'');
                if value != "3.3" {
                    findings.push(LintFinding::new(
                        RuleId::A5,
                        Severity::Error,
                        path,
                        Some(i + 1),
                        format!("compose version must be \"3.3\", found `{value}`"),
                    ));
                }
            }
            None => findings.push(LintFinding::new(
                RuleId::A5,
                Severity::Error,
                path,
                None,
                "compose file declares no version; \"3.3\" is required",
            )),
        }
    }

    // E15/E16: language-specific debugging support. The authoritative check
    // is the build itself, so these report as warnings.
    if language_is_python(profile) && !build_files.is_empty() {
        let mut lacking = Vec::new();
        if !build_files.iter().any(|(_, b)| b.contains("PYTHONUNBUFFERED=1")) {
            lacking.push("ENV PYTHONUNBUFFERED=1");
        }
        if !build_files.iter().any(|(_, b)| b.contains("ipdb")) {
            lacking.push("ipdb install");
        }
        if !lacking.is_empty() {
            findings.push(LintFinding::new(
                RuleId::E15,
                Severity::Warning,
                build_files[0].0,
                None,
                format!("Python environment lacks: {}", lacking.join("; ")),
            ));
        }
    }
    if language_is_c_family(profile) && !build_files.is_empty() {
        let mut lacking = Vec::new();
        if !build_files.iter().any(|(_, b)| b.contains("gdb")) {
            lacking.push("gdb install");
        }
        if !build_files.iter().any(|(_, b)| b.contains("cat /tmp/debug.log")) {
            lacking.push("debug-log dump line (RUN cat /tmp/debug.log)");
        }
        if !lacking.is_empty() {
            findings.push(LintFinding::new(
                RuleId::E16,
                Severity::Warning,
                build_files[0].0,
                None,
                format!("C/C++ environment lacks: {}", lacking.join("; ")),
            ));
        }
    }

    // F18: privilege-escalation cases must not run as root.
    if postconditions_mention_privilege_escalation(profile) && !build_files.is_empty() {
        let creates_user = build_files.iter().any(|(_, b)| {
            b.contains("useradd") || b.contains("adduser") || b.contains("addgroup")
        });
        let selects_user = build_files.iter().any(|(_, b)| {
            b.lines().any(|l| {
                let t = l.trim();
                t.starts_with("USER ") && t != "USER root"
            })
        });
        if !(creates_user && selects_user) {
            findings.push(LintFinding::new(
                RuleId::F18,
                Severity::Error,
                build_files[0].0,
                None,
                "privilege-escalation scenario must create and select a non-root user",
            ));
        }
    }

    findings.sort_by(|a, b| {
        (&a.path, a.line.unwrap_or(0), a.rule_id).cmp(&(&b.path, b.line.unwrap_or(0), b.rule_id))
    });
    findings
}

pub fn has_errors(findings: &[LintFinding]) -> bool {
    findings.iter().any(|f| f.severity == Severity::Error)
}
