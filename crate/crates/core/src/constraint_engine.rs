//! Vulnerability profile extraction: validating the constraint-extraction
//! reply (title, CWE pointers, pre-/post-conditions, reproduction steps) and
//! enriching CWE pointers with definition text fetched from their canonical
//! pages.
//!
//! CWE context is supplementary: a failed fetch degrades to a warning and
//! the pipeline proceeds, and a CVE with no CWE mapping at all simply
//! carries an empty pointer list.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cve_model::LanguageAndSnippets;
use crate::strict_json::{self, ExtractError};

pub const CWE_URL_PATTERN: &str = "https://cwe.mitre.org/data/definitions/{CWE_NUMBER}.html";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CwePointer {
    pub cwe_id: String,
    pub definition_url: String,
    pub description: Option<String>,
}

impl CwePointer {
    pub fn new(cwe_id: &str) -> Result<Self, BadCweId> {
        let url = cwe_definition_url(cwe_id)?;
        Ok(CwePointer {
            cwe_id: cwe_id.trim().to_ascii_uppercase(),
            definition_url: url,
            description: None,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("`{0}` is not a CWE id of the form CWE-<number>")]
pub struct BadCweId(pub String);

/// Substitutes the numeric part of a `CWE-N` id into the canonical
/// definition-page pattern.
pub fn cwe_definition_url(cwe_id: &str) -> Result<String, BadCweId> {
    let trimmed = cwe_id.trim();
    let rest = trimmed
        .strip_prefix("CWE-")
        .or_else(|| trimmed.strip_prefix("cwe-"))
        .ok_or_else(|| BadCweId(cwe_id.to_string()))?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return Err(BadCweId(cwe_id.to_string()));
    }
    Ok(CWE_URL_PATTERN.replace("{CWE_NUMBER}", rest))
}

/// Validated output of the constraint-extraction stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerabilityProfile {
    pub title: String,
    pub cwes: Vec<CwePointer>,
    pub preconditions: Vec<String>,
    pub postconditions: Vec<String>,
    pub exploit_language: String,
    pub steps: Vec<String>,
    /// The extraction prompt forbids simulating the vulnerability; the
    /// obligation travels with the profile so the bundle validator can
    /// check generated code against it.
    pub no_simulation_obligation: bool,
}

impl VulnerabilityProfile {
    /// Plain-text rendering for prompt embedding. Condition and step lines
    /// are transported byte-for-byte, which JSON re-escaping would break.
    pub fn to_prompt_text(&self) -> String {
        let mut out = String::new();
        out.push_str("Vulnerability Title: ");
        out.push_str(&self.title);
        out.push('\n');
        if !self.cwes.is_empty() {
            out.push_str("CWEs:\n");
            for cwe in &self.cwes {
                out.push_str("- ");
                out.push_str(&cwe.cwe_id);
                if let Some(desc) = &cwe.description {
                    out.push_str(": ");
                    out.push_str(desc);
                }
                out.push('\n');
            }
        }
        out.push_str(&self.conditions_text());
        out.push_str("Language: ");
        out.push_str(&self.exploit_language);
        out.push('\n');
        out.push_str("Steps:\n");
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(&format!("{}. {step}\n", i + 1));
        }
        out
    }

    pub fn conditions_text(&self) -> String {
        let mut out = String::new();
        out.push_str("Preconditions:\n");
        for p in &self.preconditions {
            out.push_str("- ");
            out.push_str(p);
            out.push('\n');
        }
        out.push_str("Postconditions:\n");
        for p in &self.postconditions {
            out.push_str("- ");
            out.push_str(p);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("no top-level JSON object found in reply")]
    NoJsonObject,
    #[error("reply contains {0} top-level JSON objects, expected exactly one")]
    MultipleJsonObjects(usize),
    #[error("schema violation at `{path}`: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("`{0}` must be a non-empty array")]
    EmptyConditions(&'static str),
}

impl ProfileError {
    fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ProfileError::SchemaViolation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl From<ExtractError> for ProfileError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::NoJsonObject | ExtractError::Unterminated(_) => {
                ProfileError::NoJsonObject
            }
            ExtractError::MultipleJsonObjects(n) => ProfileError::MultipleJsonObjects(n),
        }
    }
}

/// Validates a constraint-extraction reply against its fixed schema.
pub fn validate_profile(reply: &str) -> Result<VulnerabilityProfile, ProfileError> {
    let extraction = strict_json::extract_single_object(reply)?;
    let value: Value = serde_json::from_str(extraction.json)
        .map_err(|e| ProfileError::schema("", e.to_string()))?;
    let root = value
        .as_object()
        .ok_or_else(|| ProfileError::schema("", "expected a JSON object"))?;

    let title = str_field(root, "Vulnerability Title")?;

    let mut cwes = Vec::new();
    if let Some(raw) = root.get("CWEs Description") {
        let arr = raw.as_array().ok_or_else(|| {
            ProfileError::schema("CWEs Description", "expected an array")
        })?;
        for (i, entry) in arr.iter().enumerate() {
            let obj = entry.as_object().ok_or_else(|| {
                ProfileError::schema(format!("CWEs Description[{i}]"), "expected an object")
            })?;
            let id = obj
                .get("CWE-ID")
                .and_then(Value::as_str)
                .ok_or_else(|| {
                    ProfileError::schema(format!("CWEs Description[{i}].CWE-ID"), "missing string")
                })?;
            let mut pointer = CwePointer::new(id).map_err(|e| {
                ProfileError::schema(format!("CWEs Description[{i}].CWE-ID"), e.to_string())
            })?;
            pointer.description = obj
                .get("Description")
                .and_then(Value::as_str)
                .map(str::to_string);
            cwes.push(pointer);
        }
    }

    let preconditions = str_list(root, "Preconditions")?;
    if preconditions.is_empty() {
        return Err(ProfileError::EmptyConditions("Preconditions"));
    }
    let postconditions = str_list(root, "Postconditions")?;
    if postconditions.is_empty() {
        return Err(ProfileError::EmptyConditions("Postconditions"));
    }

    let exploit_language = root
        .get("Language")
        .and_then(|v| v.get("Language"))
        .and_then(Value::as_str)
        .ok_or_else(|| ProfileError::schema("Language.Language", "missing string"))?
        .to_string();

    let steps = str_list(root, "Steps")?;
    if steps.is_empty() {
        return Err(ProfileError::schema("Steps", "must be a non-empty ordered list"));
    }

    Ok(VulnerabilityProfile {
        title,
        cwes,
        preconditions,
        postconditions,
        exploit_language,
        steps,
        no_simulation_obligation: true,
    })
}

fn str_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<String, ProfileError> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ProfileError::schema(key, "missing string"))
}

fn str_list(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Vec<String>, ProfileError> {
    let arr = obj
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| ProfileError::schema(key, "missing array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| ProfileError::schema(format!("{key}[{i}]"), "expected a string"))
        })
        .collect()
}

/// Flags a mismatch between the profile's language and the one identified
/// during code extraction. Mismatch is a warning, not an error.
pub fn check_language_consistency(
    profile: &VulnerabilityProfile,
    language_info: &LanguageAndSnippets,
) -> Option<String> {
    if profile
        .exploit_language
        .eq_ignore_ascii_case(&language_info.exploit_language)
    {
        None
    } else {
        Some(format!(
            "profile names exploit language `{}` but code extraction identified `{}`",
            profile.exploit_language, language_info.exploit_language
        ))
    }
}

#[derive(Debug, Error)]
#[error("fetch failed for {url}: {message}")]
pub struct FetchError {
    pub url: String,
    pub message: String,
}

/// Recorded when CWE context could not be retrieved; the run proceeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchWarning {
    pub url: String,
    pub message: String,
}

pub trait PageFetcher {
    fn fetch(&self, url: &str) -> Result<String, FetchError>;
}

/// Maps URLs onto local files through an `index.json` in the fixture
/// directory, so CWE retrieval is testable offline.
pub struct FixtureFetcher {
    root: PathBuf,
    index: HashMap<String, String>,
}

impl FixtureFetcher {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        let index_text = std::fs::read_to_string(root.join("index.json"))?;
        let index: HashMap<String, String> = serde_json::from_str(&index_text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(FixtureFetcher { root, index })
    }
}

impl PageFetcher for FixtureFetcher {
    fn fetch(&self, url: &str) -> Result<String, FetchError> {
        let file = self.index.get(url).ok_or_else(|| FetchError {
            url: url.to_string(),
            message: "url not present in fixture index".into(),
        })?;
        std::fs::read_to_string(self.root.join(file)).map_err(|e| FetchError {
            url: url.to_string(),
            message: e.to_string(),
        })
    }
}

/// Live fetcher for CWE definition pages.
pub struct HttpFetcher {
    client: reqwest::blocking::Client,
}

impl HttpFetcher {
    pub fn new() -> Self {
        HttpFetcher {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self::new()
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<String, FetchError> {
        let response = self.client.get(url).send().map_err(|e| FetchError {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        if !response.status().is_success() {
            return Err(FetchError {
                url: url.to_string(),
                message: format!("HTTP {}", response.status()),
            });
        }
        response.text().map_err(|e| FetchError {
            url: url.to_string(),
            message: e.to_string(),
        })
    }
}

/// Populates a pointer's description from its definition page. On any
/// failure the pointer comes back unchanged alongside a warning; CWE pages
/// are supplementary context and never block the run.
pub fn fetch_cwe_context(
    pointer: CwePointer,
    fetcher: &dyn PageFetcher,
) -> (CwePointer, Option<FetchWarning>) {
    let page = match fetcher.fetch(&pointer.definition_url) {
        Ok(page) => page,
        Err(e) => {
            let warning = FetchWarning {
                url: pointer.definition_url.clone(),
                message: e.message,
            };
            return (pointer, Some(warning));
        }
    };
    match extract_description(&page) {
        Some(description) => {
            let mut enriched = pointer;
            enriched.description = Some(description);
            (enriched, None)
        }
        None => {
            let warning = FetchWarning {
                url: pointer.definition_url.clone(),
                message: "no Description section found in page".into(),
            };
            (pointer, Some(warning))
        }
    }
}

/// Pulls the text of the page's Description section: heading match first,
/// falling back to the first paragraph after the heading when the markup
/// drifts from the expected structure.
fn extract_description(page: &str) -> Option<String> {
    let heading = regex_cache::description_heading();
    let m = heading.find(page)?;
    let after = &page[m.end()..];
    let until_next_heading = match regex_cache::any_heading().find(after) {
        Some(next) => &after[..next.start()],
        None => after,
    };
    if let Some(p) = regex_cache::paragraph().captures(until_next_heading) {
        let text = strip_tags(p.get(1).unwrap().as_str());
        if !text.is_empty() {
            return Some(text);
        }
    }
    let text = strip_tags(until_next_heading);
    if text.is_empty() {
        None
    } else {
        // Fallback: first sentence-sized chunk of running text.
        Some(text.split("  ").next().unwrap_or(&text).trim().to_string())
    }
}

fn strip_tags(html: &str) -> String {
    let no_tags = regex_cache::tag().replace_all(html, " ");
    no_tags.split_whitespace().collect::<Vec<_>>().join(" ")
}

mod regex_cache {
    use regex::Regex;
    use std::sync::OnceLock;

    pub fn description_heading() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| {
            Regex::new(r#"(?i)(<h[1-6][^>]*>\s*Description\s*</h[1-6]>|id="Description")"#).unwrap()
        })
    }

    pub fn any_heading() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"(?i)<h[1-6][^>]*>").unwrap())
    }

    pub fn paragraph() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"(?is)<p[^>]*>(.*?)</p>").unwrap())
    }

    pub fn tag() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"<[^>]+>").unwrap())
    }
}
