//! CVE JSON 5.x record parsing and validation of the strict-JSON replies
//! produced by the two pre-processing stages (content extraction, language
//! and code extraction).
//!
//! Reply validators walk the located JSON object field by field so that a
//! schema violation carries the exact path that broke, and so checks the
//! schema cannot express (device-block completeness, URL validity, closed
//! category sets) live next to the structural ones.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use url::Url;

use crate::strict_json::{self, Deviation, ExtractError};

/// Canonical CVE identifier, upper-cased, matching `CVE-\d{4}-\d{4,}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CveId(String);

impl CveId {
    pub fn parse(raw: &str) -> Option<Self> {
        let upper = raw.trim().to_ascii_uppercase();
        let rest = upper.strip_prefix("CVE-")?;
        let (year, number) = rest.split_once('-')?;
        if year.len() == 4
            && year.bytes().all(|b| b.is_ascii_digit())
            && number.len() >= 4
            && number.bytes().all(|b| b.is_ascii_digit())
        {
            Some(CveId(upper))
        } else {
            None
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Lower-cased form, used as the container image name.
    pub fn image_name(&self) -> String {
        self.0.to_ascii_lowercase()
    }
}

impl fmt::Display for CveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub lang: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffectedProduct {
    pub vendor: String,
    pub product: String,
    /// Version expressions kept opaque ("1.0.0", "<1.53.0", "1.5.0 - 1.8.2").
    pub versions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub url: String,
    pub tags: Vec<String>,
    pub refsource: Option<String>,
}

/// A parsed CVE JSON 5.x record. `raw` retains the source document so later
/// stages can re-embed it verbatim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CveRecord {
    pub cve_id: CveId,
    pub descriptions: Vec<Description>,
    pub affected: Vec<AffectedProduct>,
    pub references: Vec<Reference>,
    pub cwe_ids: Vec<String>,
    pub raw: Value,
}

#[derive(Debug, Error)]
pub enum CveParseError {
    #[error("malformed JSON: {0}")]
    MalformedJson(#[from] serde_json::Error),
    #[error("no valid CVE identifier field anywhere in the record")]
    MissingCveId,
}

/// Parses a CVE JSON 5.x document. Missing optional blocks yield empty
/// lists; reference tags and refsource values are preserved verbatim.
pub fn parse_cve_record(document: &str) -> Result<CveRecord, CveParseError> {
    let raw: Value = serde_json::from_str(document)?;

    let cve_id = find_cve_id(&raw).ok_or(CveParseError::MissingCveId)?;
    let cna = raw.pointer("/containers/cna");

    let descriptions = cna
        .and_then(|c| c.get("descriptions"))
        .and_then(Value::as_array)
        .map(|entries| {
            entries
                .iter()
                .filter_map(|d| {
                    Some(Description {
                        lang: d.get("lang")?.as_str().unwrap_or("en").to_string(),
                        text: d.get("value")?.as_str()?.to_string(),
                    })
                })
                .collect()
        })
        .unwrap_or_default();

    let affected = cna
        .and_then(|c| c.get("affected"))
        .and_then(Value::as_array)
        .map(|entries| entries.iter().map(parse_affected).collect())
        .unwrap_or_default();

    let references = cna
        .and_then(|c| c.get("references"))
        .and_then(Value::as_array)
        .map(|entries| entries.iter().filter_map(parse_reference).collect())
        .unwrap_or_default();

    let cwe_ids = collect_cwe_ids(cna);

    Ok(CveRecord {
        cve_id,
        descriptions,
        affected,
        references,
        cwe_ids,
        raw,
    })
}

fn find_cve_id(raw: &Value) -> Option<CveId> {
    let candidates = [
        raw.pointer("/cveMetadata/cveId"),
        raw.pointer("/CVE_data_meta/ID"),
        raw.get("id"),
    ];
    candidates
        .into_iter()
        .flatten()
        .filter_map(Value::as_str)
        .find_map(CveId::parse)
}

fn parse_affected(entry: &Value) -> AffectedProduct {
    let field = |name: &str| {
        entry
            .get(name)
            .and_then(Value::as_str)
            .unwrap_or("n/a")
            .to_string()
    };
    let versions = entry
        .get("versions")
        .and_then(Value::as_array)
        .map(|vs| vs.iter().filter_map(version_expression).collect())
        .unwrap_or_default();
    AffectedProduct {
        vendor: field("vendor"),
        product: field("product"),
        versions,
    }
}

/// Renders one `affected[].versions[]` object as an opaque expression.
/// Bounds win over the plain `version` field when both are present.
fn version_expression(v: &Value) -> Option<String> {
    let get = |name: &str| v.get(name).and_then(Value::as_str);
    if let Some(upper) = get("lessThan") {
        return Some(format!("<{upper}"));
    }
    if let Some(upper) = get("lessThanOrEqual") {
        return Some(format!("<={upper}"));
    }
    if let Some(introduced) = get("introduced") {
        return Some(format!(">={introduced}"));
    }
    match get("version") {
        Some("n/a") | None => None,
        Some(version) => Some(version.to_string()),
    }
}

fn parse_reference(entry: &Value) -> Option<Reference> {
    let url = entry.get("url")?.as_str()?;
    if Url::parse(url).is_err() {
        log::warn!("dropping non-absolute reference url: {url}");
        return None;
    }
    let tags = entry
        .get("tags")
        .and_then(Value::as_array)
        .map(|t| {
            t.iter()
                .filter_map(Value::as_str)
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    let refsource = entry
        .get("refsource")
        .and_then(Value::as_str)
        .map(str::to_string);
    Some(Reference {
        url: url.to_string(),
        tags,
        refsource,
    })
}

fn collect_cwe_ids(cna: Option<&Value>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut ids = Vec::new();
    let entries = cna
        .and_then(|c| c.get("problemTypes"))
        .and_then(Value::as_array);
    for problem in entries.into_iter().flatten() {
        let descs = problem.get("descriptions").and_then(Value::as_array);
        for d in descs.into_iter().flatten() {
            let candidate = d
                .get("cweId")
                .and_then(Value::as_str)
                .or_else(|| d.get("description").and_then(Value::as_str));
            if let Some(id) = candidate.and_then(extract_cwe_token) {
                if seen.insert(id.clone()) {
                    ids.push(id);
                }
            }
        }
    }
    ids
}

fn extract_cwe_token(text: &str) -> Option<String> {
    let upper = text.trim().to_ascii_uppercase();
    let rest = upper.strip_prefix("CWE-")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        None
    } else {
        Some(format!("CWE-{digits}"))
    }
}

/// Collapses duplicate description texts, preferring an `en`-tagged entry
/// when the same normalized text appears under several language tags.
pub fn dedupe_multilingual(descriptions: &[Description]) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    let mut picked: Vec<&Description> = Vec::new();
    for d in descriptions {
        let key = normalize_text(&d.text);
        match keys.iter().position(|k| *k == key) {
            Some(i) => {
                if !picked[i].lang.starts_with("en") && d.lang.starts_with("en") {
                    picked[i] = d;
                }
            }
            None => {
                keys.push(key);
                picked.push(d);
            }
        }
    }
    picked.into_iter().map(|d| d.text.clone()).collect()
}

fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("no top-level JSON object found in reply")]
    NoJsonObject,
    #[error("reply contains {0} top-level JSON objects, expected exactly one")]
    MultipleJsonObjects(usize),
    #[error("schema violation at `{path}`: {reason}")]
    SchemaViolation { path: String, reason: String },
}

impl ValidationError {
    fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ValidationError::SchemaViolation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl From<ExtractError> for ValidationError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::NoJsonObject | ExtractError::Unterminated(_) => {
                ValidationError::NoJsonObject
            }
            ExtractError::MultipleJsonObjects(n) => ValidationError::MultipleJsonObjects(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    Application,
    #[serde(rename = "Operating System")]
    OperatingSystem,
    Device,
}

impl Category {
    fn from_str(s: &str) -> Option<Self> {
        match s {
            "Application" => Some(Category::Application),
            "Operating System" => Some(Category::OperatingSystem),
            "Device" => Some(Category::Device),
            _ => None,
        }
    }

    /// Subcategory values the extraction prompt allows for this category.
    fn allowed_subcategories(self) -> Option<&'static [&'static str]> {
        match self {
            Category::Application => Some(&["Protocol", "Library", "Software"]),
            Category::OperatingSystem => Some(&["Windows", "Linux", "MacOS", "Firmware"]),
            Category::Device => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductInfo {
    #[serde(rename = "Name")]
    pub name: String,
    #[serde(rename = "Vendor")]
    pub vendor: String,
    #[serde(rename = "Version")]
    pub versions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfo {
    #[serde(rename = "Name")]
    pub names: Vec<String>,
    #[serde(rename = "Vendor")]
    pub vendor: String,
    #[serde(rename = "Distribution")]
    pub distribution: String,
    #[serde(rename = "Type")]
    pub device_type: String,
    #[serde(rename = "Subtype", skip_serializing_if = "Option::is_none")]
    pub subtype: Option<String>,
}

/// Validated output of the content-extraction stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedContent {
    pub category: Category,
    pub subcategory: String,
    pub product: ProductInfo,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceInfo>,
    pub descriptions: Vec<String>,
    pub references: Vec<String>,
}

impl ExtractedContent {
    /// Re-serializes in the reply's wire shape so later prompts can embed it.
    pub fn to_reply_json(&self) -> Value {
        let mut metadata = serde_json::Map::new();
        metadata.insert("Category".into(), serde_json::to_value(self.category).unwrap());
        metadata.insert("Subcategory".into(), Value::String(self.subcategory.clone()));
        metadata.insert("Product".into(), serde_json::to_value(&self.product).unwrap());
        if let Some(device) = &self.device {
            metadata.insert("Device".into(), serde_json::to_value(device).unwrap());
        }
        serde_json::json!({
            "Metadata": metadata,
            "Descriptions": self.descriptions,
            "References": self.references,
        })
    }
}

const DEVICE_TYPES: [&str; 4] = ["Network", "IoT", "Smart Phone", "Server"];
const NETWORK_SUBTYPES: [&str; 3] = ["Router", "Hub", "Switch"];

/// Validates a content-extraction reply against its fixed schema.
///
/// Exactly one balanced top-level object is located; unknown keys are
/// rejected; a `Device` block, when present, must be complete.
pub fn validate_extracted_content(
    reply: &str,
) -> Result<(ExtractedContent, Vec<Deviation>), ValidationError> {
    let extraction = strict_json::extract_single_object(reply)?;
    let value: Value = serde_json::from_str(extraction.json)
        .map_err(|e| ValidationError::schema("", e.to_string()))?;

    let root = as_object(&value, "")?;
    reject_unknown_keys(root, &["Metadata", "Descriptions", "References"], "")?;

    let metadata = as_object(require(root, "Metadata", "")?, "Metadata")?;
    reject_unknown_keys(
        metadata,
        &["Category", "Subcategory", "Product", "Device"],
        "Metadata",
    )?;

    let category_str = as_str(require(metadata, "Category", "Metadata")?, "Metadata.Category")?;
    let category = Category::from_str(category_str).ok_or_else(|| {
        ValidationError::schema(
            "Metadata.Category",
            format!("`{category_str}` is outside [Application, Operating System, Device]"),
        )
    })?;

    let subcategory =
        as_str(require(metadata, "Subcategory", "Metadata")?, "Metadata.Subcategory")?.to_string();
    if let Some(allowed) = category.allowed_subcategories() {
        if !allowed.contains(&subcategory.as_str()) {
            return Err(ValidationError::schema(
                "Metadata.Subcategory",
                format!("`{subcategory}` is outside {allowed:?}"),
            ));
        }
    }

    let product = validate_product(require(metadata, "Product", "Metadata")?)?;
    let device = metadata
        .get("Device")
        .map(validate_device)
        .transpose()?;

    let descriptions = string_array(require(root, "Descriptions", "")?, "Descriptions")?;
    let descriptions = dedupe_plain(descriptions);

    let references = string_array(require(root, "References", "")?, "References")?;
    for (i, url) in references.iter().enumerate() {
        if Url::parse(url).is_err() {
            return Err(ValidationError::schema(
                format!("References[{i}]"),
                format!("`{url}` is not an absolute URL"),
            ));
        }
    }

    Ok((
        ExtractedContent {
            category,
            subcategory,
            product,
            device,
            descriptions,
            references,
        },
        extraction.deviations,
    ))
}

fn validate_product(value: &Value) -> Result<ProductInfo, ValidationError> {
    let obj = as_object(value, "Metadata.Product")?;
    reject_unknown_keys(obj, &["Name", "Vendor", "Version"], "Metadata.Product")?;
    Ok(ProductInfo {
        name: as_str(require(obj, "Name", "Metadata.Product")?, "Metadata.Product.Name")?
            .to_string(),
        vendor: as_str(
            require(obj, "Vendor", "Metadata.Product")?,
            "Metadata.Product.Vendor",
        )?
        .to_string(),
        versions: string_array(
            require(obj, "Version", "Metadata.Product")?,
            "Metadata.Product.Version",
        )?,
    })
}

fn validate_device(value: &Value) -> Result<DeviceInfo, ValidationError> {
    let path = "Metadata.Device";
    let obj = as_object(value, path)?;
    reject_unknown_keys(
        obj,
        &["Name", "Vendor", "Distribution", "Type", "Subtype"],
        path,
    )?;

    // The prompt omits the block entirely when no device info exists, so a
    // present block must carry the full field list.
    let names = match require(obj, "Name", path)? {
        Value::String(s) => vec![s.clone()],
        v => string_array(v, "Metadata.Device.Name")?,
    };
    let device_type = as_str(require(obj, "Type", path)?, "Metadata.Device.Type")?.to_string();
    if !DEVICE_TYPES.contains(&device_type.as_str()) {
        return Err(ValidationError::schema(
            "Metadata.Device.Type",
            format!("`{device_type}` is outside {DEVICE_TYPES:?}"),
        ));
    }
    let subtype = obj
        .get("Subtype")
        .map(|v| as_str(v, "Metadata.Device.Subtype").map(str::to_string))
        .transpose()?;
    if device_type == "Network" {
        match &subtype {
            Some(s) if NETWORK_SUBTYPES.contains(&s.as_str()) => {}
            Some(s) => {
                return Err(ValidationError::schema(
                    "Metadata.Device.Subtype",
                    format!("`{s}` is outside {NETWORK_SUBTYPES:?}"),
                ));
            }
            None => {
                return Err(ValidationError::schema(
                    "Metadata.Device.Subtype",
                    "required when Type is Network",
                ));
            }
        }
    }
    Ok(DeviceInfo {
        names,
        vendor: as_str(require(obj, "Vendor", path)?, "Metadata.Device.Vendor")?.to_string(),
        distribution: as_str(
            require(obj, "Distribution", path)?,
            "Metadata.Device.Distribution",
        )?
        .to_string(),
        device_type,
        subtype,
    })
}

fn dedupe_plain(texts: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    texts
        .into_iter()
        .filter(|t| seen.insert(normalize_text(t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    #[serde(rename = "Code")]
    pub code: String,
    #[serde(rename = "Link")]
    pub link: String,
}

/// Validated output of the language-and-code extraction stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageAndSnippets {
    pub exploit_language: String,
    pub snippets: Vec<CodeSnippet>,
}

impl LanguageAndSnippets {
    pub fn to_reply_json(&self) -> Value {
        serde_json::json!({
            "Language": self.exploit_language,
            "Vulnerable Code Snippets": self.snippets,
        })
    }
}

/// Validates a language-extraction reply. Zero snippets is a legal state
/// (no public PoC); escape sequences in code fields decode to literal text
/// as part of JSON string parsing.
pub fn validate_language_extraction(
    reply: &str,
) -> Result<(LanguageAndSnippets, Vec<Deviation>), ValidationError> {
    let extraction = strict_json::extract_single_object(reply)?;
    let value: Value = serde_json::from_str(extraction.json)
        .map_err(|e| ValidationError::schema("", e.to_string()))?;

    let root = as_object(&value, "")?;
    reject_unknown_keys(root, &["Language", "Vulnerable Code Snippets"], "")?;

    let language = as_str(require(root, "Language", "")?, "Language")?.to_string();
    if language.trim().is_empty() {
        return Err(ValidationError::schema("Language", "must be non-empty"));
    }

    let raw_snippets = require(root, "Vulnerable Code Snippets", "")?
        .as_array()
        .ok_or_else(|| ValidationError::schema("Vulnerable Code Snippets", "expected an array"))?;

    let mut snippets = Vec::with_capacity(raw_snippets.len());
    for (i, entry) in raw_snippets.iter().enumerate() {
        let path = format!("Vulnerable Code Snippets[{i}]");
        let obj = as_object(entry, &path)?;
        reject_unknown_keys(obj, &["Code", "Link"], &path)?;
        let code = as_str(require(obj, "Code", &path)?, &format!("{path}.Code"))?.to_string();
        if code.trim().is_empty() {
            return Err(ValidationError::schema(
                format!("{path}.Code"),
                "snippet code must be non-empty",
            ));
        }
        let link = as_str(require(obj, "Link", &path)?, &format!("{path}.Link"))?.to_string();
        if Url::parse(&link).is_err() {
            return Err(ValidationError::schema(
                format!("{path}.Link"),
                format!("`{link}` is not a valid URL"),
            ));
        }
        snippets.push(CodeSnippet { code, link });
    }

    Ok((
        LanguageAndSnippets {
            exploit_language: language,
            snippets,
        },
        extraction.deviations,
    ))
}

fn as_object<'a>(
    value: &'a Value,
    path: &str,
) -> Result<&'a serde_json::Map<String, Value>, ValidationError> {
    value
        .as_object()
        .ok_or_else(|| ValidationError::schema(path, "expected a JSON object"))
}

fn as_str<'a>(value: &'a Value, path: &str) -> Result<&'a str, ValidationError> {
    value
        .as_str()
        .ok_or_else(|| ValidationError::schema(path, "expected a string"))
}

fn require<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
    parent: &str,
) -> Result<&'a Value, ValidationError> {
    obj.get(key).ok_or_else(|| {
        let path = if parent.is_empty() {
            key.to_string()
        } else {
            format!("{parent}.{key}")
        };
        ValidationError::schema(path, "missing required key")
    })
}

fn reject_unknown_keys(
    obj: &serde_json::Map<String, Value>,
    allowed: &[&str],
    parent: &str,
) -> Result<(), ValidationError> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            let path = if parent.is_empty() {
                key.clone()
            } else {
                format!("{parent}.{key}")
            };
            return Err(ValidationError::schema(path, "unknown key"));
        }
    }
    Ok(())
}

fn string_array(value: &Value, path: &str) -> Result<Vec<String>, ValidationError> {
    let arr = value
        .as_array()
        .ok_or_else(|| ValidationError::schema(path, "expected an array of strings"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| ValidationError::schema(format!("{path}[{i}]"), "expected a string"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_with(extra: &str) -> String {
        format!(
            r#"{{
              "cveMetadata": {{ "cveId": "cve-2021-29922" }},
              "containers": {{ "cna": {{ {extra} }} }}
            }}"#
        )
    }

    #[test]
    fn cve_id_is_canonicalized() {
        let record = parse_cve_record(&record_with("")).unwrap();
        assert_eq!(record.cve_id.as_str(), "CVE-2021-29922");
        assert_eq!(record.cve_id.image_name(), "cve-2021-29922");
    }

    #[test]
    fn missing_id_is_an_error() {
        let err = parse_cve_record(r#"{"containers": {}}"#).unwrap_err();
        assert!(matches!(err, CveParseError::MissingCveId));
    }

    #[test]
    fn malformed_json_is_an_error() {
        assert!(matches!(
            parse_cve_record("{not json"),
            Err(CveParseError::MalformedJson(_))
        ));
    }

    #[test]
    fn empty_reference_block_yields_empty_list() {
        let record = parse_cve_record(&record_with(r#""references": []"#)).unwrap();
        assert!(record.references.is_empty());
    }

    #[test]
    fn less_than_bound_renders_as_expression() {
        let record = parse_cve_record(&record_with(
            r#""affected": [{"vendor": "rust-lang", "product": "Rust",
                "versions": [{"version": "0", "status": "affected", "lessThan": "1.53.0"}]}]"#,
        ))
        .unwrap();
        assert_eq!(record.affected[0].versions, vec!["<1.53.0"]);
        assert_eq!(record.affected[0].product, "Rust");
        assert_eq!(record.affected[0].vendor, "rust-lang");
    }

    #[test]
    fn cwe_ids_collected_from_problem_types() {
        let record = parse_cve_record(&record_with(
            r#""problemTypes": [{"descriptions": [{"cweId": "CWE-476", "description": "NULL deref"}]}]"#,
        ))
        .unwrap();
        assert_eq!(record.cwe_ids, vec!["CWE-476"]);
    }

    #[test]
    fn cwe_id_falls_back_to_description_text() {
        let record = parse_cve_record(&record_with(
            r#""problemTypes": [{"descriptions": [{"description": "CWE-787: Out-of-bounds Write"}]}]"#,
        ))
        .unwrap();
        assert_eq!(record.cwe_ids, vec!["CWE-787"]);
    }

    #[test]
    fn reference_tags_and_refsource_preserved() {
        let record = parse_cve_record(&record_with(
            r#""references": [{"url": "https://example.com/a", "tags": ["Exploit", "Third Party Advisory"], "refsource": "MISC"}]"#,
        ))
        .unwrap();
        let r = &record.references[0];
        assert_eq!(r.tags, vec!["Exploit", "Third Party Advisory"]);
        assert_eq!(r.refsource.as_deref(), Some("MISC"));
    }

    const VALID_EXTRACTION: &str = r#"{
      "Metadata": {
        "Category": "Application",
        "Subcategory": "Library",
        "Product": {"Name": "tensorflow", "Vendor": "tensorflow", "Version": ["< 2.11.1"]}
      },
      "Descriptions": ["TensorFlow is an open source platform for machine learning."],
      "References": ["https://github.com/tensorflow/tensorflow"]
    }"#;

    #[test]
    fn valid_extraction_passes() {
        let (content, deviations) = validate_extracted_content(VALID_EXTRACTION).unwrap();
        assert_eq!(content.category, Category::Application);
        assert_eq!(content.subcategory, "Library");
        assert_eq!(content.product.name, "tensorflow");
        assert!(content.device.is_none());
        assert!(deviations.is_empty());
    }

    #[test]
    fn two_objects_are_rejected() {
        let doubled = format!("{VALID_EXTRACTION}\n{VALID_EXTRACTION}");
        assert!(matches!(
            validate_extracted_content(&doubled),
            Err(ValidationError::MultipleJsonObjects(2))
        ));
    }

    #[test]
    fn category_outside_enum_is_rejected() {
        let reply = VALID_EXTRACTION.replace("\"Application\"", "\"Middleware\"");
        match validate_extracted_content(&reply).unwrap_err() {
            ValidationError::SchemaViolation { path, .. } => {
                assert_eq!(path, "Metadata.Category");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let reply = VALID_EXTRACTION.replace("\"Descriptions\"", "\"Notes\": [], \"Descriptions\"");
        assert!(matches!(
            validate_extracted_content(&reply),
            Err(ValidationError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn empty_device_block_is_rejected() {
        let reply = VALID_EXTRACTION.replace(
            "\"Subcategory\": \"Library\",",
            "\"Subcategory\": \"Library\", \"Device\": {},",
        );
        assert!(matches!(
            validate_extracted_content(&reply),
            Err(ValidationError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn multilingual_duplicates_keep_one_copy() {
        let reply = VALID_EXTRACTION.replace(
            "[\"TensorFlow is an open source platform for machine learning.\"]",
            "[\"Same text here.\", \"same   text HERE.\"]",
        );
        let (content, _) = validate_extracted_content(&reply).unwrap();
        assert_eq!(content.descriptions, vec!["Same text here."]);
    }

    #[test]
    fn en_wins_dedup_ties() {
        let descriptions = vec![
            Description {
                lang: "fr".into(),
                text: "Même texte".into(),
            },
            Description {
                lang: "de".into(),
                text: "shared body".into(),
            },
            Description {
                lang: "en".into(),
                text: "Shared Body".into(),
            },
        ];
        let out = dedupe_multilingual(&descriptions);
        assert_eq!(out, vec!["Même texte".to_string(), "Shared Body".to_string()]);
    }

    #[test]
    fn extraction_roundtrip_is_identity() {
        let (content, _) = validate_extracted_content(VALID_EXTRACTION).unwrap();
        let reserialized = content.to_reply_json().to_string();
        let (again, _) = validate_extracted_content(&reserialized).unwrap();
        assert_eq!(content, again);
    }

    #[test]
    fn language_reply_decodes_escapes() {
        let reply = r#"{
          "Language": "Rust",
          "Vulnerable Code Snippets": [
            {"Code": "let ip = IpAddr::from_str(\"010.8.8.8\").unwrap();\nprintln!(\"{}\", ip);",
             "Link": "https://github.com/sickcodes/security"}
          ]
        }"#;
        let (out, _) = validate_language_extraction(reply).unwrap();
        assert_eq!(out.exploit_language, "Rust");
        assert!(out.snippets[0].code.contains("IpAddr::from_str(\"010.8.8.8\")"));
        assert!(out.snippets[0].code.contains('\n'));
    }

    #[test]
    fn zero_snippets_is_legal() {
        let reply = r#"{"Language": "Python", "Vulnerable Code Snippets": []}"#;
        let (out, _) = validate_language_extraction(reply).unwrap();
        assert!(out.snippets.is_empty());
    }

    #[test]
    fn empty_snippet_code_is_rejected() {
        let reply = r#"{"Language": "C", "Vulnerable Code Snippets": [{"Code": " ", "Link": "https://x.test/poc"}]}"#;
        assert!(matches!(
            validate_language_extraction(reply),
            Err(ValidationError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn bad_snippet_link_is_rejected() {
        let reply = r#"{"Language": "C", "Vulnerable Code Snippets": [{"Code": "x", "Link": "not a url"}]}"#;
        assert!(matches!(
            validate_language_extraction(reply),
            Err(ValidationError::SchemaViolation { .. })
        ));
    }
}
