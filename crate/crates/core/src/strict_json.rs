//! Locating the single JSON object a backend reply is required to contain.
//!
//! Step replies must consist of exactly one JSON object. Models violate that
//! in two recurring ways: stray prose around the object, and markdown code
//! fences despite the no-markdown rule. The scanner here balances braces
//! while honoring JSON string/escape syntax, so braces inside string values
//! never confuse the span detection, and it tolerates a single fenced block
//! wrapping the object (reported as a deviation so callers can log it).

use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no top-level JSON object found in reply")]
    NoJsonObject,
    #[error("reply contains {0} top-level JSON objects, expected exactly one")]
    MultipleJsonObjects(usize),
    #[error("unbalanced braces: object opened at byte {0} never closes")]
    Unterminated(usize),
}

/// Non-fatal observations made while locating the object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Deviation {
    /// The object was wrapped in a markdown code fence that had to be stripped.
    MarkdownFenceStripped,
}

#[derive(Debug)]
pub struct Extraction<'a> {
    pub json: &'a str,
    pub deviations: Vec<Deviation>,
}

/// Locates the single balanced top-level `{...}` span in `reply`.
///
/// Zero spans or two or more spans are errors. A markdown fence around the
/// whole object is stripped first and recorded as a deviation.
pub fn extract_single_object(reply: &str) -> Result<Extraction<'_>, ExtractError> {
    let (body, mut deviations) = strip_enclosing_fence(reply);
    let spans = top_level_object_spans(body)?;
    match spans.len() {
        0 => Err(ExtractError::NoJsonObject),
        1 => {
            let (start, end) = spans[0];
            if deviations.is_empty() && body.len() != reply.len() {
                deviations.push(Deviation::MarkdownFenceStripped);
            }
            Ok(Extraction {
                json: &body[start..end],
                deviations,
            })
        }
        n => Err(ExtractError::MultipleJsonObjects(n)),
    }
}

/// Extracts the single object and deserializes it into `T`.
pub fn extract_and_parse<T: DeserializeOwned>(
    reply: &str,
) -> Result<(T, Vec<Deviation>), ParseError> {
    let extraction = extract_single_object(reply)?;
    let value = serde_json::from_str(extraction.json).map_err(|e| ParseError::Schema {
        path: String::new(),
        reason: e.to_string(),
    })?;
    Ok((value, extraction.deviations))
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("schema violation at `{path}`: {reason}")]
    Schema { path: String, reason: String },
}

impl ParseError {
    pub fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ParseError::Schema {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

/// Byte spans of every balanced top-level `{...}` in `text`.
fn top_level_object_spans(text: &str) -> Result<Vec<(usize, usize)>, ExtractError> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;

    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            // A quote only opens a string while inside an object; top-level
            // prose may contain unpaired quotes without breaking the scan.
            b'"' if depth > 0 => in_string = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' => {
                if depth > 0 {
                    depth -= 1;
                    if depth == 0 {
                        spans.push((start, i + 1));
                    }
                }
            }
            _ => {}
        }
    }
    if depth > 0 {
        return Err(ExtractError::Unterminated(start));
    }
    Ok(spans)
}

/// Strips one markdown fence that encloses the entire non-blank body.
fn strip_enclosing_fence(reply: &str) -> (&str, Vec<Deviation>) {
    let trimmed = reply.trim();
    if !trimmed.starts_with("```") {
        return (reply, Vec::new());
    }
    let Some(first_newline) = trimmed.find('\n') else {
        return (reply, Vec::new());
    };
    // The opening line may carry a language tag (```json); nothing else.
    let opener = trimmed[3..first_newline].trim();
    if !opener.is_empty() && !opener.chars().all(|c| c.is_ascii_alphanumeric()) {
        return (reply, Vec::new());
    }
    let rest = &trimmed[first_newline + 1..];
    let Some(closer_at) = rest.rfind("```") else {
        return (reply, Vec::new());
    };
    if !rest[closer_at + 3..].trim().is_empty() {
        return (reply, Vec::new());
    }
    (
        &rest[..closer_at],
        vec![Deviation::MarkdownFenceStripped],
    )
}
