//! Durable per-run records and aggregate statistics.
//!
//! A ledger is a directory: one JSON document per run under `runs/`, plus a
//! derived `index.json` of digests for human diffing. Appends reserve the
//! final filename atomically (hard link of a fully written temp file), so
//! parallel runs can share one ledger without partial interleaving.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm_gateway::StepTag;
use crate::verdict_engine::{Evidence, FailureReason, MarkerEvent, MarkerKind, Outcome, Verdict};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionDigest {
    pub exit_code: i32,
    pub duration_secs: f64,
    pub timed_out: bool,
}

/// One pipeline event: a backend call, optionally paired with the execution
/// it graded and the distilled log it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step_tag: StepTag,
    pub attempt: u32,
    pub iteration: u32,
    pub prompt_digest: String,
    pub reply_digest: String,
    pub execution: Option<ExecutionDigest>,
    pub distilled_ref: Option<String>,
    pub timestamp: f64,
}

/// One complete run, mirroring the reporting columns: language, library,
/// CWE ids, container count, iterations, PoC presence, intervention, and
/// manual post-condition checking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub cve_id: String,
    pub exploit_language: String,
    pub library: String,
    pub cwe_ids: Vec<String>,
    pub containers: u32,
    pub iterations: u32,
    pub poc_present: bool,
    pub intervention: bool,
    pub manual_postcondition: bool,
    pub outcome: Verdict,
    pub total_duration_secs: f64,
    pub started_at: f64,
    /// Container image the driver script builds (lower-cased CVE id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_name: Option<String>,
    pub iteration_records: Vec<IterationRecord>,
}

impl RunRecord {
    pub fn is_success(&self) -> bool {
        self.outcome.outcome != Outcome::Failed
    }

    fn validate(&self) -> Result<(), LedgerError> {
        if self.is_success() && self.containers < 1 {
            return Err(LedgerError::InvalidRecord(
                "successful run must report at least one container",
            ));
        }
        if self.is_success() && self.iterations < 1 {
            return Err(LedgerError::InvalidRecord(
                "successful run must report at least one iteration",
            ));
        }
        Ok(())
    }

    fn run_id(&self) -> String {
        format!(
            "{}-{}",
            self.cve_id.to_ascii_lowercase(),
            (self.started_at * 1000.0) as u64
        )
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("duplicate run id `{0}`")]
    DuplicateRunId(String),
    #[error("invalid run record: {0}")]
    InvalidRecord(&'static str),
    #[error("unreadable ledger document {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

pub struct LedgerStore {
    root: PathBuf,
}

impl LedgerStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, LedgerError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("runs"))?;
        Ok(LedgerStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Durable append. The final filename is claimed atomically, so a
    /// concurrent append of the same run id loses with `DuplicateRunId`.
    pub fn append_run(&self, record: &RunRecord) -> Result<PathBuf, LedgerError> {
        record.validate()?;
        let final_path = self.root.join("runs").join(format!("{}.json", record.run_id()));
        let tmp_path = final_path.with_extension(format!("tmp-{}", std::process::id()));
        let body = serde_json::to_string_pretty(record).expect("record serializes");
        std::fs::write(&tmp_path, &body)?;
        match std::fs::hard_link(&tmp_path, &final_path) {
            Ok(()) => {
                let _ = std::fs::remove_file(&tmp_path);
            }
            Err(e) => {
                let _ = std::fs::remove_file(&tmp_path);
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    return Err(LedgerError::DuplicateRunId(record.run_id()));
                }
                return Err(e.into());
            }
        }
        self.rewrite_index()?;
        Ok(final_path)
    }

    /// Loads every run document, ordered by start timestamp.
    pub fn load_runs(&self) -> Result<Vec<RunRecord>, LedgerError> {
        let mut records = Vec::new();
        let runs_dir = self.root.join("runs");
        for entry in std::fs::read_dir(&runs_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = std::fs::read_to_string(&path)?;
            let record: RunRecord =
                serde_json::from_str(&text).map_err(|e| LedgerError::Corrupt {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            records.push(record);
        }
        records.sort_by(|a, b| {
            a.started_at
                .partial_cmp(&b.started_at)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.cve_id.cmp(&b.cve_id))
        });
        Ok(records)
    }

    /// Derived index: run file -> content digest. Rebuilt after every
    /// append; the run documents themselves are the source of truth.
    fn rewrite_index(&self) -> Result<(), LedgerError> {
        let mut index = BTreeMap::new();
        for entry in std::fs::read_dir(self.root.join("runs"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let body = std::fs::read(&path)?;
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            index.insert(name, hex::encode(Sha256::digest(&body)));
        }
        static COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        let tmp = self.root.join(format!(
            "index.json.tmp-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
        ));
        std::fs::write(&tmp, serde_json::to_string_pretty(&index).unwrap())?;
        std::fs::rename(&tmp, self.root.join("index.json"))?;
        Ok(())
    }
}

/// Aggregates over a record set. Means are absent, not zero, when their
/// group is empty; iteration and container statistics range over successes,
/// mirroring how the reporting tables are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerStats {
    pub total_runs: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
    pub mean_iterations_overall: Option<f64>,
    pub mean_iterations_with_poc: Option<f64>,
    pub mean_iterations_without_poc: Option<f64>,
    pub multi_container_fraction: Option<f64>,
    pub mean_duration_secs: Option<f64>,
    pub poc_share: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn compute_stats(records: &[RunRecord]) -> LedgerStats {
    let successes: Vec<&RunRecord> = records.iter().filter(|r| r.is_success()).collect();
    let n_success = successes.len();
    let with_poc = successes.iter().filter(|r| r.poc_present);
    let without_poc = successes.iter().filter(|r| !r.poc_present);

    LedgerStats {
        total_runs: records.len(),
        successes: n_success,
        success_rate: (!records.is_empty()).then(|| n_success as f64 / records.len() as f64),
        mean_iterations_overall: mean(successes.iter().map(|r| r.iterations as f64)),
        mean_iterations_with_poc: mean(with_poc.map(|r| r.iterations as f64)),
        mean_iterations_without_poc: mean(without_poc.map(|r| r.iterations as f64)),
        multi_container_fraction: (n_success > 0).then(|| {
            successes.iter().filter(|r| r.containers >= 2).count() as f64 / n_success as f64
        }),
        mean_duration_secs: mean(
            successes
                .iter()
                .filter(|r| r.total_duration_secs > 0.0)
                .map(|r| r.total_duration_secs),
        ),
        poc_share: (n_success > 0).then(|| {
            successes.iter().filter(|r| r.poc_present).count() as f64 / n_success as f64
        }),
    }
}

/// `265s` -> `4min25s`, matching the convention used in reports.
pub fn format_duration(seconds: f64) -> String {
    let total = seconds.round() as u64;
    let (h, m, s) = (total / 3600, (total % 3600) / 60, total % 60);
    match (h, m) {
        (0, 0) => format!("{s}s"),
        (0, _) => format!("{m}min{s}s"),
        _ => format!("{h}h{m}min{s}s"),
    }
}

/// Compact encoding of a reported result table: success rows carry the full
/// column set, failure rows only their reason label.
#[derive(Debug, Deserialize)]
pub struct TableFixture {
    pub successes: Vec<SuccessRow>,
    pub failures: Vec<FailureRow>,
}

#[derive(Debug, Deserialize)]
pub struct SuccessRow {
    pub cve: String,
    pub lang: String,
    pub library: String,
    #[serde(default)]
    pub cwe: String,
    pub containers: u32,
    pub iter: u32,
    pub poc: bool,
    pub inter: bool,
    pub postcond: bool,
}

#[derive(Debug, Deserialize)]
pub struct FailureRow {
    pub cve: String,
    pub lang: String,
    pub library: String,
    pub reason: String,
}

impl TableFixture {
    pub fn into_records(self) -> Vec<RunRecord> {
        let mut records = Vec::new();
        for (i, row) in self.successes.into_iter().enumerate() {
            let outcome = if row.postcond {
                Verdict {
                    outcome: Outcome::VerificationAssisted,
                    failure_reason: None,
                    evidence: Vec::new(),
                    manual_postcondition_check: true,
                }
            } else {
                Verdict {
                    outcome: if row.inter {
                        Outcome::InterventionAssisted
                    } else {
                        Outcome::AutoVerified
                    },
                    failure_reason: None,
                    evidence: vec![Evidence::Marker(MarkerEvent {
                        kind: MarkerKind::Triggered,
                        line: 1,
                        raw: "VULNERABILITY TRIGGERED".to_string(),
                    })],
                    manual_postcondition_check: false,
                }
            };
            records.push(RunRecord {
                cve_id: format!("CVE-{}", row.cve),
                exploit_language: row.lang,
                library: row.library,
                cwe_ids: row
                    .cwe
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "--")
                    .map(|n| format!("CWE-{n}"))
                    .collect(),
                containers: row.containers,
                iterations: row.iter,
                poc_present: row.poc,
                intervention: row.inter,
                manual_postcondition: row.postcond,
                outcome,
                total_duration_secs: 0.0,
                started_at: i as f64,
                image_name: None,
                iteration_records: Vec::new(),
            });
        }
        let offset = records.len();
        for (i, row) in self.failures.into_iter().enumerate() {
            let reason =
                FailureReason::from_label(&row.reason).unwrap_or(FailureReason::CodeGeneration);
            records.push(RunRecord {
                cve_id: format!("CVE-{}", row.cve),
                exploit_language: row.lang,
                library: row.library,
                cwe_ids: Vec::new(),
                containers: 0,
                iterations: 0,
                poc_present: false,
                intervention: false,
                manual_postcondition: false,
                outcome: Verdict {
                    outcome: Outcome::Failed,
                    failure_reason: Some(reason),
                    evidence: Vec::new(),
                    manual_postcondition_check: false,
                },
                total_duration_secs: 0.0,
                started_at: (offset + i) as f64,
                image_name: None,
                iteration_records: Vec::new(),
            });
        }
        records
    }
}

/// Loads records from a ledger directory, a JSON array of records, or a
/// compact table fixture.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>, LedgerError> {
    if path.is_dir() {
        return LedgerStore::open(path)?.load_runs();
    }
    let text = std::fs::read_to_string(path)?;
    if let Ok(records) = serde_json::from_str::<Vec<RunRecord>>(&text) {
        return Ok(records);
    }
    let fixture: TableFixture = serde_json::from_str(&text).map_err(|e| LedgerError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(fixture.into_records())
}

pub const EXPORT_MANIFEST: &str = "manifest.json";

/// Writes a self-contained bundle: the run record as a manifest plus a copy
/// of the run's workspace artifacts (prompts, replies, scripts, logs).
pub fn export_run_bundle(
    record: &RunRecord,
    artifacts_dir: Option<&Path>,
    dest: &Path,
) -> Result<(), LedgerError> {
    std::fs::create_dir_all(dest)?;
    let manifest = serde_json::to_string_pretty(record).expect("record serializes");
    std::fs::write(dest.join(EXPORT_MANIFEST), manifest)?;
    let files_root = dest.join("files");
    std::fs::create_dir_all(&files_root)?;
    if let Some(src) = artifacts_dir {
        copy_tree(src, &files_root)?;
    }
    Ok(())
}

/// Reads a bundle back: the record plus the directory holding its files.
pub fn import_run_bundle(src: &Path) -> Result<(RunRecord, PathBuf), LedgerError> {
    let manifest = std::fs::read_to_string(src.join(EXPORT_MANIFEST))?;
    let record: RunRecord = serde_json::from_str(&manifest).map_err(|e| LedgerError::Corrupt {
        path: src.join(EXPORT_MANIFEST),
        reason: e.to_string(),
    })?;
    Ok((record, src.join("files")))
}

fn copy_tree(src: &Path, dest: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(src).sort_by_file_name() {
        let entry = entry.map_err(|e| std::io::Error::other(e.to_string()))?;
        let rel = entry
            .path()
            .strip_prefix(src)
            .expect("walkdir stays under src");
        if rel.as_os_str().is_empty() {
            continue;
        }
        let target = dest.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}
