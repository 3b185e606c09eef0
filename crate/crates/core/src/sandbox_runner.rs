//! Per-iteration workspaces, driver-script execution through an abstract
//! engine, and byte-budgeted log distillation.
//!
//! Build and run logs can reach hundreds of megabytes; only errors,
//! warnings, container build/run failures, sanitizer blocks, markers, and a
//! little surrounding context go back to the backend. Distillation streams,
//! keeps sanitizer blocks whole, and truncates from the middle when the
//! budget still overflows.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::cve_model::CveId;
use crate::exploit_builder::ExploitBundle;

/// Exit code reported when the engine kills a timed-out process tree.
pub const TIMEOUT_EXIT_CODE: i32 = 124;
/// Default execution timeout: covers the observed run-time range with margin.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(90 * 60);
/// Default distillation budget in bytes.
pub const DEFAULT_DISTILL_BUDGET: usize = 64 * 1024;

pub const SCRIPT_FILENAME: &str = "exploit.sh";
pub const OUTPUT_LOG_FILENAME: &str = "output.log";
pub const DISTILLED_LOG_FILENAME: &str = "distilled.log";
pub const MANIFEST_FILENAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Workspace {
    pub root: PathBuf,
    pub cve_id: CveId,
    pub attempt: u32,
    pub iteration: u32,
    pub created_at: u64,
}

impl Workspace {
    /// `<root>/<cve-id>/attempt-<k>/iter-<n>/`
    pub fn dir(&self) -> PathBuf {
        self.root
            .join(self.cve_id.image_name())
            .join(format!("attempt-{}", self.attempt))
            .join(format!("iter-{}", self.iteration))
    }

    pub fn script_path(&self) -> PathBuf {
        self.dir().join(SCRIPT_FILENAME)
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("workspace I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("iteration directory already exists: {0}")]
    DirectoryInUse(PathBuf),
    #[error("execution engine unavailable: {0}")]
    EngineUnavailable(String),
}

/// Creates a fresh iteration directory and writes the driver script into it
/// with execute permission. Prior iterations are never touched.
pub fn prepare_workspace(
    root: &Path,
    cve_id: &CveId,
    attempt: u32,
    iteration: u32,
    bundle: &ExploitBundle,
) -> Result<Workspace, SandboxError> {
    let workspace = Workspace {
        root: root.to_path_buf(),
        cve_id: cve_id.clone(),
        attempt,
        iteration,
        created_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs(),
    };
    let dir = workspace.dir();
    if dir.exists() {
        return Err(SandboxError::DirectoryInUse(dir));
    }
    std::fs::create_dir_all(&dir)?;
    let script_path = workspace.script_path();
    std::fs::write(&script_path, &bundle.script)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&script_path, std::fs::Permissions::from_mode(0o755))?;
    }
    std::fs::write(
        dir.join(MANIFEST_FILENAME),
        serde_json::to_string_pretty(&bundle.manifest_json()).expect("manifest serializes"),
    )?;
    Ok(workspace)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    /// Interleaved stream capture, as written to `output.log`.
    pub merged: String,
    pub duration_secs: f64,
    pub timed_out: bool,
    pub phase_markers: Vec<String>,
}

pub trait ExecutionEngine {
    fn execute(
        &mut self,
        workspace: &Workspace,
        timeout: Duration,
    ) -> Result<RawExecution, SandboxError>;
}

#[derive(Debug, Clone)]
pub struct RawExecution {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub merged: String,
    pub duration_secs: f64,
    pub timed_out: bool,
}

fn phase_marker_line(line: &str) -> bool {
    let t = line.trim_start();
    ["[STEP]", "[DEBUG]", "[ERROR]", "[*]", "[+]", "[-]", "[!]"]
        .iter()
        .any(|p| t.starts_with(p))
}

/// Runs the driver script in its workspace and captures merged output to
/// `output.log` under a timestamped header. Timeouts are reported through
/// the `timed_out` flag, not as errors.
pub fn execute_bundle(
    workspace: &Workspace,
    engine: &mut dyn ExecutionEngine,
    timeout: Duration,
) -> Result<ExecutionResult, SandboxError> {
    let raw = engine.execute(workspace, timeout)?;
    let header = format!(
        "# {} attempt {} iteration {} :: exit={} timed_out={} duration={:.3}s\n",
        workspace.cve_id,
        workspace.attempt,
        workspace.iteration,
        raw.exit_code,
        raw.timed_out,
        raw.duration_secs
    );
    let mut log = std::fs::File::create(workspace.dir().join(OUTPUT_LOG_FILENAME))?;
    log.write_all(header.as_bytes())?;
    log.write_all(raw.merged.as_bytes())?;

    let phase_markers = raw
        .merged
        .lines()
        .filter(|l| phase_marker_line(l))
        .map(|l| l.trim().to_string())
        .collect();

    Ok(ExecutionResult {
        exit_code: raw.exit_code,
        stdout: raw.stdout,
        stderr: raw.stderr,
        merged: raw.merged,
        duration_secs: raw.duration_secs,
        timed_out: raw.timed_out,
        phase_markers,
    })
}

/// Executes the driver script directly on the host shell. The script itself
/// performs its own image build and run; this engine never talks to the
/// container daemon.
pub struct HostEngine;

impl ExecutionEngine for HostEngine {
    fn execute(
        &mut self,
        workspace: &Workspace,
        timeout: Duration,
    ) -> Result<RawExecution, SandboxError> {
        let dir = workspace.dir();
        let mut command = Command::new("bash");
        command
            .arg(SCRIPT_FILENAME)
            .current_dir(&dir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            // Own process group so a timeout can kill the whole tree.
            command.process_group(0);
        }
        let started = Instant::now();
        let mut child = command
            .spawn()
            .map_err(|e| SandboxError::EngineUnavailable(format!("spawn failed: {e}")))?;

        let merged = Arc::new(Mutex::new(String::new()));
        let stdout_pipe = child.stdout.take().expect("stdout piped");
        let stderr_pipe = child.stderr.take().expect("stderr piped");
        let out_handle = capture_stream(stdout_pipe, Arc::clone(&merged));
        let err_handle = capture_stream(stderr_pipe, Arc::clone(&merged));

        let mut timed_out = false;
        let status = loop {
            match child.try_wait()? {
                Some(status) => break Some(status),
                None => {
                    if started.elapsed() >= timeout {
                        timed_out = true;
                        kill_process_tree(&mut child);
                        break child.wait().ok();
                    }
                    std::thread::sleep(Duration::from_millis(25));
                }
            }
        };

        let stdout = out_handle.join().unwrap_or_default();
        let stderr = err_handle.join().unwrap_or_default();
        let merged = Arc::try_unwrap(merged)
            .map(|m| m.into_inner().unwrap_or_default())
            .unwrap_or_default();

        let exit_code = if timed_out {
            TIMEOUT_EXIT_CODE
        } else {
            status
                .and_then(|s| s.code())
                .unwrap_or(TIMEOUT_EXIT_CODE)
        };
        Ok(RawExecution {
            exit_code,
            stdout,
            stderr,
            merged,
            duration_secs: started.elapsed().as_secs_f64(),
            timed_out,
        })
    }
}

fn capture_stream<R: Read + Send + 'static>(
    mut stream: R,
    merged: Arc<Mutex<String>>,
) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut own = String::new();
        let mut buf = [0u8; 8192];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let chunk = String::from_utf8_lossy(&buf[..n]).into_owned();
                    own.push_str(&chunk);
                    if let Ok(mut m) = merged.lock() {
                        m.push_str(&chunk);
                    }
                }
            }
        }
        own
    })
}

#[cfg(unix)]
fn kill_process_tree(child: &mut std::process::Child) {
    let pid = child.id() as i32;
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_process_tree(child: &mut std::process::Child) {
    let _ = child.kill();
}

#[derive(Debug, Deserialize)]
struct FakeScriptFile {
    results: Vec<FakeEntry>,
}

#[derive(Debug, Deserialize)]
struct FakeEntry {
    attempt: u32,
    iteration: u32,
    exit_code: i32,
    #[serde(default)]
    stdout: Option<String>,
    #[serde(default)]
    stderr: Option<String>,
    #[serde(default)]
    stdout_file: Option<String>,
    #[serde(default)]
    stderr_file: Option<String>,
    #[serde(default)]
    duration: f64,
}

/// Deterministic engine replaying scripted results keyed by
/// (attempt, iteration) from a JSON file. An entry whose duration exceeds
/// the timeout reports a timeout without sleeping.
pub struct FakeEngine {
    entries: Vec<(u32, u32, RawExecution, f64)>,
}

impl FakeEngine {
    pub fn from_script_file(path: &Path) -> Result<Self, SandboxError> {
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = std::fs::read_to_string(path)?;
        let script: FakeScriptFile = serde_json::from_str(&text)
            .map_err(|e| SandboxError::EngineUnavailable(format!("bad engine script: {e}")))?;
        let mut entries = Vec::new();
        for entry in script.results {
            let read_side = |inline: &Option<String>,
                             file: &Option<String>|
             -> Result<String, SandboxError> {
                if let Some(text) = inline {
                    return Ok(text.clone());
                }
                match file {
                    Some(rel) => Ok(std::fs::read_to_string(base.join(rel))?),
                    None => Ok(String::new()),
                }
            };
            let stdout = read_side(&entry.stdout, &entry.stdout_file)?;
            let stderr = read_side(&entry.stderr, &entry.stderr_file)?;
            let merged = format!("{stdout}{stderr}");
            entries.push((
                entry.attempt,
                entry.iteration,
                RawExecution {
                    exit_code: entry.exit_code,
                    stdout,
                    stderr,
                    merged,
                    duration_secs: entry.duration,
                    timed_out: false,
                },
                entry.duration,
            ));
        }
        Ok(FakeEngine { entries })
    }
}

impl ExecutionEngine for FakeEngine {
    fn execute(
        &mut self,
        workspace: &Workspace,
        timeout: Duration,
    ) -> Result<RawExecution, SandboxError> {
        let entry = self
            .entries
            .iter()
            .find(|(a, i, _, _)| *a == workspace.attempt && *i == workspace.iteration)
            .ok_or_else(|| {
                SandboxError::EngineUnavailable(format!(
                    "no scripted result for attempt {} iteration {}",
                    workspace.attempt, workspace.iteration
                ))
            })?;
        let (_, _, raw, duration) = entry;
        let mut raw = raw.clone();
        if Duration::from_secs_f64(*duration) > timeout {
            raw.timed_out = true;
            raw.exit_code = TIMEOUT_EXIT_CODE;
            raw.duration_secs = timeout.as_secs_f64();
        }
        Ok(raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineCategory {
    Error,
    Warning,
    BuildFailure,
    RunFailure,
    Sanitizer,
    Marker,
    CodeContext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistilledLine {
    pub line: u64,
    pub category: LineCategory,
    pub text: String,
}

pub const ELISION_SENTINEL: &str = "--- [log elided to fit budget] ---";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistilledLog {
    pub lines: Vec<DistilledLine>,
    pub original_bytes: u64,
    pub kept_bytes: u64,
    /// Line number after which the middle elision occurred, if any.
    pub elided_after_line: Option<u64>,
}

impl DistilledLog {
    /// Text form for prompt embedding and `distilled.log`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            if self.elided_after_line == Some(line.line) {
                // Sentinel goes after this line (it closes the head region).
            }
            out.push_str(&line.text);
            out.push('\n');
            if self.elided_after_line == Some(line.line) {
                out.push_str(ELISION_SENTINEL);
                out.push('\n');
            }
        }
        if self.lines.is_empty() && self.elided_after_line.is_some() {
            out.push_str(ELISION_SENTINEL);
            out.push('\n');
        }
        out
    }
}

fn error_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(error[: ]|no such file|undefined reference|command not found)").unwrap()
    })
}

fn warning_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)warning[: ]").unwrap())
}

fn build_failure_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(failed to build|build failed|returned a non-zero code|failed to solve)")
            .unwrap()
    })
}

fn run_failure_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(segmentation fault|panic|traceback|fatal|non-zero exit)").unwrap()
    })
}

fn marker_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(VULNERABILITY[ _]TRIGGERED|NOT[ _]TRIGGERED)").unwrap()
    })
}

const SANITIZER_BLOCK_START: &str = "ERROR: AddressSanitizer";
const SANITIZER_BLOCK_END: &str = "SUMMARY:";
/// Safety cap for blocks whose SUMMARY line never arrives.
const SANITIZER_BLOCK_MAX_LINES: usize = 2000;
const CONTEXT_RADIUS: usize = 2;
const SENTINEL_RESERVE: usize = 64;

/// Whether a line matches one of the failure patterns the distiller keeps
/// (markers excluded).
pub fn looks_like_failure_line(line: &str) -> bool {
    matches!(
        classify(line),
        Some(
            LineCategory::Error
                | LineCategory::Warning
                | LineCategory::BuildFailure
                | LineCategory::RunFailure
        )
    ) || line.contains(SANITIZER_BLOCK_START)
}

fn classify(line: &str) -> Option<LineCategory> {
    if marker_pattern().is_match(line) {
        Some(LineCategory::Marker)
    } else if build_failure_pattern().is_match(line) {
        Some(LineCategory::BuildFailure)
    } else if run_failure_pattern().is_match(line) {
        Some(LineCategory::RunFailure)
    } else if error_pattern().is_match(line) {
        Some(LineCategory::Error)
    } else if warning_pattern().is_match(line) {
        Some(LineCategory::Warning)
    } else {
        None
    }
}

/// One atomic keep-or-drop unit: a single line, or a whole sanitizer block.
struct Unit {
    seq: u64,
    lines: Vec<DistilledLine>,
    bytes: usize,
}

struct UnitCollector {
    budget: usize,
    head: Vec<Unit>,
    head_bytes: usize,
    head_full: bool,
    tail: VecDeque<Unit>,
    tail_bytes: usize,
    total_units: u64,
    total_bytes: u64,
}

impl UnitCollector {
    fn new(budget: usize) -> Self {
        UnitCollector {
            budget,
            head: Vec::new(),
            head_bytes: 0,
            head_full: false,
            tail: VecDeque::new(),
            tail_bytes: 0,
            total_units: 0,
            total_bytes: 0,
        }
    }

    fn push(&mut self, lines: Vec<DistilledLine>) {
        let bytes: usize = lines.iter().map(|l| l.text.len() + 1).sum();
        // Units that could never fit the budget are elided atomically.
        if bytes > self.budget {
            self.total_units += 1;
            self.total_bytes += bytes as u64;
            return;
        }
        let unit = Unit {
            seq: self.total_units,
            lines,
            bytes,
        };
        self.total_units += 1;
        self.total_bytes += bytes as u64;

        if !self.head_full && self.head_bytes + bytes <= self.budget {
            self.head_bytes += bytes;
            self.head.push(unit);
            return;
        }
        self.head_full = true;
        self.tail_bytes += bytes;
        self.tail.push_back(unit);
        while self.tail_bytes > self.budget {
            if let Some(front) = self.tail.pop_front() {
                self.tail_bytes -= front.bytes;
            } else {
                break;
            }
        }
    }

    fn finish(self, original_bytes: u64) -> DistilledLog {
        // Everything fit: no truncation.
        if !self.head_full && self.total_bytes <= self.budget as u64 {
            let mut lines = Vec::new();
            let mut kept = 0u64;
            for unit in self.head {
                kept += unit.bytes as u64;
                lines.extend(unit.lines);
            }
            let elided = if kept < self.total_bytes || self.total_units > lines.len() as u64 {
                // Oversized units were dropped even though the rest fit.
                Some(lines.last().map(|l| l.line).unwrap_or(0))
            } else {
                None
            };
            let kept_bytes = kept + elided.map_or(0, |_| ELISION_SENTINEL.len() as u64 + 1);
            return DistilledLog {
                lines,
                original_bytes,
                kept_bytes,
                elided_after_line: elided,
            };
        }

        // Middle truncation: greedy prefix into one half of the budget,
        // greedy suffix into the other, sentinel in between.
        let usable = self.budget.saturating_sub(SENTINEL_RESERVE);
        let head_budget = usable / 2;
        let tail_budget = usable - head_budget;

        let mut kept_head: Vec<Unit> = Vec::new();
        let mut used = 0;
        for unit in self.head {
            if used + unit.bytes > head_budget {
                break;
            }
            used += unit.bytes;
            kept_head.push(unit);
        }
        let mut kept_tail: VecDeque<Unit> = VecDeque::new();
        let mut tail_used = 0;
        let head_max_seq = kept_head.last().map(|u| u.seq);
        for unit in self.tail.into_iter().rev() {
            if tail_used + unit.bytes > tail_budget {
                break;
            }
            if let Some(max) = head_max_seq {
                if unit.seq <= max {
                    continue;
                }
            }
            tail_used += unit.bytes;
            kept_tail.push_front(unit);
        }

        let elided_after_line = kept_head
            .last()
            .and_then(|u| u.lines.last())
            .map(|l| l.line)
            .or(Some(0));
        let mut lines = Vec::new();
        for unit in kept_head {
            lines.extend(unit.lines);
        }
        for unit in kept_tail {
            lines.extend(unit.lines);
        }
        let kept_bytes =
            (used + tail_used) as u64 + ELISION_SENTINEL.len() as u64 + 1;
        DistilledLog {
            lines,
            original_bytes,
            kept_bytes,
            elided_after_line,
        }
    }
}

/// Streaming distillation over any line source; memory stays proportional
/// to the budget, not to the log.
pub fn distill_reader<R: BufRead>(reader: R, budget: usize) -> std::io::Result<DistilledLog> {
    assert!(budget > 0, "distillation budget must be positive");
    let mut collector = UnitCollector::new(budget);
    let mut original_bytes = 0u64;
    let mut line_no = 0u64;

    // Ring of recent unkept lines for leading context.
    let mut recent: VecDeque<(u64, String)> = VecDeque::with_capacity(CONTEXT_RADIUS + 1);
    let mut last_kept_line = 0u64;
    let mut trailing_context = 0usize;
    let mut block: Option<Vec<DistilledLine>> = None;

    for line in reader.lines() {
        let text = line?;
        line_no += 1;
        original_bytes += text.len() as u64 + 1;

        if let Some(block_lines) = &mut block {
            let ends = text.trim_start().starts_with(SANITIZER_BLOCK_END);
            block_lines.push(DistilledLine {
                line: line_no,
                category: LineCategory::Sanitizer,
                text,
            });
            if ends || block_lines.len() >= SANITIZER_BLOCK_MAX_LINES {
                last_kept_line = line_no;
                trailing_context = CONTEXT_RADIUS;
                collector.push(block.take().unwrap());
            }
            continue;
        }

        if text.contains(SANITIZER_BLOCK_START) {
            // Leading context first, then open the block.
            let mut context_units = Vec::new();
            while let Some((n, t)) = recent.pop_front() {
                if n > last_kept_line {
                    context_units.push(DistilledLine {
                        line: n,
                        category: LineCategory::CodeContext,
                        text: t,
                    });
                }
            }
            for unit in context_units {
                last_kept_line = unit.line;
                collector.push(vec![unit]);
            }
            block = Some(vec![DistilledLine {
                line: line_no,
                category: LineCategory::Sanitizer,
                text,
            }]);
            continue;
        }

        match classify(&text) {
            Some(category) => {
                let mut context_units = Vec::new();
                while let Some((n, t)) = recent.pop_front() {
                    if n > last_kept_line {
                        context_units.push(DistilledLine {
                            line: n,
                            category: LineCategory::CodeContext,
                            text: t,
                        });
                    }
                }
                for unit in context_units {
                    collector.push(vec![unit]);
                }
                collector.push(vec![DistilledLine {
                    line: line_no,
                    category,
                    text,
                }]);
                last_kept_line = line_no;
                trailing_context = CONTEXT_RADIUS;
            }
            None => {
                if trailing_context > 0 {
                    trailing_context -= 1;
                    last_kept_line = line_no;
                    collector.push(vec![DistilledLine {
                        line: line_no,
                        category: LineCategory::CodeContext,
                        text,
                    }]);
                } else {
                    recent.push_back((line_no, text));
                    while recent.len() > CONTEXT_RADIUS {
                        recent.pop_front();
                    }
                }
            }
        }
    }
    // A block whose SUMMARY never arrived still counts, whole.
    if let Some(block_lines) = block.take() {
        collector.push(block_lines);
    }

    Ok(collector.finish(original_bytes))
}

/// In-memory front end for [`distill_reader`].
pub fn distill_log(log: &str, budget: usize) -> DistilledLog {
    distill_reader(BufReader::new(log.as_bytes()), budget).expect("in-memory read cannot fail")
}
