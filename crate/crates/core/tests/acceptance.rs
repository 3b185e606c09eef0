//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (visible under `cargo test --test acceptance -- --nocapture`).

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cvepipe_core::cve_model::parse_cve_record;
use cvepipe_core::env_planner::{
    self, ContainerPlan, ContainerSpec, EnvironmentBundle, RuleId, Severity,
};
use cvepipe_core::llm_gateway::{
    BackendDescriptor, ChatBackend, ChatMessage, ChatRequest, Completion, Gateway, GatewayError,
    StepTag,
};
use cvepipe_core::prompt_catalog::PromptCatalog;
use cvepipe_core::refinement_loop::{
    call_budget, LoopConfig, PipelineRunner, RunOptions, Termination,
};
use cvepipe_core::run_ledger::{compute_stats, load_records, LedgerStore};
use cvepipe_core::sandbox_runner::{
    distill_log, distill_reader, ExecutionEngine, FakeEngine, LineCategory, RawExecution,
    SandboxError, Workspace,
};
use cvepipe_core::strict_json;
use cvepipe_core::verdict_engine::{parse_sanitizer_report, Outcome, SanitizerTool};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn read_fixture(rel: &str) -> String {
    let path = fixtures().join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn pass(criterion: &str) {
    eprintln!("ACCEPTANCE {criterion}: PASS");
}

#[test]
fn acceptance_1_end_to_end_replay() {
    let started = Instant::now();
    let workdir = tempfile::tempdir().unwrap();
    let ledger_dir = workdir.path().join("ledger");

    let record = parse_cve_record(&read_fixture("cves/cve-2023-25668.json")).unwrap();
    let mut gateway = Gateway::new(&BackendDescriptor::scripted(
        fixtures().join("transcripts/cve-2023-25668"),
    ))
    .unwrap();
    let mut engine =
        FakeEngine::from_script_file(&fixtures().join("engine/cve-2023-25668.json")).unwrap();
    let fetcher =
        cvepipe_core::constraint_engine::FixtureFetcher::open(fixtures().join("cwe")).unwrap();
    let ledger = LedgerStore::open(&ledger_dir).unwrap();
    let catalog = PromptCatalog::builtin();

    let mut runner = PipelineRunner::new(
        &catalog,
        &mut gateway,
        &mut engine,
        Some(&fetcher),
        Some(&ledger),
        RunOptions::new(workdir.path()),
    );
    let result = runner.run_pipeline(record).unwrap();

    assert_eq!(result.outcome.termination, Termination::Confirmed);
    assert_eq!(result.verdict.outcome, Outcome::AutoVerified);

    let runs = ledger.load_runs().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].containers, 1);
    assert_eq!(runs[0].image_name.as_deref(), Some("cve-2023-25668"));

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    pass("1 end-to-end replay");
}

#[test]
fn acceptance_2_multi_container_replay() {
    let mut gateway = Gateway::new(&BackendDescriptor::scripted(
        fixtures().join("transcripts/cve-2025-0665"),
    ))
    .unwrap();

    let ask = |gateway: &mut Gateway, step: &str| {
        gateway
            .complete(&ChatRequest::new(
                vec![ChatMessage::user("environment stage replay")],
                StepTag::new(step, 1, 0),
            ))
            .unwrap()
            .text
    };

    let plan_reply = ask(&mut gateway, "s3.1");
    let plan = env_planner::validate_container_plan(&plan_reply).unwrap();
    assert_eq!(plan.count, 2);
    assert_eq!(plan.specs[0].name, "vulnerable-client");
    assert_eq!(plan.specs[1].name, "http-server");

    let env_reply = ask(&mut gateway, "s3.2");
    let bundle = env_planner::split_environment_output(&env_reply, &plan).unwrap();
    assert!(bundle.multi_container);
    assert!(bundle.compose_file().is_some());
    assert_eq!(bundle.build_files().count(), 2);

    // The same output against a single-container plan must be rejected.
    let single = ContainerPlan {
        count: 1,
        specs: vec![ContainerSpec {
            name: "vulnerable-client".into(),
            image: "debian:bookworm".into(),
            purpose: String::new(),
            configuration: String::new(),
        }],
        dependency_notes: vec![],
    };
    assert!(matches!(
        env_planner::split_environment_output(&env_reply, &single),
        Err(env_planner::SplitError::UnexpectedCompose)
    ));
    pass("2 multi-container replay");
}

#[test]
fn acceptance_3_statistics_reproduction() {
    let records = load_records(&fixtures().join("ledger/table1.json")).unwrap();
    assert_eq!(records.len(), 102);

    // Independent recomputation straight off the record rows.
    let successes: Vec<_> = records.iter().filter(|r| r.is_success()).collect();
    assert_eq!(successes.len(), 71);
    let with_poc: Vec<_> = successes.iter().filter(|r| r.poc_present).collect();
    let without_poc: Vec<_> = successes.iter().filter(|r| !r.poc_present).collect();
    assert_eq!(with_poc.len(), 48);
    let oracle_with = with_poc.iter().map(|r| r.iterations as f64).sum::<f64>() / 48.0;
    let oracle_without = without_poc.iter().map(|r| r.iterations as f64).sum::<f64>() / 23.0;

    let stats = compute_stats(&records);
    assert_eq!(stats.total_runs, 102);
    assert_eq!(stats.successes, 71);

    let close = |actual: Option<f64>, expected: f64, tol: f64, what: &str| {
        let actual = actual.unwrap_or_else(|| panic!("{what} absent"));
        assert!(
            (actual - expected).abs() <= tol,
            "{what}: {actual} vs {expected}"
        );
    };
    // Published aggregates, at 0.1 percentage point / 0.01 iteration.
    close(stats.success_rate, 71.0 / 102.0, 0.001, "success_rate");
    close(stats.success_rate, 0.696, 0.001, "success_rate (rounded)");
    close(stats.poc_share, 48.0 / 71.0, 0.001, "poc_share");
    close(stats.poc_share, 0.676, 0.001, "poc_share (rounded)");
    close(
        stats.multi_container_fraction,
        20.0 / 71.0,
        0.001,
        "multi_container_fraction",
    );
    close(
        stats.multi_container_fraction,
        0.282,
        0.001,
        "multi_container_fraction (rounded)",
    );
    close(stats.mean_iterations_with_poc, oracle_with, 1e-9, "with-PoC mean vs oracle");
    close(stats.mean_iterations_with_poc, 3.94, 0.01, "with-PoC mean");
    close(
        stats.mean_iterations_without_poc,
        oracle_without,
        1e-9,
        "without-PoC mean vs oracle",
    );
    close(stats.mean_iterations_without_poc, 4.83, 0.01, "without-PoC mean");
    assert!(
        stats.mean_iterations_with_poc.unwrap() < stats.mean_iterations_without_poc.unwrap(),
        "PoC availability must lower the iteration mean"
    );
    pass("3 statistics reproduction");
}

#[test]
fn acceptance_4_sanitizer_parsing() {
    let log = read_fixture("logs/cve-2024-5991-asan.log");
    let findings = parse_sanitizer_report(&log);
    assert_eq!(findings.len(), 1, "exactly one finding");
    let finding = &findings[0];
    assert_eq!(finding.tool, SanitizerTool::AddressSanitizer);
    assert_eq!(finding.signal, "SEGV");
    assert!(
        finding.summary.contains("src/x509.c:13161"),
        "summary location missing: {}",
        finding.summary
    );
    let functions: Vec<&str> = finding.frames.iter().map(|f| f.function.as_str()).collect();
    assert_eq!(
        functions,
        vec![
            "wolfSSL_X509_check_host",
            "MatchDomainName",
            "main",
            "__libc_start_main",
            "_start"
        ]
    );
    assert_eq!(finding.frames[0].location, "src/x509.c:13161");
    pass("4 sanitizer parsing");
}

fn profile_for_lint(language: &str, postconditions: &[&str]) -> cvepipe_core::VulnerabilityProfile {
    cvepipe_core::VulnerabilityProfile {
        title: "lint case".into(),
        cwes: vec![],
        preconditions: vec!["unspecified".into()],
        postconditions: postconditions.iter().map(|s| s.to_string()).collect(),
        exploit_language: language.into(),
        steps: vec!["unspecified".into()],
        no_simulation_obligation: true,
    }
}

fn bundle_from_dir(dir: &Path) -> EnvironmentBundle {
    let mut files = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            files.insert(
                path.file_name().unwrap().to_str().unwrap().to_string(),
                std::fs::read_to_string(&path).unwrap(),
            );
        }
    }
    EnvironmentBundle {
        multi_container: files
            .iter()
            .any(|(n, b)| env_planner::is_compose_file(n, b)),
        files,
    }
}

fn plan_of(count: usize) -> ContainerPlan {
    ContainerPlan {
        count,
        specs: (0..count)
            .map(|i| ContainerSpec {
                name: format!("svc-{i}"),
                image: String::new(),
                purpose: String::new(),
                configuration: String::new(),
            })
            .collect(),
        dependency_notes: vec![],
    }
}

#[test]
fn acceptance_5_environment_lint_corpus() {
    // (fixture dir, expected rule, severity, language, postconditions, containers)
    let crash = &["the application crashes"][..];
    let cases: [(&str, RuleId, Severity, &str, &[&str], usize); 8] = [
        ("a1", RuleId::A1, Severity::Error, "Go", crash, 1),
        ("a4", RuleId::A4, Severity::Error, "Go", crash, 2),
        ("a5", RuleId::A5, Severity::Error, "Go", crash, 2),
        ("b6", RuleId::B6, Severity::Warning, "Go", crash, 1),
        ("c9", RuleId::C9, Severity::Error, "Go", crash, 1),
        ("e15", RuleId::E15, Severity::Warning, "Python", crash, 1),
        ("e16", RuleId::E16, Severity::Warning, "C", crash, 1),
        (
            "f18",
            RuleId::F18,
            Severity::Error,
            "Shell",
            &["local attacker gains root via privilege escalation"],
            1,
        ),
    ];
    for (dir, rule, severity, language, postconditions, containers) in cases {
        let bundle = bundle_from_dir(&fixtures().join("lint").join(dir));
        let findings = env_planner::lint_environment(
            &bundle,
            &plan_of(containers),
            &profile_for_lint(language, postconditions),
        );
        assert_eq!(
            findings.len(),
            1,
            "{dir}: expected exactly the seeded finding, got {findings:?}"
        );
        assert_eq!(findings[0].rule_id, rule, "{dir}");
        assert_eq!(findings[0].severity, severity, "{dir}");
    }

    // The recorded single-container environment lints clean of errors.
    let clean = bundle_from_dir(&fixtures().join("lint/clean-cve-2023-25668"));
    let findings = env_planner::lint_environment(
        &clean,
        &plan_of(1),
        &profile_for_lint(
            "Python",
            &[
                "Heap memory outside the control of the user is accessed.",
                "This can lead to a crash or remote code execution.",
            ],
        ),
    );
    assert!(
        !env_planner::has_errors(&findings),
        "clean environment produced errors: {findings:?}"
    );
    pass("5 environment lint corpus");
}

// --- adversarial machinery for criteria 6 and 9 ---------------------------

fn canned_early_reply(step: &str) -> Option<String> {
    match step {
        "s1.1" => Some(read_fixture("transcripts/cve-2023-25668/s1.1_1_0.txt")),
        "s1.2" => Some(read_fixture("transcripts/cve-2023-25668/s1.2_1_0.txt")),
        "s2" => Some(read_fixture("transcripts/cve-2023-25668/s2_1_0.txt")),
        "s3.1" => Some(read_fixture("transcripts/cve-2023-25668/s3.1_1_0.txt")),
        "s3.2" => Some(read_fixture("transcripts/cve-2023-25668/s3.2_1_0.txt")),
        _ => None,
    }
}

fn valid_script(variant: u64) -> String {
    format!(
        "#!/bin/bash\nset -e\n# variant {variant}\nCVE_ID=\"cve-2023-25668\"\ncat > poc.py << 'EOF'\nimport tensorflow as tf\ntf.raw_ops.QuantizeAndDequantizeV2(input=[2.5], axis=0x7fffffff)\nprint(\"[+] VULNERABILITY TRIGGERED\")\nEOF\ncat > Dockerfile << 'EOF'\nFROM tensorflow/tensorflow:2.11.0\nCOPY poc.py /app/poc.py\nCMD [\"python3\", \"poc.py\"]\nEOF\ndocker build -t $CVE_ID .\ndocker run --rm $CVE_ID 2>&1 | tee output.log\ngrep -q \"VULNERABILITY TRIGGERED\" output.log\n"
    )
}

/// Never confirms with evidence; loop-step replies are randomized between
/// revisions, garbage, and hollow confirmations.
struct AdversarialBackend {
    rng: ChaCha8Rng,
    calls: u64,
}

impl ChatBackend for AdversarialBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        self.calls += 1;
        let step = request.step_tag.step.as_str();
        let text = if let Some(early) = canned_early_reply(step) {
            early
        } else {
            match self.rng.gen_range(0..4u8) {
                0 => valid_script(self.rng.r#gen()),
                1 => "I am not sure what went wrong here.".to_string(),
                2 => "Everything checks out to me.\n\nSuccessful exploit confirmed\n".to_string(),
                _ => valid_script(self.rng.r#gen()),
            }
        };
        Ok(Completion {
            tokens_in: 1,
            tokens_out: 1,
            text,
        })
    }

    fn kind(&self) -> cvepipe_core::llm_gateway::BackendKind {
        cvepipe_core::llm_gateway::BackendKind::Scripted
    }
}

/// Always fails, never emits markers or sanitizer output.
struct FailingEngine;

impl ExecutionEngine for FailingEngine {
    fn execute(
        &mut self,
        _workspace: &Workspace,
        _timeout: Duration,
    ) -> Result<RawExecution, SandboxError> {
        let stderr = "gcc: error: undefined reference to `exploit'\n".to_string();
        Ok(RawExecution {
            exit_code: 1,
            stdout: "build started\n".to_string(),
            stderr: stderr.clone(),
            merged: format!("build started\n{stderr}"),
            duration_secs: 0.01,
            timed_out: false,
        })
    }
}

#[test]
fn acceptance_6_loop_termination_bound() {
    let config = LoopConfig {
        max_iterations: 3,
        max_attempts: 3,
        reanchor_period: 3,
    };
    let bound = call_budget(&config) as usize;
    assert_eq!(bound, 7 + 3 * (3 * 2 + 1));
    let record_json = read_fixture("cves/cve-2023-25668.json");
    let catalog = PromptCatalog::builtin();
    let workdir = tempfile::tempdir().unwrap();

    for seed in 0..1000u64 {
        let record = parse_cve_record(&record_json).unwrap();
        let mut gateway = Gateway::with_backend(Box::new(AdversarialBackend {
            rng: ChaCha8Rng::seed_from_u64(seed),
            calls: 0,
        }));
        let mut engine = FailingEngine;
        let options = RunOptions {
            config,
            ..RunOptions::new(workdir.path().join(format!("run-{seed}")))
        };
        let mut runner =
            PipelineRunner::new(&catalog, &mut gateway, &mut engine, None, None, options);
        let result = runner.run_pipeline(record).unwrap();

        assert_ne!(
            result.outcome.termination,
            Termination::Confirmed,
            "seed {seed}: adversarial run must not confirm"
        );
        assert_ne!(
            result.verdict.outcome,
            Outcome::AutoVerified,
            "seed {seed}: no evidence, no auto-verification"
        );
        let calls = gateway.transcript_record().len();
        assert!(
            calls <= bound,
            "seed {seed}: {calls} backend calls exceed the bound {bound}"
        );
        let s8_records = result
            .record
            .iteration_records
            .iter()
            .filter(|r| r.step_tag.step == "s8")
            .count();
        assert_eq!(
            s8_records as u32, result.record.iterations,
            "seed {seed}: one ledger record per iteration"
        );
    }
    pass("6 loop termination bound (1000 adversarial runs)");
}

// --- criterion 7: distillation --------------------------------------------

/// Generates a large log on the fly; nothing is materialized up front.
struct SyntheticLog {
    produced: usize,
    target: usize,
    line_no: u64,
    pending: Vec<u8>,
    specials: Vec<(u64, &'static str)>,
}

impl SyntheticLog {
    fn new(target: usize) -> Self {
        SyntheticLog {
            produced: 0,
            target,
            line_no: 0,
            pending: Vec::new(),
            specials: Vec::new(),
        }
    }
}

const ASAN_BLOCK: &str = "==77==ERROR: AddressSanitizer: heap-buffer-overflow on address 0x60200000ef37\n    #0 0x4009ae in main demo.c:12\nSUMMARY: AddressSanitizer: heap-buffer-overflow demo.c:12 in main\n";

impl Read for SyntheticLog {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        if self.pending.is_empty() {
            if self.produced >= self.target {
                return Ok(0);
            }
            self.line_no += 1;
            // A handful of interesting lines early and late; bulk is noise.
            let line: String = match self.line_no {
                50 => "error: early seeded failure\n".to_string(),
                51 => {
                    self.specials.push((self.line_no, "sanitizer"));
                    ASAN_BLOCK.to_string()
                }
                120 => "[+] VULNERABILITY TRIGGERED\n".to_string(),
                200 => "warning: something looked off\n".to_string(),
                n if n % 40_000 == 0 => format!("error: periodic failure at line {n}\n"),
                n => format!("{n} {}\n", "x".repeat(3000)),
            };
            self.pending = line.into_bytes();
            self.produced += self.pending.len();
        }
        let n = buf.len().min(self.pending.len());
        buf[..n].copy_from_slice(&self.pending[..n]);
        self.pending.drain(..n);
        Ok(n)
    }
}

#[test]
fn acceptance_7_distillation_properties() {
    // 500 MB streamed through a 64 KiB budget.
    let target = 500 * 1024 * 1024;
    let budget = 64 * 1024;
    let reader = std::io::BufReader::new(SyntheticLog::new(target));
    let out = distill_reader(reader, budget).unwrap();
    assert!(out.original_bytes >= target as u64);
    assert!(out.kept_bytes <= budget as u64);
    let text = out.render();
    assert!(text.contains("error: early seeded failure"));
    assert!(text.contains("VULNERABILITY TRIGGERED"));
    assert!(text.contains("warning: something looked off"));
    // The sanitizer block arrives whole.
    assert!(text.contains("ERROR: AddressSanitizer: heap-buffer-overflow"));
    assert!(text.contains("SUMMARY: AddressSanitizer: heap-buffer-overflow"));
    let sanitizer_lines = out
        .lines
        .iter()
        .filter(|l| l.category == LineCategory::Sanitizer)
        .count();
    assert_eq!(sanitizer_lines % 3, 0, "sanitizer blocks are kept whole");

    // Budget monotonicity over 100 random (log, budget < budget') pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for round in 0..100 {
        let lines: usize = rng.gen_range(200..2_000);
        let mut log = String::new();
        for i in 0..lines {
            match rng.gen_range(0..10u8) {
                0 => log.push_str(&format!("error: synthetic failure {i}\n")),
                1 => log.push_str(&format!("warning: synthetic warning {i}\n")),
                2 if rng.gen_bool(0.3) => log.push_str(ASAN_BLOCK),
                3 => log.push_str("NOT TRIGGERED\n"),
                _ => log.push_str(&format!("noise {i} {}\n", "y".repeat(rng.gen_range(10..120)))),
            }
        }
        let small_budget = rng.gen_range(256..4_096);
        let large_budget = small_budget + rng.gen_range(1..32_768);
        let small = distill_log(&log, small_budget);
        let large = distill_log(&log, large_budget);
        assert!(small.kept_bytes <= small_budget as u64, "round {round}");
        assert!(large.kept_bytes <= large_budget as u64, "round {round}");
        let small_set: std::collections::HashSet<u64> =
            small.lines.iter().map(|l| l.line).collect();
        let large_set: std::collections::HashSet<u64> =
            large.lines.iter().map(|l| l.line).collect();
        assert!(
            small_set.is_subset(&large_set),
            "round {round}: a larger budget lost lines kept at the smaller one"
        );
    }
    pass("7 distillation properties");
}

// --- criterion 8: strict-JSON property -------------------------------------

fn random_json_object(rng: &mut ChaCha8Rng, depth: u8) -> serde_json::Value {
    let tricky = [
        "plain",
        "has { open brace",
        "has } close brace",
        "both {{}} and }{ inside",
        "escaped quote \" then brace {",
        "backslash \\ then }",
    ];
    let mut map = serde_json::Map::new();
    for i in 0..rng.gen_range(1..4) {
        let key = format!("k{i}");
        let value = if depth > 0 && rng.gen_bool(0.4) {
            random_json_object(rng, depth - 1)
        } else {
            serde_json::Value::String(tricky[rng.gen_range(0..tricky.len())].to_string())
        };
        map.insert(key, value);
    }
    serde_json::Value::Object(map)
}

#[test]
fn acceptance_8_strict_json_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let prose = ["Sure, here you go:", "  ", "That is all.", "no braces here"];
    for round in 0..1000 {
        let object_count = rng.gen_range(0..=3usize);
        let objects: Vec<String> = (0..object_count)
            .map(|_| random_json_object(&mut rng, 2).to_string())
            .collect();
        let mut text = String::new();
        for object in &objects {
            text.push_str(prose[rng.gen_range(0..prose.len())]);
            text.push('\n');
            text.push_str(object);
            text.push('\n');
        }
        text.push_str(prose[rng.gen_range(0..prose.len())]);

        let result = strict_json::extract_single_object(&text);
        match object_count {
            1 => {
                let extraction = result.unwrap_or_else(|e| {
                    panic!("round {round}: expected success, got {e} over {text}")
                });
                assert_eq!(extraction.json, objects[0], "round {round}");
            }
            _ => assert!(
                result.is_err(),
                "round {round}: {object_count} objects must not extract"
            ),
        }
    }
    pass("8 strict-JSON property (1000 generated texts)");
}

// --- criterion 9: no success without evidence ------------------------------

/// Answers every loop-step request with a hollow confirmation.
struct HollowConfirmBackend {
    replies: HashMap<String, String>,
}

impl ChatBackend for HollowConfirmBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let step = request.step_tag.step.as_str();
        let text = self
            .replies
            .get(step)
            .cloned()
            .unwrap_or_else(|| "All good.\n\nSuccessful exploit confirmed\n".to_string());
        Ok(Completion {
            text,
            tokens_in: 1,
            tokens_out: 1,
        })
    }

    fn kind(&self) -> cvepipe_core::llm_gateway::BackendKind {
        cvepipe_core::llm_gateway::BackendKind::Scripted
    }
}

/// Succeeds cleanly: exit 0, no markers, no sanitizer output.
struct CleanEngine;

impl ExecutionEngine for CleanEngine {
    fn execute(
        &mut self,
        _workspace: &Workspace,
        _timeout: Duration,
    ) -> Result<RawExecution, SandboxError> {
        Ok(RawExecution {
            exit_code: 0,
            stdout: "image built\ncontainer ran\nnothing of note\n".to_string(),
            stderr: String::new(),
            merged: "image built\ncontainer ran\nnothing of note\n".to_string(),
            duration_secs: 0.01,
            timed_out: false,
        })
    }
}

#[test]
fn acceptance_9_no_success_without_evidence() {
    let record = parse_cve_record(&read_fixture("cves/cve-2023-25668.json")).unwrap();
    let mut replies = HashMap::new();
    for step in ["s1.1", "s1.2", "s2", "s3.1", "s3.2"] {
        replies.insert(step.to_string(), canned_early_reply(step).unwrap());
    }
    replies.insert("s4".to_string(), valid_script(9));
    replies.insert("s5".to_string(), valid_script(9));
    // s8 falls through to the hollow confirmation.

    let workdir = tempfile::tempdir().unwrap();
    let catalog = PromptCatalog::builtin();
    let mut gateway = Gateway::with_backend(Box::new(HollowConfirmBackend { replies }));
    let mut engine = CleanEngine;
    let mut runner = PipelineRunner::new(
        &catalog,
        &mut gateway,
        &mut engine,
        None,
        None,
        RunOptions::new(workdir.path()),
    );
    let result = runner.run_pipeline(record).unwrap();

    assert_ne!(result.outcome.termination, Termination::Confirmed);
    assert_ne!(
        result.verdict.outcome,
        Outcome::AutoVerified,
        "a bare confirmation over a clean log must never auto-verify"
    );
    assert!(result.verdict.evidence.is_empty());
    // The hollow claim downgrades the run to a human-verification outcome.
    assert_eq!(result.verdict.outcome, Outcome::VerificationAssisted);
    assert!(result.verdict.manual_postcondition_check);
    pass("9 no success without evidence");
}
