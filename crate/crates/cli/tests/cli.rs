//! End-to-end checks of the `cvepipe` binary against the shipped fixtures.

use std::path::PathBuf;
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn cvepipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvepipe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn reproduce_replay_exits_zero_with_auto_verified() {
    let work = tempfile::tempdir().unwrap();
    let output = cvepipe(&[
        "reproduce",
        fixtures().join("cves/cve-2023-25668.json").to_str().unwrap(),
        "--backend",
        "scripted",
        "--transcript",
        fixtures().join("transcripts/cve-2023-25668").to_str().unwrap(),
        "--engine",
        "fake",
        "--engine-script",
        fixtures().join("engine/cve-2023-25668.json").to_str().unwrap(),
        "--cwe-fixtures",
        fixtures().join("cwe").to_str().unwrap(),
        "--workdir",
        work.path().to_str().unwrap(),
        "--ledger",
        work.path().join("ledger").to_str().unwrap(),
    ]);
    let stdout = stdout_of(&output);
    assert_eq!(output.status.code(), Some(0), "stdout: {stdout}");
    assert!(stdout.contains("termination: confirmed"));
    assert!(stdout.contains("verdict: auto_verified"));
    assert!(stdout.contains("containers: 1"));
    assert!(stdout.contains("image: cve-2023-25668"));
}

#[test]
fn reproduce_without_a_cve_path_is_a_usage_error() {
    let output = cvepipe(&["reproduce"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn stats_prints_published_fractions() {
    let output = cvepipe(&[
        "stats",
        "--ledger",
        fixtures().join("ledger/table1.json").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0));
    let stdout = stdout_of(&output);
    assert!(stdout.contains("success_rate: 69.6%"), "{stdout}");
    assert!(stdout.contains("poc_share: 67.6%"), "{stdout}");
    assert!(stdout.contains("multi_container_fraction: 28.2%"), "{stdout}");
    assert!(stdout.contains("mean_iterations_with_poc: 3.94"), "{stdout}");
    assert!(stdout.contains("mean_iterations_without_poc: 4.83"), "{stdout}");

    let json_output = cvepipe(&[
        "stats",
        "--ledger",
        fixtures().join("ledger/table1.json").to_str().unwrap(),
        "--json",
    ]);
    let value: serde_json::Value = serde_json::from_str(&stdout_of(&json_output)).unwrap();
    assert_eq!(value["total_runs"], 102);
    assert_eq!(value["successes"], 71);
}

#[test]
fn lint_env_reports_findings_as_json_lines() {
    let output = cvepipe(&[
        "lint-env",
        fixtures().join("lint/c9").to_str().unwrap(),
        "--language",
        "Go",
        "--postcondition",
        "crash",
    ]);
    assert_eq!(output.status.code(), Some(1), "errors present");
    let stdout = stdout_of(&output);
    let first: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(first["rule_id"], "RULE_C9");
    assert_eq!(first["severity"], "error");

    let clean = cvepipe(&[
        "lint-env",
        fixtures().join("lint/clean-cve-2023-25668").to_str().unwrap(),
        "--language",
        "Python",
        "--postcondition",
        "crash or remote code execution",
    ]);
    assert_eq!(clean.status.code(), Some(0), "warnings only");
}

#[test]
fn export_bundle_contains_the_recorded_driver_script() {
    let work = tempfile::tempdir().unwrap();
    let reproduce = cvepipe(&[
        "reproduce",
        fixtures().join("cves/cve-2023-25668.json").to_str().unwrap(),
        "--backend",
        "scripted",
        "--transcript",
        fixtures().join("transcripts/cve-2023-25668").to_str().unwrap(),
        "--engine",
        "fake",
        "--engine-script",
        fixtures().join("engine/cve-2023-25668.json").to_str().unwrap(),
        "--workdir",
        work.path().to_str().unwrap(),
        "--ledger",
        work.path().join("ledger").to_str().unwrap(),
    ]);
    assert_eq!(reproduce.status.code(), Some(0));

    let dest = work.path().join("export");
    let export = cvepipe(&[
        "export",
        "CVE-2023-25668",
        "--dest",
        dest.to_str().unwrap(),
        "--ledger",
        work.path().join("ledger").to_str().unwrap(),
        "--workdir",
        work.path().to_str().unwrap(),
    ]);
    assert_eq!(export.status.code(), Some(0));
    assert!(dest.join("manifest.json").exists());

    let exported_script =
        std::fs::read_to_string(dest.join("files/attempt-1/iter-0/exploit.sh")).unwrap();
    let recorded_reply =
        std::fs::read_to_string(fixtures().join("transcripts/cve-2023-25668/s4_1_0.txt")).unwrap();
    assert_eq!(exported_script, recorded_reply);
}

#[test]
fn step_command_walks_the_early_stages() {
    let work = tempfile::tempdir().unwrap();
    let base: Vec<String> = vec![
        "--backend".into(),
        "scripted".into(),
        "--transcript".into(),
        fixtures()
            .join("transcripts/cve-2023-25668")
            .to_str()
            .unwrap()
            .into(),
        "--engine".into(),
        "fake".into(),
        "--engine-script".into(),
        fixtures()
            .join("engine/cve-2023-25668.json")
            .to_str()
            .unwrap()
            .into(),
        "--workdir".into(),
        work.path().to_str().unwrap().into(),
    ];
    let cve = fixtures().join("cves/cve-2023-25668.json");
    for step in ["s1.1", "s1.2", "s2", "s3.1", "s3.2", "s4"] {
        let mut args: Vec<&str> = vec!["step", step, cve.to_str().unwrap()];
        args.extend(base.iter().map(String::as_str));
        let output = cvepipe(&args);
        assert_eq!(
            output.status.code(),
            Some(0),
            "step {step}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    let steps_dir = work.path().join("cve-2023-25668/steps");
    for artifact in [
        "extracted.json",
        "language.json",
        "profile.json",
        "plan.json",
        "environment.json",
        "bundle.json",
        "exploit.sh",
    ] {
        assert!(steps_dir.join(artifact).exists(), "{artifact} missing");
    }

    let unknown = cvepipe(&["step", "s9", cve.to_str().unwrap()]);
    assert_eq!(unknown.status.code(), Some(2));
}
