//! Configuration resolution: flags override env vars, env vars override the
//! config file, the config file overrides shipped defaults.
//!
//! Env vars use the `CVEPIPE_` prefix (`CVEPIPE_BACKEND`, `CVEPIPE_ENGINE`,
//! ...). The config file key set equals the flag set.

use std::path::PathBuf;

use serde::Deserialize;

use crate::BackendFlags;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub transcript: Option<PathBuf>,
    pub engine: Option<String>,
    pub engine_script: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    pub max_iterations: Option<u32>,
    pub attempts: Option<u32>,
    pub timeout: Option<u64>,
    pub distill_budget: Option<usize>,
    pub persona_file: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    pub cwe_fixtures: Option<PathBuf>,
    pub api_key_env: Option<String>,
}

#[derive(Debug)]
pub struct Settings {
    pub backend: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub transcript: Option<PathBuf>,
    pub engine: String,
    pub engine_script: Option<PathBuf>,
    pub workdir: PathBuf,
    pub max_iterations: u32,
    pub attempts: u32,
    pub timeout_secs: u64,
    pub distill_budget: usize,
    pub persona_file: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    pub cwe_fixtures: Option<PathBuf>,
    pub api_key_env: String,
    pub external_blocker: bool,
}

fn env_string(name: &str) -> Option<String> {
    std::env::var(format!("CVEPIPE_{name}")).ok().filter(|s| !s.is_empty())
}

fn env_path(name: &str) -> Option<PathBuf> {
    env_string(name).map(PathBuf::from)
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Option<T> {
    env_string(name).and_then(|s| s.parse().ok())
}

impl Settings {
    pub fn resolve(
        flags: &BackendFlags,
        config_path: Option<PathBuf>,
    ) -> Result<Settings, Box<dyn std::error::Error>> {
        let file: FileConfig = match config_path {
            Some(path) => toml::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| format!("config file {}: {e}", path.display()))?,
            None => FileConfig::default(),
        };

        let pick = |flag: &Option<String>, env: &str, file_value: &Option<String>| {
            flag.clone()
                .or_else(|| env_string(env))
                .or_else(|| file_value.clone())
        };
        let pick_path = |flag: &Option<PathBuf>, env: &str, file_value: &Option<PathBuf>| {
            flag.clone()
                .or_else(|| env_path(env))
                .or_else(|| file_value.clone())
        };

        Ok(Settings {
            backend: pick(&flags.backend, "BACKEND", &file.backend)
                .unwrap_or_else(|| "live".to_string()),
            endpoint: pick(&flags.endpoint, "ENDPOINT", &file.endpoint),
            model: pick(&flags.model, "MODEL", &file.model),
            transcript: pick_path(&flags.transcript, "TRANSCRIPT", &file.transcript),
            engine: pick(&flags.engine, "ENGINE", &file.engine)
                .unwrap_or_else(|| "real".to_string()),
            engine_script: pick_path(&flags.engine_script, "ENGINE_SCRIPT", &file.engine_script),
            workdir: pick_path(&flags.workdir, "WORKDIR", &file.workdir)
                .unwrap_or_else(|| PathBuf::from(".")),
            max_iterations: flags
                .max_iterations
                .or_else(|| env_parse("MAX_ITERATIONS"))
                .or(file.max_iterations)
                .unwrap_or(10),
            attempts: flags
                .attempts
                .or_else(|| env_parse("ATTEMPTS"))
                .or(file.attempts)
                .unwrap_or(3),
            timeout_secs: flags
                .timeout
                .or_else(|| env_parse("TIMEOUT"))
                .or(file.timeout)
                .unwrap_or(90 * 60),
            distill_budget: flags
                .distill_budget
                .or_else(|| env_parse("DISTILL_BUDGET"))
                .or(file.distill_budget)
                .unwrap_or(cvepipe_core::sandbox_runner::DEFAULT_DISTILL_BUDGET),
            persona_file: pick_path(&flags.persona_file, "PERSONA_FILE", &file.persona_file),
            ledger: pick_path(&flags.ledger, "LEDGER", &file.ledger),
            cwe_fixtures: pick_path(&flags.cwe_fixtures, "CWE_FIXTURES", &file.cwe_fixtures),
            api_key_env: pick(&flags.api_key_env, "API_KEY_ENV", &file.api_key_env)
                .unwrap_or_else(|| "CVEPIPE_API_KEY".to_string()),
            external_blocker: flags.external_blocker,
        })
    }
}
