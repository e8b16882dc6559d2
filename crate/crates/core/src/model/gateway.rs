//! External model gateway client with record/replay fixtures.
//!
//! Wire format: `POST {base_url}` with JSON `{model, prompt, temperature}` and
//! a bearer token read from the configured environment variable; the reply
//! is `{text}`. Replay fixtures live one-per-file under the fixture
//! directory, named by [`request_hash`].

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{script_from_completion, ModelClient, ModelError, RepairRequest};
use crate::apdl::{render_script, ApdlScript};
use crate::corpus::TaskSpec;

static NETWORK_DENIED: AtomicBool = AtomicBool::new(false);
static LIVE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Network guard for test suites: once denied, live calls fail before any
/// socket is opened.
pub fn deny_network(denied: bool) {
    NETWORK_DENIED.store(denied, Ordering::SeqCst);
}

/// Number of live requests attempted by this process.
pub fn live_call_count() -> u64 {
    LIVE_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatewayMode {
    #[default]
    Live,
    /// Serve recorded fixtures only.
    Replay { dir: PathBuf },
    /// Call live and store each response as a fixture.
    Record { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: String,
    pub model_name: String,
    pub timeout_s: u64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub mode: GatewayMode,
}

impl GatewayConfig {
    pub fn new(base_url: &str, auth_token_env: &str, model_name: &str) -> Self {
        Self {
            base_url: base_url.into(),
            auth_token_env: auth_token_env.into(),
            model_name: model_name.into(),
            timeout_s: 120,
            temperature: 0.0,
            mode: GatewayMode::Live,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(String),
    #[error("environment variable `{0}` with the gateway token is not set")]
    AuthMissing(String),
    #[error("no replay fixture for request {0}")]
    ReplayMiss(String),
    #[error("network access is disabled in this process")]
    NetworkDenied,
    #[error("gateway returned status {0}")]
    Status(u16),
    #[error("malformed gateway response: {0}")]
    BadResponse(String),
    #[error("fixture i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

#[derive(Serialize, Deserialize)]
struct Fixture {
    model: String,
    prompt: String,
    text: String,
}

/// Stable digest over the model name and the full prompt text.
pub fn request_hash(model_name: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_name.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

fn fixture_path(dir: &std::path::Path, hash: &str) -> PathBuf {
    dir.join(format!("{hash}.json"))
}

fn live_complete(request: &GenerationRequest, config: &GatewayConfig) -> Result<String, GatewayError> {
    if NETWORK_DENIED.load(Ordering::SeqCst) {
        return Err(GatewayError::NetworkDenied);
    }
    let token = std::env::var(&config.auth_token_env)
        .map_err(|_| GatewayError::AuthMissing(config.auth_token_env.clone()))?;
    LIVE_CALLS.fetch_add(1, Ordering::SeqCst);
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(config.timeout_s))
        .build()
        .map_err(|e| GatewayError::GatewayUnavailable(e.to_string()))?;
    let resp = client
        .post(&config.base_url)
        .bearer_auth(token)
        .json(&WireRequest {
            model: &config.model_name,
            prompt: &request.prompt,
            temperature: config.temperature,
        })
        .send()
        .map_err(|e| GatewayError::GatewayUnavailable(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(GatewayError::Status(resp.status().as_u16()));
    }
    let body: WireResponse = resp
        .json()
        .map_err(|e| GatewayError::BadResponse(e.to_string()))?;
    Ok(body.text)
}

/// Sends one completion request according to `config.mode`.
pub fn external_complete(request: &GenerationRequest, config: &GatewayConfig) -> Result<String, GatewayError> {
    match &config.mode {
        GatewayMode::Live => live_complete(request, config),
        GatewayMode::Replay { dir } => {
            let hash = request_hash(&config.model_name, &request.prompt);
            let text = match std::fs::read_to_string(fixture_path(dir, &hash)) {
                Ok(t) => t,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(GatewayError::ReplayMiss(hash))
                }
                Err(e) => return Err(e.into()),
            };
            let fixture: Fixture =
                serde_json::from_str(&text).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
            Ok(fixture.text)
        }
        GatewayMode::Record { dir } => {
            let text = live_complete(request, config)?;
            record_fixture(dir, &config.model_name, &request.prompt, &text)?;
            Ok(text)
        }
    }
}

/// Writes a replay fixture for `(model_name, prompt)`.
pub fn record_fixture(
    dir: &std::path::Path,
    model_name: &str,
    prompt: &str,
    text: &str,
) -> Result<PathBuf, GatewayError> {
    std::fs::create_dir_all(dir)?;
    let path = fixture_path(dir, &request_hash(model_name, prompt));
    let fixture = Fixture {
        model: model_name.into(),
        prompt: prompt.into(),
        text: text.into(),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&fixture).expect("fixture serializes"))?;
    Ok(path)
}

pub fn generation_prompt(task: &TaskSpec) -> String {
    format!(
        "Write a complete MAPDL APDL input script for the following task. Use one command per line \
         and reply with the script only.\n\nTask ({} analysis): {}\n",
        task.category, task.prompt
    )
}

pub fn repair_prompt(script: &ApdlScript, error: &str, task: &TaskSpec, enrichment: Option<&str>) -> String {
    let mut p = format!(
        "The following APDL script failed in MAPDL. Read the error, diagnose the failure and reply \
         with the corrected full script only.\n\nTask ({} analysis): {}\n\nScript:\n{}\nError:\n{}\n",
        task.category,
        task.prompt,
        render_script(script),
        error
    );
    if let Some(extra) = enrichment {
        p.push_str("\nAdditional context:\n");
        p.push_str(extra);
        p.push('\n');
    }
    p
}

/// [`ModelClient`] backed by the gateway.
pub struct GatewayModelClient {
    pub config: GatewayConfig,
}

impl GatewayModelClient {
    fn complete(&self, prompt: String) -> Result<ApdlScript, ModelError> {
        let text = external_complete(&GenerationRequest { prompt }, &self.config)
            .map_err(|e| ModelError::Unavailable(e.to_string()))?;
        script_from_completion(&text)
    }
}

impl ModelClient for GatewayModelClient {
    fn name(&self) -> &str {
        &self.config.model_name
    }

    fn generate_initial(&self, task: &TaskSpec, _seed: u64) -> Result<ApdlScript, ModelError> {
        self.complete(generation_prompt(task))
    }

    fn repair(&self, req: &RepairRequest<'_>) -> Result<ApdlScript, ModelError> {
        let error = format!("*** ERROR *** {}", req.sig.message);
        self.complete(repair_prompt(req.script, &error, req.task, req.enrichment))
    }
}
