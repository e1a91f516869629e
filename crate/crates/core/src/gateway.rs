//! Model gateway: the only place the pipeline talks to language models.
//!
//! The filter and the reasoner see nothing but [`ModelBackend`]. Two kinds of
//! backend ship here: deterministic mocks for tests and replay, and an
//! OpenAI-style chat-completion client for real deployments.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleMessage {
    pub role: String,
    pub text: String,
    /// Page image references (paths or URLs); resolved by the backend.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub messages: Vec<RoleMessage>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub model_tag: String,
}

impl PromptRequest {
    pub fn user(text: String, temperature: f64, max_new_tokens: u32, model_tag: &str) -> Self {
        Self {
            messages: vec![RoleMessage {
                role: "user".into(),
                text,
                images: Vec::new(),
            }],
            temperature,
            max_new_tokens,
            model_tag: model_tag.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidInput("temperature must be ≥ 0".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidInput("max_new_tokens must be ≥ 1".into()));
        }
        Ok(())
    }

    /// All message text joined with newlines.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Stable SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A language-model endpoint.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, req: &PromptRequest) -> Result<String>;

    fn accepts_images(&self) -> bool {
        false
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Arc<B> {
    fn complete(&self, req: &PromptRequest) -> Result<String> {
        (**self).complete(req)
    }

    fn accepts_images(&self) -> bool {
        (**self).accepts_images()
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn complete(&self, req: &PromptRequest) -> Result<String> {
        (**self).complete(req)
    }

    fn accepts_images(&self) -> bool {
        (**self).accepts_images()
    }
}

/// One recorded exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub request: PromptRequest,
    pub response: String,
}

/// Shared, append-only request/response log.
#[derive(Clone, Debug, Default)]
pub struct Transcript(Arc<Mutex<Vec<TranscriptEntry>>>);

impl Transcript {
    pub fn record(&self, request: &PromptRequest, response: &str) {
        self.0.lock().expect("transcript lock").push(TranscriptEntry {
            digest: request.digest(),
            request: request.clone(),
            response: response.to_string(),
        });
    }

    /// Entries in arrival order.
    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.0.lock().expect("transcript lock").clone()
    }

    /// Entries sorted by digest, independent of concurrent arrival order.
    pub fn canonical(&self) -> Vec<TranscriptEntry> {
        let mut e = self.entries();
        e.sort_by(|a, b| a.digest.cmp(&b.digest).then_with(|| a.response.cmp(&b.response)));
        e
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("transcript lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_jsonl(entries: &[TranscriptEntry]) -> String {
        entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

/// How a script entry selects requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Request text contains the string.
    Substring(String),
    /// Request text contains every string.
    AllOf(Vec<String>),
    /// Exact request digest.
    Digest(String),
}

impl Matcher {
    fn matches(&self, text: &str, digest: &str) -> bool {
        match self {
            Matcher::Substring(s) => text.contains(s.as_str()),
            Matcher::AllOf(all) => all.iter().all(|s| text.contains(s.as_str())),
            Matcher::Digest(d) => d == digest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub response: String,
}

/// Scripted mock: first matching entry wins, otherwise the default response.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Vec<ScriptEntry>,
    default_response: String,
    accepts_images: bool,
    transcript: Transcript,
}

impl ScriptedBackend {
    pub fn new(script: Vec<ScriptEntry>, default_response: impl Into<String>) -> Self {
        Self {
            script,
            default_response: default_response.into(),
            accepts_images: false,
            transcript: Transcript::default(),
        }
    }

    /// Convenience constructor from `(substring, response)` pairs.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, S)>, default: &str) -> Self {
        Self::new(
            pairs
                .into_iter()
                .map(|(m, r)| ScriptEntry {
                    matcher: Matcher::Substring(m.into()),
                    response: r.into(),
                })
                .collect(),
            default,
        )
    }

    pub fn with_images(mut self, yes: bool) -> Self {
        self.accepts_images = yes;
        self
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String> {
        let text = req.text();
        let digest = req.digest();
        let response = self
            .script
            .iter()
            .find(|e| e.matcher.matches(&text, &digest))
            .map_or_else(|| self.default_response.clone(), |e| e.response.clone());
        self.transcript.record(req, &response);
        Ok(response)
    }

    fn accepts_images(&self) -> bool {
        self.accepts_images
    }
}

/// Sleeps for a pseudo-random duration derived from the request digest,
/// shuffling completion order of concurrent calls reproducibly.
#[derive(Clone, Copy, Debug)]
pub struct Jitter {
    pub seed: u64,
    pub max_micros: u64,
}

impl Jitter {
    fn pause(&self, digest: &str) {
        if self.max_micros == 0 {
            return;
        }
        let mut h = DefaultHasher::new();
        (self.seed, digest).hash(&mut h);
        std::thread::sleep(Duration::from_micros(h.finish() % self.max_micros));
    }
}

/// Filter mock that ranks numbered summaries by the `relevance-key=<x>` they carry.
#[derive(Debug, Default)]
pub struct KeyRankerBackend {
    jitter: Option<Jitter>,
    transcript: Transcript,
}

impl KeyRankerBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_jitter(mut self, jitter: Jitter) -> Self {
        self.jitter = Some(jitter);
        self
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }
}

fn key_patterns() -> &'static (Regex, Regex, Regex) {
    static P: std::sync::OnceLock<(Regex, Regex, Regex)> = std::sync::OnceLock::new();
    P.get_or_init(|| {
        (
            Regex::new(r"(?m)^\[(\d+)\] (.*)$").unwrap(),
            Regex::new(r"relevance-key=(-?[0-9]+(?:\.[0-9]+)?)").unwrap(),
            Regex::new(r"select the (\d+) most relevant pages").unwrap(),
        )
    })
}

impl ModelBackend for KeyRankerBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String> {
        let text = req.text();
        if let Some(j) = self.jitter {
            j.pause(&req.digest());
        }
        let (line, key, target) = key_patterns();
        let target_k: usize = target
            .captures(&text)
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(usize::MAX);
        let mut items: Vec<(usize, f64)> = line
            .captures_iter(&text)
            .filter_map(|c| {
                let idx: usize = c[1].parse().ok()?;
                let k: f64 = key.captures(&c[2])?[1].parse().ok()?;
                Some((idx, k))
            })
            .collect();
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        items.truncate(target_k);
        let list: Vec<String> = items.iter().map(|(i, _)| i.to_string()).collect();
        let response = format!("<selected_pages>{}</selected_pages>", list.join(", "));
        self.transcript.record(req, &response);
        Ok(response)
    }
}

/// Reasoner mock keyed to planted ground truth.
///
/// Questions carry a tag such as `[q0007]`; planted page summaries carry
/// `evidence(q0007)=B`. When the evidence for the prompt's question is among
/// the shown summaries the mock answers with it, otherwise it asks for a
/// refined query (or gives up without tags on the final iteration).
#[derive(Debug, Default)]
pub struct EvidenceOracleBackend {
    transcript: Transcript,
}

impl EvidenceOracleBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }
}

impl ModelBackend for EvidenceOracleBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String> {
        static TAG: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
        let tag = TAG.get_or_init(|| Regex::new(r"Question: [^\n]*?\[(q[0-9A-Za-z_-]+)\]").unwrap());
        let text = req.text();
        let response = match tag.captures(&text) {
            Some(c) => {
                let id = &c[1];
                let ev = Regex::new(&format!(r"evidence\({}\)=([A-Za-z]+)", regex::escape(id)))
                    .expect("escaped pattern");
                match ev.captures(&text) {
                    Some(e) => format!("<answer>{}</answer> supported by the retrieved page.", &e[1]),
                    None if text.contains(crate::reasoner::FORCE_DIRECTIVE) => "No supporting evidence found.".to_string(),
                    None => format!(
                        "<query_update>{id} supporting evidence</query_update><notes>no evidence for {id} yet</notes>"
                    ),
                }
            }
            None => "No question tag found.".to_string(),
        };
        self.transcript.record(req, &response);
        Ok(response)
    }
}

/// Connection settings for [`HttpBackend`].
#[derive(Clone, Debug)]
pub struct HttpConfig {
    pub endpoint_url: String,
    pub auth_token: Option<String>,
    pub model_tag: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
    pub accepts_images: bool,
}

impl HttpConfig {
    pub fn new(endpoint_url: impl Into<String>, model_tag: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            auth_token: None,
            model_tag: model_tag.into(),
            timeout: Duration::from_secs(120),
            retries: 2,
            backoff: Duration::from_millis(250),
            accepts_images: false,
        }
    }
}

/// Chat-completion client (OpenAI-style `messages` payload).
pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint_url", &self.cfg.endpoint_url)
            .field("model_tag", &self.cfg.model_tag)
            .field("has_auth", &self.cfg.auth_token.is_some())
            .finish()
    }
}

const MAX_ERROR_BODY: usize = 512;

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        let url = cfg.endpoint_url.as_str();
        if !(url.starts_with("http://") || url.starts_with("https://")) || url.len() <= 8 {
            return Err(Error::InvalidInput(format!("malformed endpoint URL: {url}")));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent })
    }

    /// Outbound JSON body for a request.
    pub fn payload(&self, req: &PromptRequest) -> serde_json::Value {
        let model = if req.model_tag.is_empty() {
            &self.cfg.model_tag
        } else {
            &req.model_tag
        };
        let messages: Vec<serde_json::Value> = req
            .messages
            .iter()
            .map(|m| {
                if self.cfg.accepts_images && !m.images.is_empty() {
                    let mut parts = vec![serde_json::json!({"type": "text", "text": m.text})];
                    parts.extend(m.images.iter().map(|r| {
                        serde_json::json!({"type": "image_url", "image_url": {"url": image_url(r)}})
                    }));
                    serde_json::json!({"role": m.role, "content": parts})
                } else {
                    serde_json::json!({"role": m.role, "content": m.text})
                }
            })
            .collect();
        serde_json::json!({
            "model": model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, (bool, Error)> {
        let mut call = self.agent.post(&self.cfg.endpoint_url);
        if let Some(token) = &self.cfg.auth_token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call
            .send_json(body)
            .map_err(|e| (true, Error::Transport(e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, Error::Transport(e.to_string())))?;
        if !(200..300).contains(&status) {
            let retryable = status == 429 || status >= 500;
            let snippet: String = text.chars().take(MAX_ERROR_BODY).collect();
            return Err((retryable, Error::Transport(format!("HTTP {status}: {snippet}"))));
        }
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| (false, Error::Transport(format!("bad JSON: {e}"))))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| (false, Error::Transport("response has no choices[0].message.content".into())))
    }
}

fn image_url(reference: &str) -> String {
    if reference.starts_with("http://")
        || reference.starts_with("https://")
        || reference.starts_with("data:")
    {
        return reference.to_string();
    }
    match std::fs::read(reference) {
        Ok(bytes) => {
            let mime = if reference.ends_with(".jpg") || reference.ends_with(".jpeg") {
                "image/jpeg"
            } else {
                "image/png"
            };
            format!(
                "data:{mime};base64,{}",
                base64::engine::general_purpose::STANDARD.encode(bytes)
            )
        }
        Err(_) => reference.to_string(),
    }
}

/// Backoff before retry `attempt` (1-based): exponential with ±50% jitter.
pub fn backoff_delay(base: Duration, attempt: u32, salt: &str) -> Duration {
    let mut h = DefaultHasher::new();
    (salt, attempt).hash(&mut h);
    let jitter = 0.5 + (h.finish() % 1000) as f64 / 1000.0;
    base.mul_f64(2f64.powi(attempt as i32 - 1) * jitter)
}

impl ModelBackend for HttpBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String> {
        req.validate()?;
        let body = self.payload(req);
        let digest = req.digest();
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((retryable, err)) => {
                    if !retryable || attempt >= self.cfg.retries {
                        return Err(err);
                    }
                    attempt += 1;
                    log::warn!("model call failed ({err}); retry {attempt}/{}", self.cfg.retries);
                    std::thread::sleep(backoff_delay(self.cfg.backoff, attempt, &digest));
                }
            }
        }
    }

    fn accepts_images(&self) -> bool {
        self.cfg.accepts_images
    }
}
