//! Chat-completion gateway.
//!
//! [`Gateway`] wraps a [`Backend`] with a persistent append-only response
//! cache, bounded retries with exponential backoff, a concurrency limit on
//! outbound calls, and in-flight de-duplication of identical requests.
//! Two backends ship with the crate: [`OpenAiBackend`] speaks the
//! OpenAI-compatible `chat/completions` wire format and [`MockBackend`]
//! answers from a script for tests and offline runs.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MODEL: &str = "gpt-4-1106-preview";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl CompletionRequest {
    /// A request holding one user message, at temperature 0.
    pub fn user(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: 0.0,
            messages: vec![Message {
                role: Role::User,
                content: prompt.into(),
            }],
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be a finite value >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == Some(0) {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Content of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: String,
    pub latency: Duration,
    pub from_cache: bool,
}

/// What a backend returns for one call.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: Option<String>,
    pub finish_reason: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("backend stopped with finish_reason {finish_reason:?}")]
    BackendRefusal {
        finish_reason: String,
        text: Option<String>,
    },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("mock backend has no rule for prompt: {0:.80}")]
    UnscriptedPrompt(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid mock script: {0}")]
    InvalidScript(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport(_) | GatewayError::RateLimited { .. }
        )
    }
}

pub trait Backend: Send + Sync {
    fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError>;
}

/// Hex SHA-256 over the request's canonical JSON form.
///
/// Object keys are sorted and absent optional fields are omitted, so field
/// order never affects the key. Message content is hashed verbatim.
pub fn cache_key(req: &CompletionRequest) -> String {
    let canonical = canonical_json(req);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn canonical_json(req: &CompletionRequest) -> String {
    // serde_json::Value objects are BTreeMap-backed, so keys come out sorted.
    let value = serde_json::to_value(req).expect("request serializes");
    value.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedCompletion {
    pub text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: CompletionRequest,
    pub completion: CachedCompletion,
    pub created_at: String,
}

/// Append-only completion cache, optionally persisted as JSON lines.
pub struct CacheStore {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl CacheStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) a cache file. Unparseable lines are skipped with a
    /// warning; the first entry for a key wins.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let io = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.entry(e.key.clone()).or_insert(e);
                    }
                    Err(err) => tracing::warn!("cache line {} unreadable: {err}", n + 1),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `entry` unless its key is already present. Returns whether it
    /// was written.
    pub fn insert(&self, entry: CacheEntry) -> Result<bool, GatewayError> {
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&entry.key) {
            return Ok(false);
        }
        if let Some(file) = self.writer.lock().unwrap().as_mut() {
            let mut line = serde_json::to_string(&entry)
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        entries.insert(entry.key.clone(), entry);
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: false,
        }
    }

    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`,
    /// scaled by a factor in [0.5, 1.5) when jittered, capped at `max_delay`.
    pub fn backoff(&self, retry: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << (retry - 1).min(16));
        let d = if self.jitter {
            exp.mul_f64(rand::thread_rng().gen_range(0.5..1.5))
        } else {
            exp
        };
        d.min(self.max_delay)
    }
}

struct Limiter {
    max: usize,
    active: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

type CallResult = Result<Completion, GatewayError>;

#[derive(Default)]
struct Inflight {
    result: Mutex<Option<CallResult>>,
    cv: Condvar,
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: CacheStore,
    retry: RetryPolicy,
    limiter: Limiter,
    inflight: Mutex<HashMap<String, Arc<Inflight>>>,
    backend_calls: AtomicUsize,
    sleeper: Sleeper,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, cache: CacheStore) -> Self {
        Self {
            backend,
            cache,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(4),
            inflight: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Maximum number of concurrent backend calls.
    pub fn with_concurrency(mut self, bound: usize) -> Self {
        self.limiter = Limiter::new(bound);
        self
    }

    /// Replaces `std::thread::sleep` for backoff waits.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn concurrency(&self) -> usize {
        self.limiter.max
    }

    pub fn cache(&self) -> &CacheStore {
        &self.cache
    }

    /// Number of calls that reached the backend, retries included.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, req: &CompletionRequest) -> CallResult {
        self.complete_inner(req, true)
    }

    /// Skips the cache lookup (the result is still stored if new).
    pub fn complete_fresh(&self, req: &CompletionRequest) -> CallResult {
        self.complete_inner(req, false)
    }

    fn complete_inner(&self, req: &CompletionRequest, use_cache: bool) -> CallResult {
        req.validate()?;
        let key = cache_key(req);
        if use_cache {
            if let Some(hit) = self.cache.get(&key) {
                return Ok(from_entry(&hit));
            }
        }

        let (slot, leader) = {
            let mut map = self.inflight.lock().unwrap();
            match map.get(&key) {
                Some(slot) => (slot.clone(), false),
                None => {
                    let slot = Arc::new(Inflight::default());
                    map.insert(key.clone(), slot.clone());
                    (slot, true)
                }
            }
        };
        if !leader {
            let mut guard = slot.result.lock().unwrap();
            while guard.is_none() {
                guard = slot.cv.wait(guard).unwrap();
            }
            return guard.clone().expect("published").map(|mut c| {
                c.from_cache = true;
                c
            });
        }

        let result = match self.cache.get(&key).filter(|_| use_cache) {
            Some(hit) => Ok(from_entry(&hit)),
            None => self.call_with_retries(req).and_then(|c| {
                self.store(&key, req, &c)?;
                Ok(c)
            }),
        };
        *slot.result.lock().unwrap() = Some(result.clone());
        slot.cv.notify_all();
        self.inflight.lock().unwrap().remove(&key);
        result
    }

    fn store(&self, key: &str, req: &CompletionRequest, c: &Completion) -> Result<(), GatewayError> {
        // Blank completions are not cached so a retry reaches the backend.
        if c.text.trim().is_empty() {
            return Ok(());
        }
        self.cache.insert(CacheEntry {
            key: key.to_string(),
            request: req.clone(),
            completion: CachedCompletion {
                text: c.text.clone(),
                finish_reason: c.finish_reason.clone(),
                latency_ms: c.latency.as_millis() as u64,
            },
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        })?;
        Ok(())
    }

    fn call_with_retries(&self, req: &CompletionRequest) -> CallResult {
        let mut attempt = 1;
        loop {
            let started = Instant::now();
            let outcome = {
                let _permit = self.limiter.acquire();
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                self.backend.send(req)
            };
            let err = match outcome {
                Ok(reply) => return finish(reply, started.elapsed()),
                Err(e) => e,
            };
            if !err.is_retryable() || attempt >= self.retry.max_attempts {
                return Err(err);
            }
            let wait = match &err {
                GatewayError::RateLimited {
                    retry_after: Some(d),
                } => *d,
                _ => self.retry.backoff(attempt),
            };
            tracing::debug!(attempt, ?wait, "retrying after {err}");
            (self.sleeper)(wait);
            attempt += 1;
        }
    }
}

fn finish(reply: BackendReply, latency: Duration) -> CallResult {
    if reply.finish_reason != "stop" {
        return Err(GatewayError::BackendRefusal {
            finish_reason: reply.finish_reason,
            text: reply.text,
        });
    }
    let text = reply
        .text
        .ok_or_else(|| GatewayError::MalformedResponse("stop without content".into()))?;
    Ok(Completion {
        text,
        finish_reason: reply.finish_reason,
        latency,
        from_cache: false,
    })
}

fn from_entry(e: &CacheEntry) -> Completion {
    Completion {
        text: e.completion.text.clone(),
        finish_reason: e.completion.finish_reason.clone(),
        latency: Duration::ZERO,
        from_cache: true,
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend

pub struct OpenAiBackend {
    url: String,
    api_key: String,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    /// `endpoint` is either a base URL (`https://host/v1`) or the full
    /// `…/chat/completions` URL.
    pub fn new(endpoint: &str, api_key: impl Into<String>, timeout: Duration) -> Self {
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/chat/completions")
        };
        Self {
            url,
            api_key: api_key.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

/// JSON body for `POST /chat/completions`.
pub fn request_body(req: &CompletionRequest) -> Value {
    let mut body = json!({
        "model": req.model,
        "temperature": req.temperature,
        "messages": req.messages,
    });
    if let Some(n) = req.max_tokens {
        body["max_tokens"] = json!(n);
    }
    body
}

/// Reads `choices[0].message.content` and `choices[0].finish_reason`.
pub fn parse_response_body(body: &Value) -> Result<BackendReply, GatewayError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .map(str::to_string);
    let finish_reason = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .unwrap_or("stop")
        .to_string();
    Ok(BackendReply {
        text,
        finish_reason,
    })
}

/// `Retry-After` in (possibly fractional) seconds.
fn parse_retry_after(v: Option<&str>) -> Option<Duration> {
    v.and_then(|s| s.trim().parse::<f64>().ok())
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}

impl Backend for OpenAiBackend {
    fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let resp = self
            .agent
            .post(&self.url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request_body(req));
        match resp {
            Ok(r) => {
                let body: Value = r
                    .into_json()
                    .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
                parse_response_body(&body)
            }
            Err(ureq::Error::Status(status, r)) => {
                let retry_after = parse_retry_after(r.header("retry-after"));
                let body = r.into_string().unwrap_or_default();
                Err(match status {
                    401 | 403 => GatewayError::Auth(body),
                    429 => GatewayError::RateLimited { retry_after },
                    408 | 500..=599 => GatewayError::Transport(format!("HTTP {status}: {body}")),
                    _ => GatewayError::Http { status, body },
                })
            }
            Err(ureq::Error::Transport(t)) => Err(GatewayError::Transport(t.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted mock backend

#[derive(Debug, Clone, PartialEq)]
pub enum Matcher {
    Contains(String),
    Exact(String),
    Any,
}

impl Matcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Contains(s) => prompt.contains(s.as_str()),
            Matcher::Exact(s) => prompt == s,
            Matcher::Any => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFault {
    Transport,
    RateLimited,
    Auth,
    Refusal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Text(String),
    /// Picks one option by hashing the prompt, so a fixed prompt always gets
    /// the same answer.
    Pick(Vec<String>),
    Fail(MockFault),
}

impl MockReply {
    fn resolve(&self, prompt: &str) -> Result<BackendReply, GatewayError> {
        let stop = |text: String| BackendReply {
            text: Some(text),
            finish_reason: "stop".into(),
        };
        match self {
            MockReply::Text(t) => Ok(stop(t.clone())),
            MockReply::Pick(options) => {
                let digest = Sha256::digest(prompt.as_bytes());
                let n = u64::from_be_bytes(digest[..8].try_into().unwrap());
                Ok(stop(options[(n % options.len() as u64) as usize].clone()))
            }
            MockReply::Fail(MockFault::Transport) => {
                Err(GatewayError::Transport("scripted transport failure".into()))
            }
            MockReply::Fail(MockFault::RateLimited) => Err(GatewayError::RateLimited {
                retry_after: Some(Duration::ZERO),
            }),
            MockReply::Fail(MockFault::Auth) => {
                Err(GatewayError::Auth("scripted credential rejection".into()))
            }
            MockReply::Fail(MockFault::Refusal) => Ok(BackendReply {
                text: None,
                finish_reason: "content_filter".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockRule {
    pub matcher: Matcher,
    /// Served in order; the last reply repeats once the others are used up.
    pub replies: Vec<MockReply>,
}

impl MockRule {
    pub fn contains(needle: &str, reply: &str) -> Self {
        Self {
            matcher: Matcher::Contains(needle.into()),
            replies: vec![MockReply::Text(reply.into())],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    /// Reply for prompts no rule matches (ignored in strict mode).
    pub default: Option<String>,
    pub strict: bool,
}

/// File form of a [`MockScript`].
///
/// ```json
/// {"strict": true,
///  "rules": [{"contains": "summarize the intent", "reply": "Person1 wants X."},
///            {"contains": "Example 1:", "replies": [{"fault": "transport"}, "No"]},
///            {"any": true, "pick": ["Yes", "No"]}]}
/// ```
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    rules: Vec<RuleFile>,
    default: Option<String>,
    #[serde(default)]
    strict: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    contains: Option<String>,
    exact: Option<String>,
    #[serde(default)]
    any: bool,
    reply: Option<String>,
    replies: Option<Vec<ReplyFile>>,
    pick: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ReplyFile {
    Text(String),
    Fault { fault: MockFault },
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let file: ScriptFile =
            serde_json::from_str(text).map_err(|e| GatewayError::InvalidScript(e.to_string()))?;
        let rules = file
            .rules
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let bad = |m: &str| GatewayError::InvalidScript(format!("rule {i}: {m}"));
                let matcher = match (r.contains, r.exact, r.any) {
                    (Some(c), None, false) => Matcher::Contains(c),
                    (None, Some(e), false) => Matcher::Exact(e),
                    (None, None, true) => Matcher::Any,
                    _ => return Err(bad("exactly one of contains/exact/any is required")),
                };
                let replies = match (r.reply, r.replies, r.pick) {
                    (Some(t), None, None) => vec![MockReply::Text(t)],
                    (None, Some(list), None) if !list.is_empty() => list
                        .into_iter()
                        .map(|rf| match rf {
                            ReplyFile::Text(t) => MockReply::Text(t),
                            ReplyFile::Fault { fault } => MockReply::Fail(fault),
                        })
                        .collect(),
                    (None, None, Some(opts)) if !opts.is_empty() => vec![MockReply::Pick(opts)],
                    _ => return Err(bad("exactly one non-empty reply/replies/pick is required")),
                };
                Ok(MockRule { matcher, replies })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            rules,
            default: file.default,
            strict: file.strict,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidScript(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Deterministic scripted backend that records every request it receives.
pub struct MockBackend {
    rules: Vec<MockRule>,
    cursors: Mutex<Vec<usize>>,
    default: Option<String>,
    strict: bool,
    log: Mutex<Vec<CompletionRequest>>,
}

/// Builds a mock backend from a script. Rules are tried in order against the
/// last user message; the first match answers.
pub fn mock_backend(script: MockScript) -> Result<MockBackend, GatewayError> {
    if script.rules.is_empty() && script.default.is_none() {
        return Err(GatewayError::InvalidScript("script is empty".into()));
    }
    if script.rules.iter().any(|r| r.replies.is_empty()) {
        return Err(GatewayError::InvalidScript("rule without replies".into()));
    }
    Ok(MockBackend {
        cursors: Mutex::new(vec![0; script.rules.len()]),
        rules: script.rules,
        default: script.default,
        strict: script.strict,
        log: Mutex::new(Vec::new()),
    })
}

impl MockBackend {
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }
}

impl Backend for MockBackend {
    fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        self.log.lock().unwrap().push(req.clone());
        let prompt = req.prompt();
        if let Some(i) = self.rules.iter().position(|r| r.matcher.matches(prompt)) {
            let reply = {
                let mut cursors = self.cursors.lock().unwrap();
                let replies = &self.rules[i].replies;
                let reply = &replies[cursors[i].min(replies.len() - 1)];
                cursors[i] += 1;
                reply.clone()
            };
            return reply.resolve(prompt);
        }
        match (&self.default, self.strict) {
            (Some(text), false) => MockReply::Text(text.clone()).resolve(prompt),
            _ => Err(GatewayError::UnscriptedPrompt(prompt.to_string())),
        }
    }
}
