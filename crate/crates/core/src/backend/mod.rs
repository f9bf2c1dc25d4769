//! Model backends for the four roles the pipeline consumes: text chat,
//! vision chat, embedding and entailment.
//!
//! A [`Client`] wraps a [`Transport`] (the remote chat-completions client or
//! the deterministic [`MockBackend`]) and adds what every call needs:
//! pre-flight token budgeting, bounded retries with exponential backoff, an
//! in-flight cap, call counting, and a JSONL transcript.

mod http;
mod mock;
mod structured;

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use http::HttpBackend;
pub use mock::{
    entail_by_tokens, hashed_embedding, normalize_tokens, MockBackend, MockRule, MockRuleSet,
    MOCK_EMBED_DIM,
};
pub use structured::extract_first_json;

/// Visual tokens charged per frame reference in budget estimates.
pub const TOKENS_PER_FRAME: u64 = 256;
pub const DEFAULT_CONTEXT_LIMIT: u64 = 32_768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TextChat,
    VisionChat,
    Embed,
    Entail,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::TextChat, Role::VisionChat, Role::Embed, Role::Entail];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::TextChat => "text_chat",
            Role::VisionChat => "vision_chat",
            Role::Embed => "embed",
            Role::Entail => "entail",
        }
    }

    fn is_chat(self) -> bool {
        matches!(self, Role::TextChat | Role::VisionChat)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub role: Role,
    /// Base URL of an OpenAI-compatible server (e.g. `http://host:8000/v1`), or `mock`.
    pub endpoint: String,
    pub model_name: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub context_limit_tokens: u64,
    pub request_timeout_s: f64,
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub retry_base_delay_ms: u64,
    pub max_in_flight: usize,
}

impl BackendProfile {
    pub fn new(role: Role, endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            role,
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            api_key: None,
            context_limit_tokens: DEFAULT_CONTEXT_LIMIT,
            request_timeout_s: 120.0,
            max_retries: 3,
            retry_base_delay_ms: 500,
            max_in_flight: 8,
        }
    }

    pub fn mock(role: Role) -> Self {
        Self::new(role, "mock", "mock")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Frame { image_path: String, frame_index: u64, t: f64 },
}

impl ContentPart {
    pub fn text(s: impl Into<String>) -> Self {
        ContentPart::Text { text: s.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            max_output_tokens: 2048,
            temperature: 0.0,
            seed: Some(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_content: Vec<ContentPart>,
    pub decoding: Decoding,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_content: vec![ContentPart::text(user_text)],
            decoding: Decoding::default(),
        }
    }

    /// System prompt and text parts joined by newlines; what mock rules match against.
    pub fn text(&self) -> String {
        let mut s = self.system_prompt.clone();
        for p in &self.user_content {
            if let ContentPart::Text { text } = p {
                if !s.is_empty() {
                    s.push('\n');
                }
                s.push_str(text);
            }
        }
        s
    }

    pub fn frame_count(&self) -> u64 {
        self.user_content
            .iter()
            .filter(|p| matches!(p, ContentPart::Frame { .. }))
            .count() as u64
    }

    pub fn text_token_estimate(&self) -> u64 {
        estimate_text_tokens(&self.text())
    }

    pub fn token_estimate(&self) -> u64 {
        self.text_token_estimate() + TOKENS_PER_FRAME * self.frame_count()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Characters / 4, rounded up.
pub fn estimate_text_tokens(s: &str) -> u64 {
    (s.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entailment {
    pub entailed: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    /// Connection failure, timeout, 429 or 5xx; worth retrying.
    #[error("transient transport failure: {0}")]
    Transient(String),

    #[error("{role} backend gave up after {attempts} attempt(s): {last}")]
    TransportExhausted {
        role: Role,
        attempts: u32,
        last: String,
    },

    #[error("remote error {status}: {body}")]
    Remote { status: u16, body: String },

    #[error("request needs ~{estimate} tokens, over the {limit}-token context limit")]
    BudgetExceeded { estimate: u64, limit: u64 },

    #[error("could not parse structured output ({error}); first response: {first:?}; repair response: {second:?}")]
    StructuredOutput {
        error: String,
        first: String,
        second: String,
    },

    #[error("{0}")]
    Invalid(String),
}

/// The raw model call. Implementations do no retrying or budgeting.
pub trait Transport: Send + Sync {
    fn chat(&self, profile: &BackendProfile, req: &ChatRequest) -> Result<String, BackendError>;

    fn embed(
        &self,
        profile: &BackendProfile,
        texts: &[String],
    ) -> Result<Vec<Vec<f32>>, BackendError>;

    fn entail(
        &self,
        profile: &BackendProfile,
        premises: &[String],
        hypothesis: &str,
    ) -> Result<Entailment, BackendError>;

    /// Identifies the backend's behaviour for cache keys.
    fn fingerprint(&self) -> String;
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct TranscriptEntry<'a> {
    role: Role,
    op: &'a str,
    request_hash: &'a str,
    latency_ms: u128,
    token_estimate: u64,
    ok: bool,
}

/// Append-only JSONL log of backend calls.
pub struct TranscriptLog {
    file: Mutex<File>,
}

impl TranscriptLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    fn write(&self, entry: &TranscriptEntry<'_>) {
        let Ok(mut line) = serde_json::to_string(entry) else {
            return;
        };
        line.push('\n');
        if let Err(e) = self.file.lock().unwrap().write_all(line.as_bytes()) {
            tracing::warn!("transcript write failed: {e}");
        }
    }
}

/// Result of [`Client::chat_structured`].
#[derive(Debug, Clone, PartialEq)]
pub struct Structured {
    pub value: Value,
    pub repair_count: u32,
    pub raw: Vec<String>,
}

pub struct Client {
    profile: BackendProfile,
    transport: Arc<dyn Transport>,
    calls: AtomicU64,
    gate: Semaphore,
    transcript: Option<Arc<TranscriptLog>>,
    decoding: Option<Decoding>,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client")
            .field("profile", &self.profile)
            .field("calls", &self.calls())
            .finish()
    }
}

impl Client {
    pub fn new(profile: BackendProfile, transport: Arc<dyn Transport>) -> Self {
        let gate = Semaphore::new(profile.max_in_flight);
        Self {
            profile,
            transport,
            calls: AtomicU64::new(0),
            gate,
            transcript: None,
            decoding: None,
        }
    }

    pub fn mock(role: Role, rules: MockRuleSet) -> Self {
        Self::new(BackendProfile::mock(role), Arc::new(MockBackend::new(rules)))
    }

    /// Builds the transport the profile's endpoint names.
    pub fn from_profile(profile: BackendProfile, mock_rules: Option<MockRuleSet>) -> Result<Self, BackendError> {
        let transport: Arc<dyn Transport> = if profile.endpoint == "mock" {
            Arc::new(MockBackend::new(mock_rules.unwrap_or_default()))
        } else {
            Arc::new(HttpBackend::new(&profile)?)
        };
        Ok(Self::new(profile, transport))
    }

    pub fn with_transcript(mut self, log: Arc<TranscriptLog>) -> Self {
        self.transcript = Some(log);
        self
    }

    /// Decoding settings applied to every chat request, replacing the request's own.
    pub fn with_decoding(mut self, decoding: Decoding) -> Self {
        self.decoding = Some(decoding);
        self
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    /// Number of transport invocations so far, retries included.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.profile.role,
            self.profile.endpoint,
            self.profile.model_name,
            self.transport.fingerprint()
        )
    }

    fn expect_role(&self, ok: impl Fn(Role) -> bool, op: &str) -> Result<(), BackendError> {
        if ok(self.profile.role) {
            Ok(())
        } else {
            Err(BackendError::Invalid(format!(
                "{op} is not available on a {} backend",
                self.profile.role
            )))
        }
    }

    fn with_retries<T>(
        &self,
        op: &str,
        request_hash: &str,
        token_estimate: u64,
        mut f: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let _permit = self.gate.acquire();
        let mut attempt = 0u32;
        loop {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let start = Instant::now();
            let result = f();
            if let Some(log) = &self.transcript {
                log.write(&TranscriptEntry {
                    role: self.profile.role,
                    op,
                    request_hash,
                    latency_ms: start.elapsed().as_millis(),
                    token_estimate,
                    ok: result.is_ok(),
                });
            }
            match result {
                Err(BackendError::Transient(msg)) => {
                    if attempt >= self.profile.max_retries {
                        return Err(BackendError::TransportExhausted {
                            role: self.profile.role,
                            attempts: attempt + 1,
                            last: msg,
                        });
                    }
                    let delay = self
                        .profile
                        .retry_base_delay_ms
                        .saturating_mul(1u64 << attempt.min(16));
                    tracing::debug!(role = %self.profile.role, attempt, delay, "retrying after {msg}");
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.expect_role(Role::is_chat, "chat")?;
        if req.user_content.is_empty() {
            return Err(BackendError::Invalid("chat request has no content".into()));
        }
        if self.profile.role == Role::TextChat && req.frame_count() > 0 {
            return Err(BackendError::Invalid(
                "frame references need a vision_chat backend".into(),
            ));
        }
        let estimate = req.token_estimate();
        if estimate > self.profile.context_limit_tokens {
            return Err(BackendError::BudgetExceeded {
                estimate,
                limit: self.profile.context_limit_tokens,
            });
        }
        let overridden;
        let req = match &self.decoding {
            Some(d) if *d != req.decoding => {
                overridden = ChatRequest {
                    decoding: d.clone(),
                    ..req.clone()
                };
                &overridden
            }
            _ => req,
        };
        let hash = req.hash();
        self.with_retries("chat", &hash, estimate, || {
            self.transport.chat(&self.profile, req)
        })
    }

    /// Chats and parses the first JSON value in the reply. A reply without
    /// parseable JSON gets exactly one repair round-trip.
    pub fn chat_structured(
        &self,
        req: &ChatRequest,
        schema_description: &str,
    ) -> Result<Structured, BackendError> {
        let first = self.chat(req)?;
        let first_err = match extract_first_json(&first) {
            Ok(value) => {
                return Ok(Structured {
                    value,
                    repair_count: 0,
                    raw: vec![first],
                })
            }
            Err(e) => e,
        };
        let mut repair = req.clone();
        repair.user_content.push(ContentPart::text(format!(
            "REPAIR: your previous reply could not be parsed as JSON ({first_err}).\n\
             Previous reply:\n{first}\n\
             Reply again with JSON only, matching: {schema_description}"
        )));
        let second = self.chat(&repair)?;
        match extract_first_json(&second) {
            Ok(value) => Ok(Structured {
                value,
                repair_count: 1,
                raw: vec![first, second],
            }),
            Err(error) => Err(BackendError::StructuredOutput {
                error,
                first,
                second,
            }),
        }
    }

    /// Embeds `texts`, L2-normalizing every vector whatever the backend returned.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.expect_role(|r| r == Role::Embed, "embed")?;
        if texts.is_empty() {
            return Err(BackendError::Invalid("embed needs at least one text".into()));
        }
        let hash = {
            let bytes = serde_json::to_vec(texts).expect("strings serialize");
            hex::encode(Sha256::digest(&bytes))
        };
        let estimate = texts.iter().map(|t| estimate_text_tokens(t)).sum();
        let raw = self.with_retries("embed", &hash, estimate, || {
            self.transport.embed(&self.profile, texts)
        })?;
        if raw.len() != texts.len() {
            return Err(BackendError::Invalid(format!(
                "embedding backend returned {} vectors for {} texts",
                raw.len(),
                texts.len()
            )));
        }
        let dim = raw[0].len();
        if dim == 0 || raw.iter().any(|v| v.len() != dim) {
            return Err(BackendError::Invalid(
                "embedding dimension mismatch within batch".into(),
            ));
        }
        raw.into_iter()
            .map(|v| {
                let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(BackendError::Invalid(
                        "embedding backend returned a zero or non-finite vector".into(),
                    ));
                }
                Ok(v.into_iter().map(|x| (f64::from(x) / norm) as f32).collect())
            })
            .collect()
    }

    pub fn entail(&self, premises: &[String], hypothesis: &str) -> Result<Entailment, BackendError> {
        self.expect_role(|r| r == Role::Entail, "entail")?;
        if hypothesis.trim().is_empty() {
            return Err(BackendError::Invalid("hypothesis is empty".into()));
        }
        if premises.is_empty() {
            return Ok(Entailment {
                entailed: false,
                score: 0.0,
            });
        }
        let hash = {
            let bytes = serde_json::to_vec(&(premises, hypothesis)).expect("strings serialize");
            hex::encode(Sha256::digest(&bytes))
        };
        let estimate = premises.iter().map(|p| estimate_text_tokens(p)).sum::<u64>()
            + estimate_text_tokens(hypothesis);
        let e = self.with_retries("entail", &hash, estimate, || {
            self.transport.entail(&self.profile, premises, hypothesis)
        })?;
        Ok(Entailment {
            entailed: e.entailed,
            score: e.score.clamp(0.0, 1.0),
        })
    }
}

/// Cosine similarity of two equal-length vectors; 0 for empty or zero input.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    /// Fails transiently `failures` times, then answers "ok".
    struct Flaky {
        failures: u32,
        seen: AtomicU32,
    }

    impl Transport for Flaky {
        fn chat(&self, _: &BackendProfile, _: &ChatRequest) -> Result<String, BackendError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transient(format!("boom {n}")))
            } else {
                Ok("ok".into())
            }
        }
        fn embed(&self, _: &BackendProfile, t: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
            Ok(t.iter().map(|_| vec![3.0, 4.0]).collect())
        }
        fn entail(&self, _: &BackendProfile, _: &[String], _: &str) -> Result<Entailment, BackendError> {
            Ok(Entailment { entailed: true, score: 1.0 })
        }
        fn fingerprint(&self) -> String {
            "flaky".into()
        }
    }

    fn flaky(role: Role, failures: u32, max_retries: u32) -> Client {
        let mut p = BackendProfile::mock(role);
        p.max_retries = max_retries;
        p.retry_base_delay_ms = 0;
        Client::new(p, Arc::new(Flaky { failures, seen: AtomicU32::new(0) }))
    }

    fn rules(pairs: &[(&str, &str)], default: &str) -> MockRuleSet {
        MockRuleSet {
            rules: pairs
                .iter()
                .map(|(m, r)| MockRule {
                    match_substring: m.to_string(),
                    response: r.to_string(),
                })
                .collect(),
            default: default.to_string(),
        }
    }

    #[test]
    fn retries_then_succeeds_without_duplicating() {
        let c = flaky(Role::TextChat, 2, 3);
        assert_eq!(c.chat(&ChatRequest::new("s", "u")).unwrap(), "ok");
        assert_eq!(c.calls(), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let c = flaky(Role::TextChat, 10, 2);
        let err = c.chat(&ChatRequest::new("s", "u")).unwrap_err();
        assert!(matches!(err, BackendError::TransportExhausted { attempts: 3, .. }), "{err}");
        assert_eq!(c.calls(), 3);
    }

    #[test]
    fn budget_checked_before_any_call() {
        let c = flaky(Role::TextChat, 0, 0);
        let req = ChatRequest::new("", "x".repeat(4 * 32_768 + 1));
        let err = c.chat(&req).unwrap_err();
        assert_eq!(
            err,
            BackendError::BudgetExceeded {
                estimate: 32_769,
                limit: 32_768
            }
        );
        assert_eq!(c.calls(), 0);
    }

    #[test]
    fn frames_count_toward_budget() {
        let mut req = ChatRequest::new("", "abcd");
        for i in 0..128 {
            req.user_content.push(ContentPart::Frame {
                image_path: format!("{i}.jpg"),
                frame_index: i,
                t: i as f64,
            });
        }
        assert_eq!(req.token_estimate(), 1 + 128 * 256);
        let c = flaky(Role::VisionChat, 0, 0);
        assert!(matches!(c.chat(&req), Err(BackendError::BudgetExceeded { .. })));
        let t = flaky(Role::TextChat, 0, 0);
        let mut small = ChatRequest::new("", "x");
        small.user_content.push(req.user_content[1].clone());
        assert!(matches!(t.chat(&small), Err(BackendError::Invalid(_))));
    }

    #[test]
    fn mock_first_match_and_determinism() {
        let c = Client::mock(
            Role::TextChat,
            rules(&[("SELECT FRAMES", "{\"selected\": []}"), ("SELECT", "other")], "dflt"),
        );
        let req = ChatRequest::new("sys", "SELECT FRAMES now");
        let a = c.chat(&req).unwrap();
        assert_eq!(a, "{\"selected\": []}");
        assert_eq!(a, c.chat(&req).unwrap());
        assert_eq!(c.chat(&ChatRequest::new("sys", "nothing")).unwrap(), "dflt");
    }

    #[test]
    fn structured_strips_fences() {
        let c = Client::mock(Role::TextChat, rules(&[], "```json\n{\"selected\": []}\n```"));
        let s = c.chat_structured(&ChatRequest::new("s", "u"), "{}").unwrap();
        assert_eq!(s.value, serde_json::json!({"selected": []}));
        assert_eq!(s.repair_count, 0);
    }

    #[test]
    fn structured_repairs_once() {
        let c = Client::mock(
            Role::TextChat,
            rules(&[("REPAIR:", "[1, 2]")], "I think frames 3 and 4."),
        );
        let s = c.chat_structured(&ChatRequest::new("s", "u"), "list").unwrap();
        assert_eq!(s.value, serde_json::json!([1, 2]));
        assert_eq!(s.repair_count, 1);
        assert_eq!(c.calls(), 2);
    }

    #[test]
    fn structured_fails_after_repair() {
        let c = Client::mock(Role::TextChat, rules(&[], "no json here"));
        let err = c.chat_structured(&ChatRequest::new("s", "u"), "list").unwrap_err();
        match err {
            BackendError::StructuredOutput { first, second, .. } => {
                assert_eq!(first, "no json here");
                assert_eq!(second, "no json here");
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(c.calls(), 2);
    }

    #[test]
    fn embed_normalizes_backend_output() {
        let c = flaky(Role::Embed, 0, 0);
        let v = c.embed(&["a".into()]).unwrap();
        assert!((v[0][0] - 0.6).abs() < 1e-6 && (v[0][1] - 0.8).abs() < 1e-6);
        assert!(c.embed(&[]).is_err());
    }

    #[test]
    fn embed_identical_strings() {
        let c = Client::mock(Role::Embed, MockRuleSet::default());
        let v = c.embed(&["a".into(), "a".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((cosine(&v[0], &v[1]) - 1.0).abs() < 1e-6);
        let norm: f64 = v[0].iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn entail_edge_cases() {
        let c = Client::mock(Role::Entail, MockRuleSet::default());
        let e = c.entail(&[], "anything").unwrap();
        assert_eq!(e, Entailment { entailed: false, score: 0.0 });
        assert_eq!(c.calls(), 0);
        let same = c.entail(&["The vote was 52%.".into()], "The vote was 52%.").unwrap();
        assert!(same.entailed);
        assert_eq!(same.score, 1.0);
        assert!(c.entail(&["x".into()], "  ").is_err());
    }

    #[test]
    fn wrong_role_rejected() {
        let c = Client::mock(Role::Embed, MockRuleSet::default());
        assert!(c.chat(&ChatRequest::new("s", "u")).is_err());
        let c = Client::mock(Role::TextChat, MockRuleSet::default());
        assert!(c.embed(&["x".into()]).is_err());
    }

    #[test]
    fn transcript_has_one_line_per_call() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let log = Arc::new(TranscriptLog::open(&path).unwrap());
        let c = flaky(Role::TextChat, 1, 2).with_transcript(log);
        c.chat(&ChatRequest::new("s", "u")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["role"], "text_chat");
        assert_eq!(lines[0]["ok"], false);
        assert_eq!(lines[1]["ok"], true);
        assert_eq!(lines[0]["request_hash"], lines[1]["request_hash"]);
    }

    #[test]
    fn in_flight_cap_is_respected() {
        use std::sync::atomic::AtomicUsize;
        struct Slow {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl Transport for Slow {
            fn chat(&self, _: &BackendProfile, _: &ChatRequest) -> Result<String, BackendError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok(String::new())
            }
            fn embed(&self, _: &BackendProfile, _: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
                unreachable!()
            }
            fn entail(&self, _: &BackendProfile, _: &[String], _: &str) -> Result<Entailment, BackendError> {
                unreachable!()
            }
            fn fingerprint(&self) -> String {
                "slow".into()
            }
        }
        let slow = Arc::new(Slow { now: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let mut p = BackendProfile::mock(Role::TextChat);
        p.max_in_flight = 2;
        let c = Client::new(p, slow.clone());
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| c.chat(&ChatRequest::new("s", "u")).unwrap());
            }
        });
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(c.calls(), 8);
    }
}
