//! Deterministic offline backend.
//!
//! * chat: first rule whose `match_substring` occurs in the request text wins,
//!   otherwise the default response.
//! * embed: signed feature hashing of content tokens into
//!   [`MOCK_EMBED_DIM`] buckets. A token's bucket is the first eight bytes of
//!   SHA-256(token) read big-endian, modulo the dimension; byte 8 even means
//!   `+w`, odd means `-w`. `w` is 3 for tokens carrying a digit or starting
//!   with an uppercase letter away from the sentence start, 1 otherwise.
//! * entail: token-set containment. Both sides are reduced to lowercase
//!   alphanumeric tokens minus stopwords; the hypothesis is entailed when its
//!   token set contains, or is contained in, some premise's token set.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, BackendProfile, ChatRequest, Entailment, Transport};

pub const MOCK_EMBED_DIM: usize = 1024;

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "been", "by", "for", "from", "had", "has", "have",
    "in", "is", "it", "its", "of", "on", "or", "that", "the", "this", "to", "was", "were", "with",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub match_substring: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockRuleSet {
    pub rules: Vec<MockRule>,
    pub default: String,
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum RuleFileEntry {
    Rule(MockRule),
    Default { default: String },
}

impl MockRuleSet {
    /// Parses the rule-file format: a JSON list of
    /// `{"match_substring", "response"}` objects plus one `{"default"}` object.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let entries: Vec<RuleFileEntry> = serde_json::from_str(text)?;
        let mut set = MockRuleSet::default();
        for e in entries {
            match e {
                RuleFileEntry::Rule(r) => set.rules.push(r),
                RuleFileEntry::Default { default } => set.default = default,
            }
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| crate::Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        let mut entries: Vec<RuleFileEntry> =
            self.rules.iter().cloned().map(RuleFileEntry::Rule).collect();
        entries.push(RuleFileEntry::Default {
            default: self.default.clone(),
        });
        serde_json::to_string_pretty(&entries).expect("rules serialize")
    }

    pub fn respond(&self, text: &str) -> &str {
        self.rules
            .iter()
            .find(|r| text.contains(&r.match_substring))
            .map(|r| r.response.as_str())
            .unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    rules: MockRuleSet,
}

impl MockBackend {
    pub fn new(rules: MockRuleSet) -> Self {
        Self { rules }
    }
}

impl Transport for MockBackend {
    fn chat(&self, _profile: &BackendProfile, req: &ChatRequest) -> Result<String, BackendError> {
        Ok(self.rules.respond(&req.text()).to_string())
    }

    fn embed(&self, _profile: &BackendProfile, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(texts.iter().map(|t| hashed_embedding(t)).collect())
    }

    fn entail(
        &self,
        _profile: &BackendProfile,
        premises: &[String],
        hypothesis: &str,
    ) -> Result<Entailment, BackendError> {
        Ok(entail_by_tokens(premises, hypothesis))
    }

    fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.rules.to_json().as_bytes());
        format!("mock-v1:{}", hex::encode(&digest[..8]))
    }
}

fn raw_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
}

fn is_stopword(lower: &str) -> bool {
    STOPWORDS.binary_search(&lower).is_ok()
}

/// Lowercased content tokens in order of appearance.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    raw_tokens(text)
        .map(str::to_lowercase)
        .filter(|t| !is_stopword(t))
        .collect()
}

fn bucket_and_sign(token: &str) -> (usize, f32) {
    let d = Sha256::digest(token.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&d[..8]);
    let bucket = (u64::from_be_bytes(head) % MOCK_EMBED_DIM as u64) as usize;
    let sign = if d[8] % 2 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

/// The mock embedder's unnormalized vector for `text`.
pub fn hashed_embedding(text: &str) -> Vec<f32> {
    let mut v = vec![0f32; MOCK_EMBED_DIM];
    let mut any = false;
    for (pos, tok) in raw_tokens(text).enumerate() {
        let lower = tok.to_lowercase();
        if is_stopword(&lower) {
            continue;
        }
        let salient = tok.chars().any(|c| c.is_ascii_digit())
            || (pos > 0 && tok.chars().next().is_some_and(char::is_uppercase));
        let w = if salient { 3.0 } else { 1.0 };
        let (b, s) = bucket_and_sign(&lower);
        v[b] += s * w;
        any = true;
    }
    if !any || v.iter().all(|x| *x == 0.0) {
        let (b, s) = bucket_and_sign(text.trim().to_lowercase().as_str());
        v[b] += s;
    }
    v
}

fn token_set(text: &str) -> std::collections::BTreeSet<String> {
    let set: std::collections::BTreeSet<String> = normalize_tokens(text).into_iter().collect();
    if set.is_empty() {
        std::iter::once(text.trim().to_lowercase()).collect()
    } else {
        set
    }
}

pub fn entail_by_tokens(premises: &[String], hypothesis: &str) -> Entailment {
    let h = token_set(hypothesis);
    let mut best = 0.0f64;
    let mut entailed = false;
    for p in premises {
        let p = token_set(p);
        if p.iter().all(|t| t.is_empty()) {
            continue;
        }
        let common = h.intersection(&p).count();
        let score = common as f64 / h.len().min(p.len()) as f64;
        best = best.max(score);
        entailed |= h.is_subset(&p) || p.is_subset(&h);
    }
    Entailment {
        entailed,
        score: best,
    }
}
