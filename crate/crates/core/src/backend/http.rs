//! Client for OpenAI-compatible `/chat/completions` and `/embeddings`
//! endpoints (vLLM, llama.cpp server, etc.).

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendError, BackendProfile, ChatRequest, ContentPart, Entailment, Transport};

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    base_url: String,
}

impl HttpBackend {
    pub fn new(profile: &BackendProfile) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(profile.request_timeout_s.max(0.001)))
            .build()
            .map_err(|e| BackendError::Invalid(format!("http client: {e}")))?;
        Ok(Self {
            client,
            base_url: profile.endpoint.trim_end_matches('/').to_string(),
        })
    }

    fn post(&self, profile: &BackendProfile, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(format!("{}{path}", self.base_url)).json(body);
        if let Some(key) = &profile.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(BackendError::Transient(format!("status {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Remote { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Remote {
            status,
            body: format!("unparseable response ({e}): {text}"),
        })
    }
}

fn load_image_data_url(path: &str) -> Result<String, BackendError> {
    let bytes = std::fs::read(path)
        .map_err(|e| BackendError::Invalid(format!("cannot read frame {path}: {e}")))?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:image/jpeg;base64,{b64}"))
}

/// Request body for `/chat/completions`. Each frame is preceded by a text
/// tag carrying its true frame index and timestamp.
pub(crate) fn chat_body(
    profile: &BackendProfile,
    req: &ChatRequest,
    image_url: impl Fn(&str) -> Result<String, BackendError>,
) -> Result<Value, BackendError> {
    let mut parts = Vec::with_capacity(req.user_content.len() * 2);
    for p in &req.user_content {
        match p {
            ContentPart::Text { text } => parts.push(json!({"type": "text", "text": text})),
            ContentPart::Frame {
                image_path,
                frame_index,
                t,
            } => {
                parts.push(json!({
                    "type": "text",
                    "text": format!("[frame {frame_index} t={t:.1}s]"),
                }));
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": image_url(image_path)?},
                }));
            }
        }
    }
    let mut body = json!({
        "model": profile.model_name,
        "messages": [
            {"role": "system", "content": req.system_prompt},
            {"role": "user", "content": parts},
        ],
        "max_tokens": req.decoding.max_output_tokens,
        "temperature": req.decoding.temperature,
    });
    if let Some(seed) = req.decoding.seed {
        body["seed"] = json!(seed);
    }
    Ok(body)
}

fn first_message(v: &Value) -> Result<String, BackendError> {
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| BackendError::Remote {
            status: 200,
            body: format!("response has no choices[0].message.content: {v}"),
        })
}

const JUDGE_PROMPT: &str = "You are an entailment judge. Decide whether the premises, taken \
together, entail the hypothesis. Reply with JSON only: {\"entailed\": true|false, \"score\": <0..1>}.";

impl Transport for HttpBackend {
    fn chat(&self, profile: &BackendProfile, req: &ChatRequest) -> Result<String, BackendError> {
        let body = chat_body(profile, req, load_image_data_url)?;
        let v = self.post(profile, "/chat/completions", &body)?;
        first_message(&v)
    }

    fn embed(&self, profile: &BackendProfile, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let body = json!({"model": profile.model_name, "input": texts});
        let v = self.post(profile, "/embeddings", &body)?;
        let data = v["data"].as_array().ok_or_else(|| BackendError::Remote {
            status: 200,
            body: format!("embedding response has no data array: {v}"),
        })?;
        let mut rows: Vec<(u64, Vec<f32>)> = Vec::with_capacity(data.len());
        for (i, d) in data.iter().enumerate() {
            let idx = d["index"].as_u64().unwrap_or(i as u64);
            let vec = d["embedding"]
                .as_array()
                .ok_or_else(|| BackendError::Invalid("embedding entry without vector".into()))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| BackendError::Invalid("non-numeric embedding value".into()))?;
            rows.push((idx, vec));
        }
        rows.sort_by_key(|r| r.0);
        Ok(rows.into_iter().map(|r| r.1).collect())
    }

    fn entail(
        &self,
        profile: &BackendProfile,
        premises: &[String],
        hypothesis: &str,
    ) -> Result<Entailment, BackendError> {
        let mut user = String::from("Premises:\n");
        for p in premises {
            user.push_str("- ");
            user.push_str(p);
            user.push('\n');
        }
        user.push_str("Hypothesis: ");
        user.push_str(hypothesis);
        let req = ChatRequest::new(JUDGE_PROMPT, user);
        let body = chat_body(profile, &req, load_image_data_url)?;
        let text = first_message(&self.post(profile, "/chat/completions", &body)?)?;
        parse_judgment(&text)
    }

    fn fingerprint(&self) -> String {
        format!("http:{}", self.base_url)
    }
}

fn parse_judgment(text: &str) -> Result<Entailment, BackendError> {
    if let Ok(v) = super::extract_first_json(text) {
        if let Some(entailed) = v["entailed"].as_bool() {
            let score = v["score"]
                .as_f64()
                .unwrap_or(if entailed { 1.0 } else { 0.0 });
            return Ok(Entailment { entailed, score });
        }
    }
    let lower = text.trim().to_lowercase();
    if lower.starts_with("yes") {
        Ok(Entailment { entailed: true, score: 1.0 })
    } else if lower.starts_with("no") {
        Ok(Entailment { entailed: false, score: 0.0 })
    } else {
        Err(BackendError::Invalid(format!("unreadable judgment: {text}")))
    }
}
