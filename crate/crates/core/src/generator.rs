//! Evidence-fused prompt assembly and per-video claim parsing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendError, ChatRequest, Client, ContentPart, Decoding};
use crate::error::{Error, Result};
use crate::frame_plan::{map_timestamp, BudgetPolicy, FramePlan};
use crate::localizer::{EvidenceSet, QueryContext};
use crate::timeline::{format_decisecond, to_decisecond};

pub const NO_TRANSCRIPT: &str = "(no transcript)";

const GENERATION_SYSTEM: &str = "You write factual claims about an event from one video. You \
receive the query and persona, a grounding summary, supplementary grounding hints from an object \
detector and OCR, the speech transcript, and video frames tagged with their true frame index and \
timestamp. The hints can be wrong: use a hint only when the frames or transcript confirm it. \
Write each claim as a single sentence grounded in directly observed evidence, and prefer specific \
facts (names, numbers, dates) over vague paraphrase. Reply with JSON only: \
[{\"claim\": \"<one sentence>\", \"frames\": [<frame index>, ...]}]. Reply [] if the video holds \
nothing relevant.";

const CLAIM_SCHEMA: &str = "[{\"claim\": string, \"frames\": [integer]}]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: u64,
    pub t: f64,
    pub objects: Vec<String>,
    pub ocr: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Claim {
    pub claim_id: String,
    pub video_id: String,
    pub text: String,
    #[serde(default)]
    pub evidence_frames: Vec<u64>,
}

pub fn claim_id(video_id: &str, ordinal: usize) -> String {
    format!("{video_id}#{ordinal:03}")
}

/// The video a claim id belongs to.
pub fn video_of_claim_id(id: &str) -> &str {
    id.rsplit_once('#').map_or(id, |(v, _)| v)
}

/// One annotation per keyframe that survived planning, keyed by the same
/// frame index the plan uses. Evidence mapping to one index is merged.
pub fn build_annotations(ev: &EvidenceSet, fps: f64, frame_count: u64, plan: &FramePlan) -> Vec<FrameAnnotation> {
    let planned: BTreeMap<u64, f64> = plan
        .entries
        .iter()
        .filter(|e| e.origin.is_keyframe())
        .map(|e| (e.frame_index, e.t))
        .collect();
    let mut out: BTreeMap<u64, FrameAnnotation> = BTreeMap::new();
    for f in &ev.frames {
        let idx = map_timestamp(f.t_s.max(0.0), fps, frame_count);
        let Some(&t) = planned.get(&idx) else {
            continue;
        };
        let a = out.entry(idx).or_insert_with(|| FrameAnnotation {
            frame_index: idx,
            t,
            objects: Vec::new(),
            ocr: Vec::new(),
        });
        for o in &f.supporting_objects {
            if !a.objects.contains(o) {
                a.objects.push(o.clone());
            }
        }
        for s in &f.supporting_ocr {
            if !a.ocr.contains(s) {
                a.ocr.push(s.clone());
            }
        }
    }
    out.into_values().collect()
}

fn annotation_line(a: &FrameAnnotation) -> String {
    let objects = if a.objects.is_empty() {
        "-".to_string()
    } else {
        a.objects.join(", ")
    };
    let text = if a.ocr.is_empty() {
        "-".to_string()
    } else {
        a.ocr.join(" ⏐ ")
    };
    format!(
        "frame {} (t={}s): objects={objects}; text={text}",
        a.frame_index,
        format_decisecond(to_decisecond(a.t))
    )
}

fn render_prompt(
    plan: &FramePlan,
    ctx: &QueryContext,
    anns: &[FrameAnnotation],
    summary: &str,
    asr: &str,
    decoding: &Decoding,
) -> ChatRequest {
    let persona = if ctx.persona.trim().is_empty() {
        "(none)"
    } else {
        ctx.persona.as_str()
    };
    let hints = if anns.is_empty() {
        "(none)".to_string()
    } else {
        anns.iter().map(annotation_line).collect::<Vec<_>>().join("\n")
    };
    let mut parts = vec![
        ContentPart::text(format!(
            "GENERATE CLAIMS\nQuery: {}\nPersona: {persona}",
            ctx.query
        )),
        ContentPart::text(format!("Grounding summary:\n{summary}")),
        ContentPart::text(format!(
            "Supplementary grounding hints (cross-validate against the frames before use):\n{hints}"
        )),
        ContentPart::text(format!("ASR transcript:\n{asr}")),
        ContentPart::text(format!(
            "Frames ({}), each tagged with its true frame index and timestamp:",
            plan.entries.len()
        )),
    ];
    parts.extend(plan.entries.iter().map(|e| ContentPart::Frame {
        image_path: e.image_ref.clone(),
        frame_index: e.frame_index,
        t: e.t,
    }));
    ChatRequest {
        system_prompt: GENERATION_SYSTEM.to_string(),
        user_content: parts,
        decoding: decoding.clone(),
    }
}

/// Assembles the generation request. The transcript keeps its beginning and
/// is cut to whatever the text reserve leaves after the other sections.
pub fn assemble_fusion_prompt(
    plan: &FramePlan,
    ctx: &QueryContext,
    anns: &[FrameAnnotation],
    summary: &str,
    asr: &str,
    policy: &BudgetPolicy,
    decoding: &Decoding,
) -> Result<ChatRequest> {
    if plan.token_estimate + policy.text_reserve_tokens > policy.context_limit {
        return Err(Error::BudgetViolation {
            estimate: plan.token_estimate + policy.text_reserve_tokens,
            limit: policy.context_limit,
        });
    }
    let asr = asr.trim();
    let budget_chars = policy.text_reserve_tokens.saturating_mul(4);
    let base_chars = render_prompt(plan, ctx, anns, summary, "", decoding)
        .text()
        .chars()
        .count() as u64;
    let room = budget_chars.saturating_sub(base_chars) as usize;
    let kept: String = asr.chars().take(room).collect();
    let kept = kept.trim_end();
    if kept.len() < asr.len() {
        tracing::debug!(kept = kept.len(), total = asr.len(), "transcript truncated to fit the text reserve");
    }
    let asr_text = if kept.is_empty() { NO_TRANSCRIPT } else { kept };
    let req = render_prompt(plan, ctx, anns, summary, asr_text, decoding);

    let text_tokens = req.text_token_estimate();
    if text_tokens > policy.text_reserve_tokens {
        return Err(Error::BudgetViolation {
            estimate: text_tokens,
            limit: policy.text_reserve_tokens,
        });
    }
    if req.token_estimate() > policy.context_limit {
        return Err(Error::BudgetViolation {
            estimate: req.token_estimate(),
            limit: policy.context_limit,
        });
    }
    Ok(req)
}

const ABBREVIATIONS: &[&str] = &[
    "dr", "jr", "mr", "mrs", "ms", "no", "prof", "sr", "st", "vs", "u.s", "u.k", "e.g", "i.e",
];

/// Cuts `text` down to its first sentence. Returns the sentence and whether
/// anything after it was dropped.
pub fn first_sentence(text: &str) -> (String, bool) {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let chars: Vec<char> = flat.chars().collect();
    let mut cut = None;
    for i in 0..chars.len() {
        if !matches!(chars[i], '.' | '!' | '?') {
            continue;
        }
        let Some(&next) = chars.get(i + 1) else {
            break;
        };
        if next != ' ' {
            continue;
        }
        let Some(&after) = chars.get(i + 2) else {
            break;
        };
        if !(after.is_uppercase() || after.is_ascii_digit() || after == '"') {
            continue;
        }
        if chars[i] == '.' {
            let word: String = chars[..i]
                .iter()
                .rev()
                .take_while(|c| !c.is_whitespace())
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect::<String>()
                .to_lowercase();
            let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
            if ABBREVIATIONS.contains(&word) || (word.len() == 1 && word.chars().all(char::is_alphabetic)) {
                continue;
            }
        }
        cut = Some(i + 1);
        break;
    }
    let (mut sentence, dropped) = match cut {
        Some(end) => (chars[..end].iter().collect::<String>(), true),
        None => (flat, false),
    };
    let sentence_trimmed = sentence.trim_end().to_string();
    sentence = sentence_trimmed;
    if !sentence.is_empty() && !sentence.ends_with(['.', '!', '?']) {
        let closes_quote = sentence.ends_with('"')
            && sentence[..sentence.len() - 1].ends_with(['.', '!', '?']);
        if !closes_quote {
            sentence.push('.');
        }
    }
    (sentence, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub video_id: String,
    pub claims: Vec<Claim>,
    pub raw_responses: Vec<String>,
    pub parse_failed: bool,
    /// Claims whose trailing sentences were cut off.
    pub truncated_claims: usize,
}

fn claim_entries(value: &Value) -> Vec<Value> {
    match value {
        Value::Array(a) => a.clone(),
        Value::Object(o) => o
            .get("claims")
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default(),
        _ => Vec::new(),
    }
}

/// Parses a generation reply into claims for `video_id`.
pub fn parse_claims(value: &Value, video_id: &str, planned: &BTreeSet<u64>) -> (Vec<Claim>, usize) {
    let mut claims = Vec::new();
    let mut truncated = 0;
    for e in claim_entries(value) {
        let raw = match &e {
            Value::String(s) => s.clone(),
            _ => e["claim"].as_str().unwrap_or_default().to_string(),
        };
        let (text, cut) = first_sentence(&raw);
        if text.is_empty() {
            continue;
        }
        if cut {
            tracing::warn!(video_id, "claim had several sentences; kept the first");
            truncated += 1;
        }
        let mut frames: Vec<u64> = e["frames"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_u64).collect())
            .unwrap_or_default();
        frames.retain(|f| planned.contains(f));
        frames.sort_unstable();
        frames.dedup();
        claims.push(Claim {
            claim_id: claim_id(video_id, claims.len()),
            video_id: video_id.to_string(),
            text,
            evidence_frames: frames,
        });
    }
    (claims, truncated)
}

/// Runs the vision model on the fused prompt. An unparseable reply (after the
/// repair attempt) leaves the video with no claims rather than failing the run.
pub fn generate_claims(req: &ChatRequest, client: &Client, video_id: &str) -> Result<Generation> {
    let planned: BTreeSet<u64> = req
        .user_content
        .iter()
        .filter_map(|p| match p {
            ContentPart::Frame { frame_index, .. } => Some(*frame_index),
            ContentPart::Text { .. } => None,
        })
        .collect();
    match client.chat_structured(req, CLAIM_SCHEMA) {
        Ok(s) => {
            let (claims, truncated_claims) = parse_claims(&s.value, video_id, &planned);
            Ok(Generation {
                video_id: video_id.to_string(),
                claims,
                raw_responses: s.raw,
                parse_failed: false,
                truncated_claims,
            })
        }
        Err(BackendError::StructuredOutput { first, second, error }) => {
            tracing::warn!(video_id, "claim generation output unparseable: {error}");
            Ok(Generation {
                video_id: video_id.to_string(),
                claims: Vec::new(),
                raw_responses: vec![first, second],
                parse_failed: true,
                truncated_claims: 0,
            })
        }
        Err(e) => Err(e.into()),
    }
}
