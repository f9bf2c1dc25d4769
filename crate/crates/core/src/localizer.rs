//! Query-conditioned evidence localization over serialized timeline windows.
//!
//! Each window is shown to a text-only chat model together with the query
//! and persona. Whatever the model selects is checked against the window:
//! unknown timestamps are dropped and supporting strings that do not occur
//! verbatim in the record are removed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendError, ChatRequest, Client};
use crate::error::Result;
use crate::timeline::{
    format_decisecond, partition_windows, serialize_record, serialize_window, to_decisecond,
    FrameRecord, SerializeOptions, Timeline, Window,
};

pub const DEFAULT_WINDOW_SIZE: usize = 30;

pub const NO_EVIDENCE_SUMMARY: &str = "No grounding evidence was localized for this query.";

pub const SUMMARY_MAX_WORDS: usize = 200;

const LOCALIZER_SYSTEM: &str = "You locate evidence in the grounding timeline of a news or event \
video. Each line is one sampled frame: its timestamp, the objects a detector found, and the \
on-screen text an OCR engine read. Select the timestamps whose objects or on-screen text bear on \
the query, judged from the point of view of the persona. Copy supporting objects and text exactly \
as they appear in the line. Reply with JSON only, in the form \
{\"selected\":[{\"t\":<seconds>,\"objects\":[<label>],\"ocr\":[<text>],\"reason\":\"<one sentence>\"}]}. \
Reply {\"selected\":[]} when nothing is relevant.";

const LOCALIZER_SCHEMA: &str =
    "{\"selected\":[{\"t\":number,\"objects\":[string],\"ocr\":[string],\"reason\":string}]}";

const SUMMARY_SYSTEM: &str = "You write grounding summaries. Given the frames selected as evidence \
for a query, write one paragraph of at most 200 words explaining how the detected objects and \
on-screen text relate to the query and persona. Plain prose, no lists, no JSON.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryContext {
    pub query: String,
    #[serde(default)]
    pub persona: String,
}

impl QueryContext {
    pub fn new(query: impl Into<String>, persona: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            persona: persona.into(),
        }
    }

    fn header(&self) -> String {
        let persona = if self.persona.trim().is_empty() {
            "(none)"
        } else {
            self.persona.as_str()
        };
        format!("Query: {}\nPersona: {persona}", self.query)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFrame {
    /// Timestamp of the matched timeline record.
    pub t_s: f64,
    pub window_index: usize,
    pub supporting_objects: Vec<String>,
    pub supporting_ocr: Vec<String>,
    pub rationale: String,
}

impl SelectedFrame {
    pub fn evidence_score(&self) -> usize {
        self.supporting_objects.len() + self.supporting_ocr.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub video_id: String,
    pub frames: Vec<SelectedFrame>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub window_index: usize,
    pub frames: Vec<SelectedFrame>,
    pub raw_responses: Vec<String>,
    /// Entries dropped because their timestamp is not in the window.
    pub dropped: usize,
    /// Supporting strings removed because the record does not contain them.
    pub fabricated_strings: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub evidence: EvidenceSet,
    pub windows: Vec<WindowOutcome>,
    pub skipped_windows: usize,
    pub summary_fallback: bool,
}

fn push_unique(v: &mut Vec<String>, s: String) {
    if !v.contains(&s) {
        v.push(s);
    }
}

fn strings(v: &Value) -> Vec<String> {
    match v {
        Value::Array(items) => items
            .iter()
            .filter_map(|i| i.as_str().map(str::to_string))
            .collect(),
        Value::String(s) => vec![s.clone()],
        _ => Vec::new(),
    }
}

fn timestamp(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().trim_start_matches("t=").trim_end_matches('s').parse().ok(),
        _ => None,
    }
    .filter(|t: &f64| t.is_finite())
}

/// `person×2` and `person` both name the label `person`.
fn strip_count(label: &str) -> &str {
    match label.rsplit_once('×') {
        Some((head, tail)) if tail.chars().all(|c| c.is_ascii_digit()) && !tail.is_empty() => head,
        _ => label,
    }
    .trim()
}

/// Checks a parsed localizer reply against the window it was asked about.
pub fn validate_selection(w: &Window<'_>, value: &Value) -> (Vec<SelectedFrame>, usize, usize) {
    let entries = match value {
        Value::Object(o) => o.get("selected").cloned().unwrap_or(Value::Null),
        Value::Array(_) => value.clone(),
        _ => Value::Null,
    };
    let entries = entries.as_array().cloned().unwrap_or_default();

    let mut by_time: BTreeMap<i64, (SelectedFrame, &FrameRecord)> = BTreeMap::new();
    let mut dropped = 0;
    let mut fabricated = 0;
    for e in &entries {
        let Some(t) = timestamp(&e["t"]) else {
            dropped += 1;
            continue;
        };
        let ds = to_decisecond(t);
        let Some(rec) = w.records.iter().find(|r| r.decisecond() == ds) else {
            tracing::warn!(t, window = w.window_index, "localizer selected a timestamp outside the window");
            dropped += 1;
            continue;
        };
        let (frame, _) = by_time.entry(ds).or_insert_with(|| {
            (
                SelectedFrame {
                    t_s: rec.t,
                    window_index: w.window_index,
                    supporting_objects: Vec::new(),
                    supporting_ocr: Vec::new(),
                    rationale: String::new(),
                },
                rec,
            )
        });
        for o in strings(&e["objects"]) {
            let label = strip_count(&o);
            if rec.has_label(label) {
                push_unique(&mut frame.supporting_objects, label.to_string());
            } else {
                fabricated += 1;
            }
        }
        for s in strings(&e["ocr"]) {
            if rec.has_ocr(&s) {
                push_unique(&mut frame.supporting_ocr, s);
            } else {
                tracing::warn!(text = %s, "dropping OCR string not present in the record");
                fabricated += 1;
            }
        }
        if frame.rationale.is_empty() {
            frame.rationale = e["reason"].as_str().unwrap_or_default().trim().to_string();
        }
    }
    (by_time.into_values().map(|(f, _)| f).collect(), dropped, fabricated)
}

pub fn localize_window(
    w: &Window<'_>,
    ctx: &QueryContext,
    client: &Client,
    opts: &SerializeOptions,
) -> std::result::Result<WindowOutcome, BackendError> {
    let text = serialize_window(w, opts);
    let req = ChatRequest::new(
        LOCALIZER_SYSTEM,
        format!(
            "SELECT FRAMES\n{}\nWindow {} ({} frames):\n{text}",
            ctx.header(),
            w.window_index,
            w.records.len()
        ),
    );
    match client.chat_structured(&req, LOCALIZER_SCHEMA) {
        Ok(s) => {
            let (frames, dropped, fabricated_strings) = validate_selection(w, &s.value);
            Ok(WindowOutcome {
                window_index: w.window_index,
                frames,
                raw_responses: s.raw,
                dropped,
                fabricated_strings,
                skipped: false,
            })
        }
        Err(BackendError::StructuredOutput { first, second, error }) => {
            tracing::warn!(window = w.window_index, "skipping window: {error}");
            Ok(WindowOutcome {
                window_index: w.window_index,
                frames: Vec::new(),
                raw_responses: vec![first, second],
                dropped: 0,
                fabricated_strings: 0,
                skipped: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Unions per-window selections. Input order does not matter.
pub fn merge_selections(video_id: &str, mut outcomes: Vec<WindowOutcome>) -> (EvidenceSet, Vec<WindowOutcome>) {
    outcomes.sort_by_key(|o| o.window_index);
    let mut merged: BTreeMap<i64, SelectedFrame> = BTreeMap::new();
    for o in &outcomes {
        for f in &o.frames {
            match merged.get_mut(&to_decisecond(f.t_s)) {
                Some(existing) => {
                    for s in &f.supporting_objects {
                        push_unique(&mut existing.supporting_objects, s.clone());
                    }
                    for s in &f.supporting_ocr {
                        push_unique(&mut existing.supporting_ocr, s.clone());
                    }
                }
                None => {
                    merged.insert(to_decisecond(f.t_s), f.clone());
                }
            }
        }
    }
    (
        EvidenceSet {
            video_id: video_id.to_string(),
            frames: merged.into_values().collect(),
            summary: String::new(),
        },
        outcomes,
    )
}

/// Localizes every window of the timeline (concurrently, up to the client's
/// in-flight cap) and writes the grounding summary.
pub fn localize_video(
    tl: &Timeline,
    ctx: &QueryContext,
    window_size: usize,
    client: &Client,
    opts: &SerializeOptions,
) -> Result<Localization> {
    let windows = partition_windows(tl, window_size)?;
    let outcomes = windows
        .par_iter()
        .map(|w| localize_window(w, ctx, client, opts))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (mut evidence, windows) = merge_selections(&tl.video_id, outcomes);
    let skipped_windows = windows.iter().filter(|w| w.skipped).count();
    let (summary, summary_fallback) = summarize_grounding(&evidence, tl, ctx, client);
    evidence.summary = summary;
    Ok(Localization {
        evidence,
        windows,
        skipped_windows,
        summary_fallback,
    })
}

fn mechanical_summary(ev: &EvidenceSet) -> String {
    let ocr: Vec<&str> = ev
        .frames
        .iter()
        .flat_map(|f| f.supporting_ocr.iter().map(String::as_str))
        .collect();
    if !ocr.is_empty() {
        return ocr.join("; ");
    }
    ev.frames
        .iter()
        .flat_map(|f| f.supporting_objects.iter().map(String::as_str))
        .collect::<Vec<_>>()
        .join("; ")
}

fn one_paragraph(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    words[..words.len().min(SUMMARY_MAX_WORDS)].join(" ")
}

/// Returns the summary and whether the mechanical fallback was used.
pub fn summarize_grounding(
    ev: &EvidenceSet,
    tl: &Timeline,
    ctx: &QueryContext,
    client: &Client,
) -> (String, bool) {
    if ev.frames.is_empty() {
        return (NO_EVIDENCE_SUMMARY.to_string(), false);
    }
    let opts = SerializeOptions {
        emit_threshold: 0.0,
    };
    let mut lines = Vec::with_capacity(ev.frames.len());
    for f in &ev.frames {
        let ds = to_decisecond(f.t_s);
        let line = match tl.records.iter().find(|r| r.decisecond() == ds) {
            Some(r) => serialize_record(r, &opts),
            None => format!("t={}s", format_decisecond(ds)),
        };
        lines.push(format!(
            "{line} | supporting objects: {} | supporting text: {} | why: {}",
            f.supporting_objects.join(", "),
            f.supporting_ocr.join(" ⏐ "),
            f.rationale
        ));
    }
    let req = ChatRequest::new(
        SUMMARY_SYSTEM,
        format!(
            "GROUNDING SUMMARY\n{}\nSelected evidence frames:\n{}",
            ctx.header(),
            lines.join("\n")
        ),
    );
    match client.chat(&req) {
        Ok(text) if !text.trim().is_empty() => (one_paragraph(&text), false),
        Ok(_) => (mechanical_summary(ev), true),
        Err(e) => {
            tracing::warn!("grounding summary failed, using OCR fallback: {e}");
            (mechanical_summary(ev), true)
        }
    }
}
