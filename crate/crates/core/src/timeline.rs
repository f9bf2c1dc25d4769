//! Per-video grounding timeline.
//!
//! Detection and OCR streams arrive as line-delimited JSON keyed by
//! `frame_index`. They are joined into one chronological list of
//! [`FrameRecord`]s, which can be cut into fixed-size [`Window`]s and rendered
//! as compact text for the localizer prompt.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detections below this confidence are left out of serialized windows.
pub const DEFAULT_EMIT_THRESHOLD: f64 = 0.30;

/// Separator placed between OCR strings of one frame.
pub const OCR_SEPARATOR: &str = " ⏐ ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

impl Detection {
    fn check(&self) -> std::result::Result<(), String> {
        if self.label.trim().is_empty() {
            return Err("detection label is empty".into());
        }
        check_confidence(self.confidence)?;
        check_bbox(&self.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrSpan {
    pub text: String,
    pub confidence: f64,
    #[serde(default)]
    pub bbox: Option<[f64; 4]>,
}

fn check_confidence(c: f64) -> std::result::Result<(), String> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(format!("confidence {c} outside [0, 1]"))
    }
}

fn check_bbox(b: &[f64; 4]) -> std::result::Result<(), String> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err("bbox has a non-finite coordinate".into());
    }
    if b[0] > b[2] || b[1] > b[3] {
        return Err(format!("bbox {b:?} has x1 > x2 or y1 > y2"));
    }
    Ok(())
}

/// One timeline entry: what was detected and read at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub t: f64,
    pub detections: Vec<Detection>,
    pub ocr: Vec<OcrSpan>,
}

impl FrameRecord {
    /// Timestamp in tenths of a second, the resolution used in prompts.
    pub fn decisecond(&self) -> i64 {
        to_decisecond(self.t)
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.detections.iter().any(|d| d.label == label)
    }

    pub fn has_ocr(&self, text: &str) -> bool {
        self.ocr.iter().any(|s| s.text == text)
    }
}

pub fn to_decisecond(t: f64) -> i64 {
    (t * 10.0).round() as i64
}

pub fn format_decisecond(ds: i64) -> String {
    let sign = if ds < 0 { "-" } else { "" };
    let ds = ds.abs();
    format!("{sign}{}.{}", ds / 10, ds % 10)
}

/// Chronological grounding record for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub video_id: String,
    pub fps: f64,
    pub frame_count: u64,
    pub duration_s: f64,
    pub records: Vec<FrameRecord>,
    #[serde(default)]
    pub asr: String,
}

impl Timeline {
    /// Checks the structural invariants; used after loading a persisted timeline.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::Ingest {
            source_name: format!("timeline {}", self.video_id),
            line: 0,
            message: m,
        };
        if !(self.fps > 0.0) {
            return Err(bad(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frame_count == 0 {
            return Err(bad("frame_count must be positive".into()));
        }
        for pair in self.records.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index || pair[1].t <= pair[0].t {
                return Err(bad(format!(
                    "records out of order at frame {}",
                    pair[1].frame_index
                )));
            }
        }
        if let Some(r) = self.records.iter().find(|r| r.frame_index >= self.frame_count) {
            return Err(bad(format!(
                "frame_index {} outside 0..{}",
                r.frame_index, self.frame_count
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Identity and frame geometry of a video, as listed in the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub fps: f64,
    pub frame_count: u64,
    pub duration_s: f64,
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub frame_index: u64,
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(skip)]
    pub line: usize,
}

/// One line of an OCR file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrLine {
    pub frame_index: u64,
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub texts: Vec<OcrSpan>,
    #[serde(skip)]
    pub line: usize,
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(
    text: &str,
    source_name: &str,
    mut set_line: impl FnMut(&mut T, usize),
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut rec: T = serde_json::from_str(raw).map_err(|e| Error::Ingest {
            source_name: source_name.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        set_line(&mut rec, line_no);
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_detections(text: &str, source_name: &str) -> Result<Vec<DetectionLine>> {
    let lines: Vec<DetectionLine> = parse_jsonl(text, source_name, |r: &mut DetectionLine, n| r.line = n)?;
    for l in &lines {
        for d in &l.detections {
            d.check().map_err(|message| Error::Ingest {
                source_name: source_name.to_string(),
                line: l.line,
                message,
            })?;
        }
        check_time(l.t, source_name, l.line)?;
    }
    Ok(lines)
}

/// Parses an OCR file. Span text is trimmed; spans that are blank after
/// trimming carry no evidence and are skipped.
pub fn parse_ocr(text: &str, source_name: &str) -> Result<Vec<OcrLine>> {
    let mut lines: Vec<OcrLine> = parse_jsonl(text, source_name, |r: &mut OcrLine, n| r.line = n)?;
    for l in &mut lines {
        for s in &l.texts {
            let fail = |message| Error::Ingest {
                source_name: source_name.to_string(),
                line: l.line,
                message,
            };
            check_confidence(s.confidence).map_err(fail)?;
            if let Some(b) = &s.bbox {
                check_bbox(b).map_err(fail)?;
            }
        }
        check_time(l.t, source_name, l.line)?;
        l.texts.retain_mut(|s| {
            let trimmed = s.text.trim();
            if trimmed.len() != s.text.len() {
                s.text = trimmed.to_string();
            }
            !s.text.is_empty()
        });
    }
    Ok(lines)
}

fn check_time(t: Option<f64>, source_name: &str, line: usize) -> Result<()> {
    match t {
        Some(t) if !(t.is_finite() && t >= 0.0) => Err(Error::Ingest {
            source_name: source_name.to_string(),
            line,
            message: format!("timestamp {t} must be finite and non-negative"),
        }),
        _ => Ok(()),
    }
}

#[derive(Default)]
struct Slot {
    t: Option<f64>,
    detections: Vec<Detection>,
    ocr: Vec<OcrSpan>,
}

/// Joins the two streams into a timeline. Frames present in neither stream
/// are omitted; nothing is filtered by confidence here.
pub fn build_timeline(
    detections: &[DetectionLine],
    ocr: &[OcrLine],
    asr: &str,
    meta: &VideoMeta,
) -> Result<Timeline> {
    if !(meta.fps > 0.0) || meta.frame_count == 0 {
        return Err(Error::Config(format!(
            "video {} needs fps > 0 and frame_count > 0",
            meta.video_id
        )));
    }
    let mut slots: BTreeMap<u64, Slot> = BTreeMap::new();
    let range_err = |source: &str, line: usize, idx: u64| Error::Ingest {
        source_name: format!("{source} for {}", meta.video_id),
        line,
        message: format!("frame_index {idx} outside 0..{}", meta.frame_count),
    };
    let dup_err = |source: &str, line: usize, idx: u64| Error::Ingest {
        source_name: format!("{source} for {}", meta.video_id),
        line,
        message: format!("duplicate frame_index {idx}"),
    };

    let mut seen = std::collections::HashSet::new();
    for l in detections {
        if l.frame_index >= meta.frame_count {
            return Err(range_err("detections", l.line, l.frame_index));
        }
        if !seen.insert(l.frame_index) {
            return Err(dup_err("detections", l.line, l.frame_index));
        }
        let slot = slots.entry(l.frame_index).or_default();
        slot.t = l.t;
        slot.detections = l.detections.clone();
    }
    seen.clear();
    for l in ocr {
        if l.frame_index >= meta.frame_count {
            return Err(range_err("ocr", l.line, l.frame_index));
        }
        if !seen.insert(l.frame_index) {
            return Err(dup_err("ocr", l.line, l.frame_index));
        }
        let slot = slots.entry(l.frame_index).or_default();
        if slot.t.is_none() {
            slot.t = l.t;
        }
        slot.ocr = l.texts.clone();
    }

    let records: Vec<FrameRecord> = slots
        .into_iter()
        .map(|(frame_index, s)| FrameRecord {
            frame_index,
            t: s.t.unwrap_or(frame_index as f64 / meta.fps),
            detections: s.detections,
            ocr: s.ocr,
        })
        .collect();

    for pair in records.windows(2) {
        if pair[1].t <= pair[0].t {
            return Err(Error::Ingest {
                source_name: format!("streams for {}", meta.video_id),
                line: 0,
                message: format!(
                    "timestamp {} at frame {} does not increase past {} at frame {}",
                    pair[1].t, pair[1].frame_index, pair[0].t, pair[0].frame_index
                ),
            });
        }
    }

    Ok(Timeline {
        video_id: meta.video_id.clone(),
        fps: meta.fps,
        frame_count: meta.frame_count,
        duration_s: meta.duration_s,
        records,
        asr: asr.to_string(),
    })
}

/// A run of consecutive timeline records handed to the localizer in one prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a> {
    pub window_index: usize,
    pub records: &'a [FrameRecord],
}

pub fn partition_windows(tl: &Timeline, size: usize) -> Result<Vec<Window<'_>>> {
    if size == 0 {
        return Err(Error::Config("window size must be at least 1".into()));
    }
    Ok(tl
        .records
        .chunks(size)
        .enumerate()
        .map(|(window_index, records)| Window {
            window_index,
            records,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SerializeOptions {
    pub emit_threshold: f64,
}

impl Default for SerializeOptions {
    fn default() -> Self {
        Self {
            emit_threshold: DEFAULT_EMIT_THRESHOLD,
        }
    }
}

/// Labels at or above the emit threshold as `(label, count)`, most frequent first.
pub fn label_counts(rec: &FrameRecord, opts: &SerializeOptions) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in rec
        .detections
        .iter()
        .filter(|d| d.confidence >= opts.emit_threshold)
    {
        *counts.entry(d.label.as_str()).or_default() += 1;
    }
    let mut v: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(l, c)| (l.to_string(), c))
        .collect();
    // BTreeMap already gives alphabetical order; the stable sort keeps it for ties.
    v.sort_by_key(|e| std::cmp::Reverse(e.1));
    v
}

fn escape_ocr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '⏐' => out.push_str("\\⏐"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

/// Renders one record as a single prompt line, e.g.
/// `t=45.0s | objects: person×2, tv×1 | text: "BREAKING ⏐ Results 52%"`.
pub fn serialize_record(rec: &FrameRecord, opts: &SerializeOptions) -> String {
    let labels = label_counts(rec, opts);
    let objects = if labels.is_empty() {
        "-".to_string()
    } else {
        labels
            .iter()
            .map(|(l, c)| format!("{l}×{c}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let text = if rec.ocr.is_empty() {
        "-".to_string()
    } else {
        let joined = rec
            .ocr
            .iter()
            .map(|s| escape_ocr(&s.text))
            .collect::<Vec<_>>()
            .join(OCR_SEPARATOR);
        format!("\"{joined}\"")
    };
    format!(
        "t={}s | objects: {objects} | text: {text}",
        format_decisecond(rec.decisecond())
    )
}

pub fn serialize_window(w: &Window<'_>, opts: &SerializeOptions) -> String {
    w.records
        .iter()
        .map(|r| serialize_record(r, opts))
        .collect::<Vec<_>>()
        .join("\n")
}
