//! Per-topic corpus manifest: loading and validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::localizer::QueryContext;
use crate::timeline::VideoMeta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub fps: f64,
    pub frame_count: u64,
    pub duration_s: f64,
    pub detections_path: PathBuf,
    pub ocr_path: PathBuf,
    #[serde(default)]
    pub asr_path: Option<PathBuf>,
    pub frames_dir: PathBuf,
}

impl VideoEntry {
    pub fn meta(&self) -> VideoMeta {
        VideoMeta {
            video_id: self.video_id.clone(),
            fps: self.fps,
            frame_count: self.frame_count,
            duration_s: self.duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub topic_id: String,
    pub query: String,
    #[serde(default)]
    pub persona: String,
    pub videos: Vec<VideoEntry>,
    #[serde(default)]
    pub gold_path: Option<PathBuf>,
}

impl Manifest {
    pub fn context(&self) -> QueryContext {
        QueryContext::new(self.query.clone(), self.persona.clone())
    }

    /// Makes every path absolute against `base`.
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for v in &mut self.videos {
            fix(&mut v.detections_path);
            fix(&mut v.ocr_path);
            if let Some(a) = v.asr_path.as_mut() {
                fix(a);
            }
            fix(&mut v.frames_dir);
        }
        if let Some(g) = self.gold_path.as_mut() {
            fix(g);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestReport {
    pub violations: Vec<String>,
    /// Present when there are no violations; paths resolved.
    pub manifest: Option<Manifest>,
}

impl ManifestReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn require_str<'a>(obj: &'a Value, key: &str, at: &str, out: &mut Vec<String>, nonempty: bool) -> Option<&'a str> {
    match obj.get(key) {
        None | Some(Value::Null) => {
            out.push(format!("{at}: missing field `{key}`"));
            None
        }
        Some(Value::String(s)) => {
            if nonempty && s.trim().is_empty() {
                out.push(format!("{at}: `{key}` is empty"));
            }
            Some(s)
        }
        Some(_) => {
            out.push(format!("{at}: `{key}` must be a string"));
            None
        }
    }
}

fn require_num(obj: &Value, key: &str, at: &str, out: &mut Vec<String>) -> Option<f64> {
    match obj.get(key) {
        None | Some(Value::Null) => {
            out.push(format!("{at}: missing field `{key}`"));
            None
        }
        Some(Value::Number(n)) => n.as_f64(),
        Some(_) => {
            out.push(format!("{at}: `{key}` must be a number"));
            None
        }
    }
}

fn check_video(v: &Value, i: usize, base: &Path, out: &mut Vec<String>) -> Option<String> {
    if !v.is_object() {
        out.push(format!("videos[{i}]: must be an object"));
        return None;
    }
    let id = require_str(v, "video_id", &format!("videos[{i}]"), out, true).map(str::to_string);
    let at = match &id {
        Some(id) => format!("video {id}"),
        None => format!("videos[{i}]"),
    };
    let fps = require_num(v, "fps", &at, out);
    if let Some(f) = fps {
        if !(f > 0.0) {
            out.push(format!("{at}: fps must be positive, got {f}"));
        }
    }
    let frame_count = match v.get("frame_count") {
        Some(Value::Number(n)) => match n.as_u64() {
            Some(0) | None => {
                out.push(format!("{at}: frame_count must be a positive integer, got {n}"));
                None
            }
            Some(c) => Some(c),
        },
        None | Some(Value::Null) => {
            out.push(format!("{at}: missing field `frame_count`"));
            None
        }
        Some(_) => {
            out.push(format!("{at}: `frame_count` must be a number"));
            None
        }
    };
    let duration = require_num(v, "duration_s", &at, out);
    if let Some(d) = duration {
        if d < 0.0 {
            out.push(format!("{at}: duration_s must not be negative, got {d}"));
        }
    }
    if let (Some(f), Some(c), Some(d)) = (fps, frame_count, duration) {
        if f > 0.0 && (d * f - c as f64).abs() > f {
            out.push(format!(
                "{at}: duration_s {d} × fps {f} = {} disagrees with frame_count {c} by more than {f}",
                d * f
            ));
        }
    }
    let mut check_path = |key: &str, dir: bool, optional: bool| {
        if optional && matches!(v.get(key), None | Some(Value::Null)) {
            return;
        }
        if let Some(p) = require_str(v, key, &at, out, true) {
            if p.trim().is_empty() {
                return;
            }
            let full = base.join(p);
            let ok = if dir { full.is_dir() } else { full.is_file() };
            if !ok {
                let kind = if dir { "directory" } else { "file" };
                out.push(format!("{at}: {key} {kind} not found: {}", full.display()));
            }
        }
    };
    check_path("detections_path", false, false);
    check_path("ocr_path", false, false);
    check_path("asr_path", false, true);
    check_path("frames_dir", true, false);
    id
}

/// Checks a manifest document and reports every problem found.
pub fn validate_manifest_value(value: &Value, base: &Path) -> ManifestReport {
    let mut out = Vec::new();
    if !value.is_object() {
        return ManifestReport {
            violations: vec!["manifest must be a JSON object".into()],
            manifest: None,
        };
    }
    require_str(value, "topic_id", "manifest", &mut out, true);
    require_str(value, "query", "manifest", &mut out, true);
    if !matches!(value.get("persona"), None | Some(Value::Null) | Some(Value::String(_))) {
        out.push("manifest: `persona` must be a string".into());
    }
    if let Some(g) = value.get("gold_path").filter(|g| !g.is_null()) {
        match g.as_str() {
            Some(p) if base.join(p).is_file() => {}
            Some(p) => out.push(format!("manifest: gold_path file not found: {}", base.join(p).display())),
            None => out.push("manifest: `gold_path` must be a string".into()),
        }
    }
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    match value.get("videos") {
        Some(Value::Array(videos)) if !videos.is_empty() => {
            for (i, v) in videos.iter().enumerate() {
                if let Some(id) = check_video(v, i, base, &mut out) {
                    *ids.entry(id).or_default() += 1;
                }
            }
        }
        Some(Value::Array(_)) => out.push("manifest: `videos` is empty".into()),
        None | Some(Value::Null) => out.push("manifest: missing field `videos`".into()),
        Some(_) => out.push("manifest: `videos` must be a list".into()),
    }
    for (id, n) in &ids {
        if *n > 1 {
            out.push(format!("duplicate video_id {id} ({n} entries)"));
        }
    }
    if !out.is_empty() {
        return ManifestReport {
            violations: out,
            manifest: None,
        };
    }
    match serde_json::from_value::<Manifest>(value.clone()) {
        Ok(mut m) => {
            m.resolve(base);
            ManifestReport {
                violations: Vec::new(),
                manifest: Some(m),
            }
        }
        Err(e) => ManifestReport {
            violations: vec![format!("manifest: {e}")],
            manifest: None,
        },
    }
}

/// Reads and validates a manifest file. Unreadable files are an I/O error;
/// everything else lands in the report.
pub fn validate_manifest(path: &Path) -> Result<ManifestReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let value: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            return Ok(ManifestReport {
                violations: vec![format!("{}: not valid JSON: {e}", path.display())],
                manifest: None,
            })
        }
    };
    Ok(validate_manifest_value(&value, base))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let report = validate_manifest(path)?;
    match report.manifest {
        Some(m) => Ok(m),
        None => Err(Error::Validation(report.violations)),
    }
}
