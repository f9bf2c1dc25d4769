//! Stage runner: per-topic artifacts on disk, content-hash caching, resume.
//!
//! Layout under `<run_dir>/<topic_id>/`:
//!
//! ```text
//! timeline/<video>.json   evidence/<video>.json   plans/<video>.json   claims/<video>.json
//! consolidated.json       consolidate.stage.json
//! report.json             evaluate.stage.json
//! transcript.jsonl
//! ```
//!
//! Per-video files wrap their output in a [`StageArtifact`] envelope that
//! records the input hash. `consolidated.json` and `report.json` stay plain
//! and keep their input hash in the `.stage.json` file next to them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backend::{BackendProfile, Client, Decoding, MockRuleSet, Role, TranscriptLog};
use crate::consolidate::{consolidate, ConsolidatedClaim, Consolidation, ConsolidationBackends, ConsolidationMode, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::eval::{load_gold, round3, score, EvalReport};
use crate::frame_plan::{build_frame_plan, BudgetPolicy, FramePlan, PlanMeta};
use crate::generator::{assemble_fusion_prompt, build_annotations, generate_claims, Generation};
use crate::localizer::{localize_video, EvidenceSet, Localization, DEFAULT_WINDOW_SIZE};
use crate::manifest::{load_manifest, Manifest, VideoEntry};
use crate::timeline::{build_timeline, parse_detections, parse_ocr, SerializeOptions, Timeline, DEFAULT_EMIT_THRESHOLD};

/// Bumped when a stage's output format or logic changes, so old caches miss.
const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Localize,
    Plan,
    Generate,
    Consolidate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Localize,
        Stage::Plan,
        Stage::Generate,
        Stage::Consolidate,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Localize => "localize",
            Stage::Plan => "plan",
            Stage::Generate => "generate",
            Stage::Consolidate => "consolidate",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn needs(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Localize => &[Stage::Ingest],
            Stage::Plan => &[Stage::Localize],
            Stage::Generate => &[Stage::Ingest, Stage::Localize, Stage::Plan],
            Stage::Consolidate => &[Stage::Generate],
            Stage::Evaluate => &[Stage::Consolidate],
        }
    }

    fn video_dir(self) -> Option<&'static str> {
        match self {
            Stage::Ingest => Some("timeline"),
            Stage::Localize => Some("evidence"),
            Stage::Plan => Some("plans"),
            Stage::Generate => Some("claims"),
            Stage::Consolidate | Stage::Evaluate => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

#[derive(Debug, Clone)]
pub struct BackendSpec {
    pub profile: BackendProfile,
    pub mock_rules: Option<MockRuleSet>,
}

impl BackendSpec {
    pub fn mock(role: Role, rules: MockRuleSet) -> Self {
        Self {
            profile: BackendProfile::mock(role),
            mock_rules: Some(rules),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendSpecs {
    pub text_chat: BackendSpec,
    pub vision_chat: BackendSpec,
    pub embed: BackendSpec,
    pub entail: BackendSpec,
}

impl Default for BackendSpecs {
    fn default() -> Self {
        Self {
            text_chat: BackendSpec::mock(Role::TextChat, MockRuleSet::default()),
            vision_chat: BackendSpec::mock(Role::VisionChat, MockRuleSet::default()),
            embed: BackendSpec::mock(Role::Embed, MockRuleSet::default()),
            entail: BackendSpec::mock(Role::Entail, MockRuleSet::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub run_dir: PathBuf,
    pub window_size: usize,
    pub emit_threshold: f64,
    pub policy: BudgetPolicy,
    pub tau: f64,
    pub agg: ConsolidationMode,
    pub backends: BackendSpecs,
    /// Worker threads for per-video fan-out.
    pub jobs: usize,
    pub seed: u64,
    pub max_output_tokens: u32,
    /// Pull in upstream stages whose artifacts are missing instead of failing.
    pub resume: bool,
    /// Overrides the manifest's gold file.
    pub gold_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, run_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest_path: manifest_path.into(),
            run_dir: run_dir.into(),
            window_size: DEFAULT_WINDOW_SIZE,
            emit_threshold: DEFAULT_EMIT_THRESHOLD,
            policy: BudgetPolicy::default(),
            tau: DEFAULT_TAU,
            agg: ConsolidationMode::EmbedSim,
            backends: BackendSpecs::default(),
            jobs: 4,
            seed: 0,
            max_output_tokens: Decoding::default().max_output_tokens,
            resume: false,
            gold_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.window_size == 0 {
            problems.push("window size must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.emit_threshold) {
            problems.push(format!("emit threshold must be in [0, 1], got {}", self.emit_threshold));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            problems.push(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if self.jobs == 0 {
            problems.push("jobs must be positive".to_string());
        }
        if let Err(e) = self.policy.validate() {
            problems.push(e.to_string());
        }
        if let Some(g) = &self.gold_path {
            if !g.is_file() {
                problems.push(format!("gold file not found: {}", g.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn decoding(&self) -> Decoding {
        Decoding {
            max_output_tokens: self.max_output_tokens,
            temperature: 0.0,
            seed: Some(self.seed),
        }
    }
}

/// Envelope for per-video stage outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageArtifact<T> {
    pub stage: Stage,
    pub key: String,
    pub input_hash: String,
    pub output: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageStamp {
    stage: Stage,
    input_hash: String,
    output_hash: String,
    #[serde(default)]
    details: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Computed,
    Cached,
    /// Read from disk as an upstream input without being part of the run.
    Loaded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub status: Status,
    pub input_hash: String,
    pub output_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub elapsed_ms: u128,
    pub records: Vec<StageRecord>,
}

impl StageSummary {
    pub fn count(&self, status: Status) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }

    /// True when nothing in the stage had to be recomputed.
    pub fn all_cached(&self) -> bool {
        self.records.iter().all(|r| r.status != Status::Computed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub topic_id: String,
    pub topic_dir: PathBuf,
    pub stages: Vec<StageSummary>,
    pub backend_calls: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    pub report: Option<EvalReport>,
}

impl RunSummary {
    pub fn stage(&self, stage: Stage) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn total_backend_calls(&self) -> u64 {
        self.backend_calls.values().sum()
    }

    pub fn render(&self) -> String {
        let mut out = format!("topic {} ({})\n", self.topic_id, self.topic_dir.display());
        for s in &self.stages {
            let state = if s.records.iter().all(|r| r.status == Status::Loaded) {
                "loaded".to_string()
            } else if s.all_cached() {
                "cached".to_string()
            } else {
                format!("{} computed, {} cached", s.count(Status::Computed), s.count(Status::Cached))
            };
            out.push_str(&format!("  {:<12} {:<28} {:>7} ms\n", s.stage.as_str(), state, s.elapsed_ms));
        }
        let calls: Vec<String> = self.backend_calls.iter().map(|(r, n)| format!("{r}={n}")).collect();
        out.push_str(&format!("  backend calls: {}\n", calls.join(" ")));
        for w in &self.warnings {
            out.push_str(&format!("  warning: {w}\n"));
        }
        if let Some(r) = &self.report {
            out.push_str(&format!(
                "  {}: InfoF1 {:.3}  CiteF1 {:.3}  Avg F1 {:.3}\n",
                r.label,
                round3(r.info_f1),
                round3(r.cite_f1),
                round3(r.avg_f1)
            ));
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_json(v: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("hash inputs serialize"))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_pretty(v: &impl Serialize) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("artifacts serialize");
    bytes.push(b'\n');
    bytes
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

fn read_file_or_empty(path: Option<&Path>) -> Result<String> {
    match path {
        None => Ok(String::new()),
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e)),
    }
}

struct Clients {
    text_chat: Client,
    vision_chat: Client,
    embed: Client,
    entail: Client,
}

impl Clients {
    fn build(cfg: &RunConfig, transcript: Arc<TranscriptLog>) -> Result<Self> {
        let make = |spec: &BackendSpec| -> Result<Client> {
            Ok(Client::from_profile(spec.profile.clone(), spec.mock_rules.clone())?
                .with_transcript(transcript.clone())
                .with_decoding(cfg.decoding()))
        };
        Ok(Self {
            text_chat: make(&cfg.backends.text_chat)?,
            vision_chat: make(&cfg.backends.vision_chat)?,
            embed: make(&cfg.backends.embed)?,
            entail: make(&cfg.backends.entail)?,
        })
    }

    fn calls(&self) -> BTreeMap<String, u64> {
        [&self.text_chat, &self.vision_chat, &self.embed, &self.entail]
            .into_iter()
            .map(|c| (c.profile().role.as_str().to_string(), c.calls()))
            .collect()
    }
}

/// Output of a per-video stage plus the hash downstream stages key on.
#[derive(Clone)]
struct Produced<T> {
    value: T,
    hash: String,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    manifest: Manifest,
    topic_dir: PathBuf,
    clients: Clients,
    warnings: std::sync::Mutex<Vec<String>>,
}

impl Runner<'_> {
    fn video_path(&self, stage: Stage, video_id: &str) -> PathBuf {
        self.topic_dir
            .join(stage.video_dir().expect("per-video stage"))
            .join(format!("{video_id}.json"))
    }

    fn consolidated_path(&self) -> PathBuf {
        self.topic_dir.join("consolidated.json")
    }

    fn report_path(&self) -> PathBuf {
        self.topic_dir.join("report.json")
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.topic_dir.join(format!("{stage}.stage.json"))
    }

    fn outputs_present(&self, stage: Stage) -> bool {
        match stage {
            Stage::Consolidate => self.consolidated_path().is_file(),
            Stage::Evaluate => self.report_path().is_file(),
            _ => self
                .manifest
                .videos
                .iter()
                .all(|v| self.video_path(stage, &v.video_id).is_file()),
        }
    }

    fn warn(&self, msg: String) {
        tracing::warn!("{msg}");
        self.warnings.lock().unwrap().push(msg);
    }

    /// Runs (or reuses) one per-video stage for every video.
    fn per_video<T, H, F>(&self, stage: Stage, input_hash: H, compute: F) -> Result<(Vec<Produced<T>>, StageSummary)>
    where
        T: Serialize + DeserializeOwned + Send,
        H: Fn(&VideoEntry) -> Result<String> + Sync,
        F: Fn(&VideoEntry) -> Result<T> + Sync,
    {
        let start = Instant::now();
        let results: Vec<Result<(Produced<T>, StageRecord)>> = self
            .manifest
            .videos
            .par_iter()
            .map(|v| {
                let path = self.video_path(stage, &v.video_id);
                let input_hash = input_hash(v)?;
                if path.is_file() {
                    if let Ok(a) = read_json::<StageArtifact<T>>(&path) {
                        if a.input_hash == input_hash && a.stage == stage {
                            let hash = hash_json(&a.output);
                            return Ok((
                                Produced { value: a.output, hash },
                                StageRecord {
                                    key: v.video_id.clone(),
                                    status: Status::Cached,
                                    input_hash,
                                    output_path: path,
                                },
                            ));
                        }
                    }
                }
                let output = compute(v)?;
                let artifact = StageArtifact {
                    stage,
                    key: v.video_id.clone(),
                    input_hash: input_hash.clone(),
                    output,
                };
                write_atomic(&path, &to_pretty(&artifact))?;
                let hash = hash_json(&artifact.output);
                Ok((
                    Produced {
                        value: artifact.output,
                        hash,
                    },
                    StageRecord {
                        key: v.video_id.clone(),
                        status: Status::Computed,
                        input_hash,
                        output_path: path,
                    },
                ))
            })
            .collect();
        let mut produced = Vec::new();
        let mut records = Vec::new();
        for r in results {
            let (p, rec) = r?;
            produced.push(p);
            records.push(rec);
        }
        Ok((
            produced,
            StageSummary {
                stage,
                elapsed_ms: start.elapsed().as_millis(),
                records,
            },
        ))
    }

    /// Reads a per-video stage's outputs without running it.
    fn load_per_video<T: Serialize + DeserializeOwned>(&self, stage: Stage) -> Result<(Vec<Produced<T>>, StageSummary)> {
        let start = Instant::now();
        let mut produced = Vec::new();
        let mut records = Vec::new();
        for v in &self.manifest.videos {
            let path = self.video_path(stage, &v.video_id);
            if !path.is_file() {
                return Err(Error::Dependency {
                    stage: stage.to_string(),
                    missing: path,
                });
            }
            let a: StageArtifact<T> = read_json(&path)?;
            let hash = hash_json(&a.output);
            records.push(StageRecord {
                key: v.video_id.clone(),
                status: Status::Loaded,
                input_hash: a.input_hash,
                output_path: path,
            });
            produced.push(Produced { value: a.output, hash });
        }
        Ok((
            produced,
            StageSummary {
                stage,
                elapsed_ms: start.elapsed().as_millis(),
                records,
            },
        ))
    }

    fn index_of(&self, video_id: &str) -> usize {
        self.manifest
            .videos
            .iter()
            .position(|v| v.video_id == video_id)
            .expect("video from manifest")
    }

    fn ingest_hash(v: &VideoEntry) -> Result<String> {
        let det = std::fs::read(&v.detections_path).map_err(|e| Error::io(&v.detections_path, e))?;
        let ocr = std::fs::read(&v.ocr_path).map_err(|e| Error::io(&v.ocr_path, e))?;
        let asr = read_file_or_empty(v.asr_path.as_deref())?;
        Ok(hash_json(&json!({
            "stage": "ingest",
            "version": ARTIFACT_VERSION,
            "meta": v.meta(),
            "detections": sha256_hex(&det),
            "ocr": sha256_hex(&ocr),
            "asr": sha256_hex(asr.as_bytes()),
        })))
    }

    fn ingest(v: &VideoEntry) -> Result<Timeline> {
        let det_text = std::fs::read_to_string(&v.detections_path).map_err(|e| Error::io(&v.detections_path, e))?;
        let ocr_text = std::fs::read_to_string(&v.ocr_path).map_err(|e| Error::io(&v.ocr_path, e))?;
        let asr = read_file_or_empty(v.asr_path.as_deref())?;
        let dets = parse_detections(&det_text, &v.detections_path.display().to_string())?;
        let ocr = parse_ocr(&ocr_text, &v.ocr_path.display().to_string())?;
        build_timeline(&dets, &ocr, &asr, &v.meta())
    }
}

pub fn consolidated_claims(path: &Path) -> Result<Vec<ConsolidatedClaim>> {
    read_json(path)
}

/// Stages to run for a request, with upstream stages added when resuming.
fn plan_stages(requested: &BTreeSet<Stage>, resume: bool, present: impl Fn(Stage) -> bool) -> (BTreeSet<Stage>, BTreeSet<Stage>) {
    let mut run = requested.clone();
    loop {
        let loads: BTreeSet<Stage> = run
            .iter()
            .flat_map(|s| s.needs().iter().copied())
            .filter(|s| !run.contains(s))
            .collect();
        let missing: Vec<Stage> = loads.iter().copied().filter(|s| !present(*s)).collect();
        if resume && !missing.is_empty() {
            run.extend(missing);
            continue;
        }
        return (run, loads);
    }
}

/// Runs the requested stages for the manifest's topic.
pub fn run_topic(cfg: &RunConfig, stages: &[Stage]) -> Result<RunSummary> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest_path)?;
    let topic_dir = cfg.run_dir.join(&manifest.topic_id);
    std::fs::create_dir_all(&topic_dir).map_err(|e| Error::io(&topic_dir, e))?;
    let transcript_path = topic_dir.join("transcript.jsonl");
    let transcript = Arc::new(TranscriptLog::open(&transcript_path).map_err(|e| Error::io(&transcript_path, e))?);
    let runner = Runner {
        cfg,
        clients: Clients::build(cfg, transcript)?,
        manifest,
        topic_dir,
        warnings: std::sync::Mutex::new(Vec::new()),
    };
    let requested: BTreeSet<Stage> = stages.iter().copied().collect();
    if requested.is_empty() {
        return Err(Error::Argument("no stages requested".into()));
    }
    let (run, loads) = plan_stages(&requested, cfg.resume, |s| runner.outputs_present(s));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut summary = RunSummary {
        topic_id: runner.manifest.topic_id.clone(),
        topic_dir: runner.topic_dir.clone(),
        stages: Vec::new(),
        backend_calls: BTreeMap::new(),
        warnings: Vec::new(),
        report: None,
    };
    let result = pool.install(|| execute(&runner, &run, &loads, &mut summary));
    summary.backend_calls = runner.clients.calls();
    summary.warnings = std::mem::take(&mut *runner.warnings.lock().unwrap());
    result.map(|()| summary)
}

fn execute(r: &Runner<'_>, run: &BTreeSet<Stage>, loads: &BTreeSet<Stage>, summary: &mut RunSummary) -> Result<()> {
    let cfg = r.cfg;
    let ctx = r.manifest.context();
    let last = *run.iter().max().expect("non-empty");
    let active = |s: Stage| s <= last && (run.contains(&s) || loads.contains(&s));

    let mut timelines: Vec<Produced<Timeline>> = Vec::new();
    if active(Stage::Ingest) {
        let (p, s) = if run.contains(&Stage::Ingest) {
            r.per_video(Stage::Ingest, Runner::ingest_hash, Runner::ingest)?
        } else {
            r.load_per_video(Stage::Ingest)?
        };
        timelines = p;
        summary.stages.push(s);
    }

    let mut localizations: Vec<Produced<Localization>> = Vec::new();
    if active(Stage::Localize) {
        let (p, s) = if run.contains(&Stage::Localize) {
            let opts = SerializeOptions {
                emit_threshold: cfg.emit_threshold,
            };
            let fp = r.clients.text_chat.fingerprint();
            r.per_video(
                Stage::Localize,
                |v| {
                    Ok(hash_json(&json!({
                        "stage": "localize",
                        "version": ARTIFACT_VERSION,
                        "timeline": timelines[r.index_of(&v.video_id)].hash,
                        "window_size": cfg.window_size,
                        "emit_threshold": cfg.emit_threshold,
                        "context": ctx,
                        "backend": fp,
                        "decoding": cfg.decoding(),
                    })))
                },
                |v| {
                    let tl = &timelines[r.index_of(&v.video_id)].value;
                    let loc = localize_video(tl, &ctx, cfg.window_size, &r.clients.text_chat, &opts)?;
                    if loc.skipped_windows > 0 {
                        r.warn(format!("{}: {} localizer window(s) skipped on unparseable replies", v.video_id, loc.skipped_windows));
                    }
                    if loc.summary_fallback {
                        r.warn(format!("{}: grounding summary fell back to extracted text", v.video_id));
                    }
                    Ok(loc)
                },
            )?
        } else {
            r.load_per_video(Stage::Localize)?
        };
        localizations = p;
        summary.stages.push(s);
    }
    let evidence_hash = |i: usize| hash_json(&localizations[i].value.evidence);
    let evidence = |i: usize| -> &EvidenceSet { &localizations[i].value.evidence };

    let mut plans: Vec<Produced<FramePlan>> = Vec::new();
    if active(Stage::Plan) {
        let (p, s) = if run.contains(&Stage::Plan) {
            r.per_video(
                Stage::Plan,
                |v| {
                    Ok(hash_json(&json!({
                        "stage": "plan",
                        "version": ARTIFACT_VERSION,
                        "evidence": evidence_hash(r.index_of(&v.video_id)),
                        "fps": v.fps,
                        "frame_count": v.frame_count,
                        "frames_dir": v.frames_dir,
                        "policy": cfg.policy,
                    })))
                },
                |v| {
                    let meta = PlanMeta {
                        video_id: v.video_id.clone(),
                        fps: v.fps,
                        frame_count: v.frame_count,
                        frames_dir: v.frames_dir.clone(),
                    };
                    let plan = build_frame_plan(evidence(r.index_of(&v.video_id)), &meta, &cfg.policy)?;
                    if !plan.capped_keyframes.is_empty() {
                        r.warn(format!("{}: {} keyframe(s) beyond the cap dropped", v.video_id, plan.capped_keyframes.len()));
                    }
                    Ok(plan)
                },
            )?
        } else {
            r.load_per_video(Stage::Plan)?
        };
        plans = p;
        summary.stages.push(s);
    }

    let mut generations: Vec<Produced<Generation>> = Vec::new();
    if active(Stage::Generate) {
        let (p, s) = if run.contains(&Stage::Generate) {
            let fp = r.clients.vision_chat.fingerprint();
            r.per_video(
                Stage::Generate,
                |v| {
                    let i = r.index_of(&v.video_id);
                    Ok(hash_json(&json!({
                        "stage": "generate",
                        "version": ARTIFACT_VERSION,
                        "plan": plans[i].hash,
                        "evidence": evidence_hash(i),
                        "asr": sha256_hex(timelines[i].value.asr.as_bytes()),
                        "context": ctx,
                        "policy": cfg.policy,
                        "backend": fp,
                        "decoding": cfg.decoding(),
                    })))
                },
                |v| {
                    let i = r.index_of(&v.video_id);
                    let plan = &plans[i].value;
                    let ev = evidence(i);
                    let anns = build_annotations(ev, v.fps, v.frame_count, plan);
                    let req = assemble_fusion_prompt(plan, &ctx, &anns, &ev.summary, &timelines[i].value.asr, &cfg.policy, &cfg.decoding())?;
                    let g = generate_claims(&req, &r.clients.vision_chat, &v.video_id)?;
                    if g.parse_failed {
                        r.warn(format!("{}: claim generation reply unparseable; no claims", v.video_id));
                    }
                    Ok(g)
                },
            )?
        } else {
            r.load_per_video(Stage::Generate)?
        };
        generations = p;
        summary.stages.push(s);
    }

    let mut consolidated: Option<Produced<Vec<ConsolidatedClaim>>> = None;
    if active(Stage::Consolidate) {
        let start = Instant::now();
        let path = r.consolidated_path();
        let stamp_path = r.stamp_path(Stage::Consolidate);
        let (value, status, input_hash) = if run.contains(&Stage::Consolidate) {
            let input_hash = hash_json(&json!({
                "stage": "consolidate",
                "version": ARTIFACT_VERSION,
                "claims": generations.iter().map(|g| &g.hash).collect::<Vec<_>>(),
                "mode": cfg.agg,
                "tau": cfg.tau,
                "chat": r.clients.text_chat.fingerprint(),
                "embed": r.clients.embed.fingerprint(),
                "decoding": cfg.decoding(),
            }));
            match cached_topic_output::<Vec<ConsolidatedClaim>>(&path, &stamp_path, &input_hash) {
                Some(v) => (v, Status::Cached, input_hash),
                None => {
                    let claims: Vec<_> = generations.iter().flat_map(|g| g.value.claims.iter().cloned()).collect();
                    let backends = ConsolidationBackends {
                        chat: &r.clients.text_chat,
                        embed: &r.clients.embed,
                    };
                    let c: Consolidation = consolidate(&claims, cfg.agg, &backends, cfg.tau)?;
                    if c.fell_back {
                        r.warn("llm consolidation reply unparseable; fell back to embed_sim".into());
                    }
                    if c.verify.failures > 0 {
                        r.warn(format!("{} same-proposition check(s) failed and were split", c.verify.failures));
                    }
                    let bytes = to_pretty(&c.claims);
                    write_atomic(&path, &bytes)?;
                    let stamp = StageStamp {
                        stage: Stage::Consolidate,
                        input_hash: input_hash.clone(),
                        output_hash: sha256_hex(&bytes),
                        details: json!({
                            "mode": c.mode,
                            "fell_back": c.fell_back,
                            "clusters_before_verification": c.clusters_before_verification,
                            "verify": c.verify,
                            "repaired_orphans": c.repaired_orphans,
                        }),
                    };
                    write_atomic(&stamp_path, &to_pretty(&stamp))?;
                    (c.claims, Status::Computed, input_hash)
                }
            }
        } else {
            if !path.is_file() {
                return Err(Error::Dependency {
                    stage: Stage::Consolidate.to_string(),
                    missing: path,
                });
            }
            (read_json(&path)?, Status::Loaded, String::new())
        };
        summary.stages.push(StageSummary {
            stage: Stage::Consolidate,
            elapsed_ms: start.elapsed().as_millis(),
            records: vec![StageRecord {
                key: r.manifest.topic_id.clone(),
                status,
                input_hash,
                output_path: path,
            }],
        });
        let hash = hash_json(&value);
        consolidated = Some(Produced { value, hash });
    }

    if active(Stage::Evaluate) {
        let start = Instant::now();
        let consolidated = consolidated.expect("consolidate precedes evaluate");
        let gold_path = cfg
            .gold_path
            .clone()
            .or_else(|| r.manifest.gold_path.clone())
            .ok_or_else(|| Error::Config("evaluate needs a gold file (manifest gold_path or --gold)".into()))?;
        let gold_bytes = std::fs::read(&gold_path).map_err(|e| Error::io(&gold_path, e))?;
        let input_hash = hash_json(&json!({
            "stage": "evaluate",
            "version": ARTIFACT_VERSION,
            "consolidated": consolidated.hash,
            "gold": sha256_hex(&gold_bytes),
            "judge": r.clients.entail.fingerprint(),
        }));
        let path = r.report_path();
        let stamp_path = r.stamp_path(Stage::Evaluate);
        let (report, status) = match cached_topic_output::<EvalReport>(&path, &stamp_path, &input_hash) {
            Some(rep) => (rep, Status::Cached),
            None => {
                let gold = load_gold(&gold_path)?;
                let rep = score(&consolidated.value, &gold, &r.clients.entail)?;
                let bytes = to_pretty(&rep);
                write_atomic(&path, &bytes)?;
                let stamp = StageStamp {
                    stage: Stage::Evaluate,
                    input_hash: input_hash.clone(),
                    output_hash: sha256_hex(&bytes),
                    details: json!({ "gold_path": gold_path }),
                };
                write_atomic(&stamp_path, &to_pretty(&stamp))?;
                (rep, Status::Computed)
            }
        };
        summary.stages.push(StageSummary {
            stage: Stage::Evaluate,
            elapsed_ms: start.elapsed().as_millis(),
            records: vec![StageRecord {
                key: r.manifest.topic_id.clone(),
                status,
                input_hash,
                output_path: path,
            }],
        });
        summary.report = Some(report);
    }
    Ok(())
}

/// A topic-level output is reusable when its stamp matches both the inputs
/// and the bytes currently on disk.
fn cached_topic_output<T: DeserializeOwned>(path: &Path, stamp_path: &Path, input_hash: &str) -> Option<T> {
    let stamp: StageStamp = read_json(stamp_path).ok()?;
    if stamp.input_hash != input_hash {
        return None;
    }
    let bytes = std::fs::read(path).ok()?;
    if sha256_hex(&bytes) != stamp.output_hash {
        return None;
    }
    serde_json::from_slice(&bytes).ok()
}
