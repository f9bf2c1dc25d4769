//! Synthetic three-video topic on disk plus helpers for driving the binary.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

pub const CLAIM: &str = "The election night overlay showed a 52% result.";
pub const PLANTED_OCR: &str = "Results 52%";
pub const FPS: f64 = 10.0;
pub const DURATION_S: u64 = 60;
pub const FRAME_COUNT: u64 = 600;
pub const VIDEOS: [&str; 3] = ["v1", "v2", "v3"];

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest: PathBuf,
    pub text_rules: PathBuf,
    pub vision_rules: PathBuf,
    pub gold: PathBuf,
}

#[derive(Clone, Copy)]
pub struct FixtureOptions {
    /// Which videos carry the planted overlay at t=45.0s.
    pub planted: [bool; 3],
    /// Write detection and OCR files with no records at all.
    pub empty_timelines: bool,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            planted: [true, true, false],
            empty_timelines: false,
        }
    }
}

impl Fixture {
    pub fn new() -> Self {
        Self::with(FixtureOptions::default())
    }

    pub fn with(opts: FixtureOptions) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut videos = Vec::new();
        for (vi, id) in VIDEOS.iter().enumerate() {
            let planted = opts.planted[vi];
            let mut det = String::new();
            let mut ocr = String::new();
            if !opts.empty_timelines {
                for s in 0..DURATION_S {
                    let idx = s * 10;
                    let mut dets = vec![json!({"label": "person", "confidence": 0.9, "bbox": [0, 0, 50, 100]})];
                    if s % 5 == 0 {
                        dets.push(json!({"label": "car", "confidence": 0.2, "bbox": [60, 0, 90, 40]}));
                    }
                    if planted && s == 45 {
                        dets.push(json!({"label": "tv", "confidence": 0.8, "bbox": [10, 10, 300, 200]}));
                    }
                    det.push_str(&json!({"frame_index": idx, "t": s as f64, "detections": dets}).to_string());
                    det.push('\n');
                }
                for s in (5..DURATION_S).step_by(15) {
                    let texts = vec![json!({"text": format!("{id} live"), "confidence": 0.9})];
                    ocr.push_str(&json!({"frame_index": s * 10, "t": s as f64, "texts": texts}).to_string());
                    ocr.push('\n');
                }
                if planted {
                    let texts = vec![
                        json!({"text": "BREAKING", "confidence": 0.95}),
                        json!({"text": PLANTED_OCR, "confidence": 0.93}),
                    ];
                    ocr.push_str(&json!({"frame_index": 450, "t": 45.0, "texts": texts}).to_string());
                    ocr.push('\n');
                }
            }
            std::fs::write(root.join(format!("{id}.det.jsonl")), det).unwrap();
            std::fs::write(root.join(format!("{id}.ocr.jsonl")), ocr).unwrap();
            std::fs::write(
                root.join(format!("{id}.asr.txt")),
                format!("Good evening, this is the {id} evening bulletin on the national vote."),
            )
            .unwrap();
            let frames = root.join(format!("{id}_frames"));
            std::fs::create_dir(&frames).unwrap();
            for i in 0..FRAME_COUNT {
                std::fs::write(frames.join(format!("{i:06}.jpg")), b"").unwrap();
            }
            videos.push(json!({
                "video_id": id,
                "fps": FPS,
                "frame_count": FRAME_COUNT,
                "duration_s": DURATION_S as f64,
                "detections_path": format!("{id}.det.jsonl"),
                "ocr_path": format!("{id}.ocr.jsonl"),
                "asr_path": format!("{id}.asr.txt"),
                "frames_dir": format!("{id}_frames"),
            }));
        }
        let gold = root.join("gold.json");
        std::fs::write(&gold, json!([{"claim": CLAIM, "citations": ["v1", "v2"]}]).to_string()).unwrap();
        let manifest = root.join("manifest.json");
        std::fs::write(
            &manifest,
            serde_json::to_string_pretty(&json!({
                "topic_id": "election",
                "query": "What did the broadcast report about the vote share?",
                "persona": "A journalist checking election night coverage",
                "videos": videos,
                "gold_path": "gold.json",
            }))
            .unwrap(),
        )
        .unwrap();

        let selection = json!({"selected": [{"t": 45.0, "objects": ["tv"], "ocr": [PLANTED_OCR], "reason": "vote share overlay"}]});
        let text_rules = root.join("text_rules.json");
        std::fs::write(
            &text_rules,
            serde_json::to_string_pretty(&json!([
                {"match_substring": "GROUNDING SUMMARY", "response": "A broadcast overlay reports a 52% vote share."},
                {"match_substring": "SAME PROPOSITION", "response": "yes"},
                {"match_substring": PLANTED_OCR, "response": selection.to_string()},
                {"default": "{\"selected\": []}"},
            ]))
            .unwrap(),
        )
        .unwrap();
        let vision_rules = root.join("vision_rules.json");
        std::fs::write(
            &vision_rules,
            serde_json::to_string_pretty(&json!([
                {"match_substring": PLANTED_OCR, "response": json!([{"claim": CLAIM, "frames": [450]}]).to_string()},
                {"default": "[]"},
            ]))
            .unwrap(),
        )
        .unwrap();
        Fixture {
            dir,
            manifest,
            text_rules,
            vision_rules,
            gold,
        }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root().join(name)
    }

    pub fn topic_dir(&self, run: &str) -> PathBuf {
        self.run_dir(run).join("election")
    }

    /// Arguments shared by every stage subcommand.
    pub fn stage_args(&self, run: &str) -> Vec<String> {
        vec![
            "--manifest".into(),
            self.manifest.display().to_string(),
            "--run-dir".into(),
            self.run_dir(run).display().to_string(),
            "--backend-text-chat".into(),
            format!("mock:{}", self.text_rules.display()),
            "--backend-vision-chat".into(),
            format!("mock:{}", self.vision_rules.display()),
            "--backend-embed".into(),
            "mock".into(),
            "--backend-entail".into(),
            "mock".into(),
        ]
    }

    pub fn stage(&self, cmd: &str, run: &str, extra: &[&str]) -> Output {
        let mut args = vec![cmd.to_string()];
        args.extend(self.stage_args(run));
        args.extend(extra.iter().map(|s| s.to_string()));
        vidground(&args)
    }
}

pub fn vidground<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vidground"));
    cmd.args(args);
    for role in ["TEXT_CHAT", "VISION_CHAT", "EMBED", "ENTAIL"] {
        cmd.env_remove(format!("VIDGROUND_{role}_URL"));
    }
    cmd.output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every artifact under a topic directory, keyed by relative path. The call
/// transcript carries latencies and is left out.
pub fn artifacts(topic_dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else if p.file_name().unwrap() != "transcript.jsonl" {
                let rel = p.strip_prefix(base).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(topic_dir, topic_dir, &mut out);
    out
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}
