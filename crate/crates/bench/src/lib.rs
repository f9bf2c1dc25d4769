//! Synthetic inputs shared by the benchmarks.

use vidground_core::localizer::SelectedFrame;
use vidground_core::timeline::{Detection, FrameRecord, OcrSpan, Timeline};
use vidground_core::{Claim, EvidenceSet};

/// A timeline sampled at 1 record per second with a few objects and an OCR
/// line every tenth record.
pub fn timeline(records: usize, fps: f64) -> Timeline {
    let recs = (0..records)
        .map(|i| {
            let frame_index = (i as f64 * fps) as u64;
            FrameRecord {
                frame_index,
                t: frame_index as f64 / fps,
                detections: (0..i % 4)
                    .map(|k| Detection {
                        label: ["person", "car", "tv"][k % 3].to_string(),
                        confidence: 0.5 + 0.1 * k as f64,
                        bbox: [0.0, 0.0, 10.0, 10.0],
                    })
                    .collect(),
                ocr: if i % 10 == 0 {
                    vec![OcrSpan {
                        text: format!("Results {}%", i % 100),
                        confidence: 0.9,
                        bbox: None,
                    }]
                } else {
                    Vec::new()
                },
            }
        })
        .collect();
    Timeline {
        video_id: "bench".into(),
        fps,
        frame_count: (records as f64 * fps) as u64 + 1,
        duration_s: records as f64,
        records: recs,
        asr: String::new(),
    }
}

/// `n` selections spread over `[0, duration_s)`.
pub fn evidence(n: usize, duration_s: f64) -> EvidenceSet {
    EvidenceSet {
        video_id: "bench".into(),
        frames: (0..n)
            .map(|i| SelectedFrame {
                t_s: (i as f64 * 7.3) % duration_s,
                window_index: 0,
                supporting_objects: vec!["person".into(); i % 3],
                supporting_ocr: Vec::new(),
                rationale: String::new(),
            })
            .collect(),
        summary: String::new(),
    }
}

/// Claims over a small vocabulary so that some of them cluster.
pub fn claims(n: usize) -> Vec<Claim> {
    let subjects = ["The flood", "Storm Daniel", "The dam", "Rescuers", "Officials"];
    let facts = ["killed 12 people", "hit Derna", "collapsed overnight", "arrived from Egypt", "opened shelters"];
    (0..n)
        .map(|i| {
            let video = format!("v{}", i % 7);
            Claim {
                claim_id: format!("{video}#{:03}", i / 7),
                video_id: video,
                text: format!("{} {}.", subjects[i % 5], facts[(i / 5) % 5]),
                evidence_frames: Vec::new(),
            }
        })
        .collect()
}
