//! Hybrid visual input: linearly spaced frames for coverage plus keyframes
//! at the localized evidence timestamps, deduplicated, sorted, and trimmed to
//! the vision model's token budget.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{DEFAULT_CONTEXT_LIMIT, TOKENS_PER_FRAME};
use crate::error::{Error, Result};
use crate::localizer::EvidenceSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    pub n_uniform: usize,
    pub k_max_keyframes: usize,
    pub per_frame_tokens: u64,
    pub context_limit: u64,
    /// Tokens held back for the text part of the prompt (instructions,
    /// query, summary, annotations, transcript).
    pub text_reserve_tokens: u64,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        Self {
            n_uniform: 100,
            k_max_keyframes: 30,
            per_frame_tokens: TOKENS_PER_FRAME,
            context_limit: DEFAULT_CONTEXT_LIMIT,
            text_reserve_tokens: 4096,
        }
    }
}

impl BudgetPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.n_uniform == 0 || self.k_max_keyframes == 0 || self.per_frame_tokens == 0 {
            return Err(Error::Config(
                "n_uniform, k_max_keyframes and per_frame_tokens must be positive".into(),
            ));
        }
        if self.text_reserve_tokens == 0 || self.text_reserve_tokens >= self.context_limit {
            return Err(Error::Config(format!(
                "text reserve {} must be positive and below the context limit {}",
                self.text_reserve_tokens, self.context_limit
            )));
        }
        if self.max_frames() == 0 {
            return Err(Error::Config("budget leaves no room for a single frame".into()));
        }
        Ok(())
    }

    /// Frames that fit next to the text reserve.
    pub fn max_frames(&self) -> usize {
        ((self.context_limit.saturating_sub(self.text_reserve_tokens)) / self.per_frame_tokens) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOrigin {
    Uniform,
    Keyframe,
    Both,
}

impl FrameOrigin {
    pub fn is_keyframe(self) -> bool {
        matches!(self, FrameOrigin::Keyframe | FrameOrigin::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub frame_index: u64,
    pub t: f64,
    pub origin: FrameOrigin,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub video_id: String,
    pub entries: Vec<PlanEntry>,
    pub token_estimate: u64,
    /// Keyframe candidates beyond the cap.
    pub capped_keyframes: Vec<u64>,
    /// Frames removed to meet the token budget, in eviction order.
    pub evicted: Vec<u64>,
}

impl FramePlan {
    pub fn indices(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    pub fn keyframe_indices(&self) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.origin.is_keyframe())
            .map(|e| e.frame_index)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub video_id: String,
    pub fps: f64,
    pub frame_count: u64,
    pub frames_dir: PathBuf,
}

/// `n` indices spread linearly over `[0, frame_count - 1]`, endpoints included.
pub fn uniform_indices(n: usize, frame_count: u64) -> Vec<u64> {
    if n == 0 || frame_count == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    let span = u128::from(frame_count - 1);
    let steps = (n - 1) as u128;
    let mut out: Vec<u64> = (0..n as u128)
        // round(k * span / steps), halves rounded up
        .map(|k| ((2 * k * span + steps) / (2 * steps)) as u64)
        .collect();
    out.dedup();
    out
}

/// Nearest frame index to `t_s`, halves rounded away from zero, clamped to
/// the last frame.
pub fn map_timestamp(t_s: f64, fps: f64, frame_count: u64) -> u64 {
    let last = frame_count.saturating_sub(1);
    let x = t_s * fps;
    if !(x > 0.0) {
        return 0;
    }
    let mut r = x.round();
    if x - x.trunc() == 0.5 {
        // The product may have been rounded onto the half; the residual
        // tells which side the exact value lies on.
        let residual = t_s.mul_add(fps, -x);
        if residual < 0.0 {
            r = x.floor();
        }
    }
    if r >= last as f64 {
        last
    } else {
        r as u64
    }
}

pub fn image_path(frames_dir: &Path, frame_index: u64) -> PathBuf {
    frames_dir.join(format!("{frame_index:06}.jpg"))
}

struct Candidate {
    index: u64,
    score: usize,
    t: f64,
}

/// Even-stride picks of `count` items out of `len`, endpoints last.
fn eviction_order(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    if len <= 2 {
        return (0..count).rev().collect();
    }
    let interior = len - 2;
    let mut out = Vec::with_capacity(count);
    let take = count.min(interior);
    for i in 0..take {
        let pos = ((2 * i + 1) * interior) / (2 * take);
        out.push(1 + pos);
    }
    if count > interior {
        out.push(len - 1);
    }
    if count > interior + 1 {
        out.push(0);
    }
    out
}

/// Plans the frame set without touching the filesystem.
pub fn plan_frames(ev: &EvidenceSet, meta: &PlanMeta, policy: &BudgetPolicy) -> Result<FramePlan> {
    policy.validate()?;
    if !(meta.fps > 0.0) || meta.frame_count == 0 {
        return Err(Error::Config(format!(
            "video {} needs fps > 0 and frame_count > 0",
            meta.video_id
        )));
    }

    let mut grouped: BTreeMap<u64, Candidate> = BTreeMap::new();
    for f in &ev.frames {
        let index = map_timestamp(f.t_s.max(0.0), meta.fps, meta.frame_count);
        let score = f.evidence_score();
        grouped
            .entry(index)
            .and_modify(|c| {
                c.score = c.score.max(score);
                c.t = c.t.min(f.t_s);
            })
            .or_insert(Candidate { index, score, t: f.t_s });
    }
    let mut ranked: Vec<Candidate> = grouped.into_values().collect();
    ranked.sort_by(|a, b| b.score.cmp(&a.score).then(a.t.total_cmp(&b.t)));
    let capped_keyframes: Vec<u64> = ranked
        .iter()
        .skip(policy.k_max_keyframes)
        .map(|c| c.index)
        .collect();
    ranked.truncate(policy.k_max_keyframes);

    let mut origins: BTreeMap<u64, FrameOrigin> = uniform_indices(policy.n_uniform, meta.frame_count)
        .into_iter()
        .map(|i| (i, FrameOrigin::Uniform))
        .collect();
    for c in &ranked {
        origins
            .entry(c.index)
            .and_modify(|o| *o = FrameOrigin::Both)
            .or_insert(FrameOrigin::Keyframe);
    }

    let mut evicted = Vec::new();
    let max_frames = policy.max_frames();
    if origins.len() > max_frames {
        let mut excess = origins.len() - max_frames;
        let uniform_only: Vec<u64> = origins
            .iter()
            .filter(|(_, o)| **o == FrameOrigin::Uniform)
            .map(|(i, _)| *i)
            .collect();
        for pos in eviction_order(uniform_only.len(), excess) {
            origins.remove(&uniform_only[pos]);
            evicted.push(uniform_only[pos]);
        }
        excess = origins.len().saturating_sub(max_frames);
        // Lowest-priority keyframes go last of all.
        for c in ranked.iter().rev().take(excess) {
            origins.remove(&c.index);
            evicted.push(c.index);
        }
    }

    let entries: Vec<PlanEntry> = origins
        .into_iter()
        .map(|(frame_index, origin)| PlanEntry {
            frame_index,
            t: frame_index as f64 / meta.fps,
            origin,
            image_ref: image_path(&meta.frames_dir, frame_index)
                .to_string_lossy()
                .into_owned(),
        })
        .collect();
    Ok(FramePlan {
        video_id: meta.video_id.clone(),
        token_estimate: policy.per_frame_tokens * entries.len() as u64,
        entries,
        capped_keyframes,
        evicted,
    })
}

/// Plans the frame set and checks that every planned image exists.
pub fn build_frame_plan(ev: &EvidenceSet, meta: &PlanMeta, policy: &BudgetPolicy) -> Result<FramePlan> {
    let plan = plan_frames(ev, meta, policy)?;
    let missing: Vec<u64> = plan
        .entries
        .iter()
        .filter(|e| !Path::new(&e.image_ref).is_file())
        .map(|e| e.frame_index)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFrames {
            video_id: meta.video_id.clone(),
            missing,
        });
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::SelectedFrame;
    use proptest::prelude::*;

    fn meta(fps: f64, frames: u64) -> PlanMeta {
        PlanMeta {
            video_id: "v".into(),
            fps,
            frame_count: frames,
            frames_dir: PathBuf::from("/frames"),
        }
    }

    fn evidence(ts: &[f64]) -> EvidenceSet {
        EvidenceSet {
            video_id: "v".into(),
            frames: ts
                .iter()
                .map(|&t| SelectedFrame {
                    t_s: t,
                    window_index: 0,
                    supporting_objects: vec![],
                    supporting_ocr: vec!["x".into()],
                    rationale: String::new(),
                })
                .collect(),
            summary: String::new(),
        }
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_indices(5, 9), vec![0, 2, 4, 6, 8]);
        assert_eq!(uniform_indices(100, 50), (0..50).collect::<Vec<_>>());
        assert_eq!(uniform_indices(1, 9), vec![0]);
        assert_eq!(uniform_indices(2, 1), vec![0]);
    }

    #[test]
    fn map_examples() {
        assert_eq!(map_timestamp(45.0, 30.0, 10_000), 1350);
        assert_eq!(map_timestamp(9999.0, 30.0, 1000), 999);
        assert_eq!(map_timestamp(0.0, 30.0, 1000), 0);
        assert_eq!(map_timestamp(0.05, 30.0, 1000), 2);
        assert_eq!(map_timestamp(0.1, 25.0, 1000), 3);
    }

    #[test]
    fn empty_evidence_gives_uniform_only() {
        let p = plan_frames(&evidence(&[]), &meta(30.0, 3000), &BudgetPolicy::default()).unwrap();
        assert_eq!(p.entries.len(), 100);
        assert!(p.entries.iter().all(|e| e.origin == FrameOrigin::Uniform));
        assert_eq!(p.token_estimate, 100 * 256);
        assert_eq!(p.entries[0].image_ref, "/frames/000000.jpg");
    }

    fn off_grid_evidence(n: usize) -> EvidenceSet {
        // 1 fps, 10_000 frames: uniform indices are multiples of 101 (k * 9999 / 99).
        evidence(&(0..n).map(|i| (i * 101 + 50) as f64).collect::<Vec<_>>())
    }

    #[test]
    fn keyframes_capped_at_k_max() {
        let policy = BudgetPolicy {
            context_limit: 65_536,
            ..Default::default()
        };
        let p = plan_frames(&off_grid_evidence(35), &meta(1.0, 10_000), &policy).unwrap();
        assert_eq!(p.keyframe_indices().len(), 30);
        assert_eq!(p.capped_keyframes.len(), 5);
    }

    #[test]
    fn full_plan_token_estimate() {
        let policy = BudgetPolicy {
            context_limit: 65_536,
            ..Default::default()
        };
        let p = plan_frames(&off_grid_evidence(30), &meta(1.0, 10_000), &policy).unwrap();
        assert_eq!(p.entries.len(), 130);
        assert_eq!(p.token_estimate, 130 * 256);
        assert_eq!(p.token_estimate, 33_280);
    }

    #[test]
    fn default_budget_evicts_uniform_first() {
        let policy = BudgetPolicy::default();
        let p = plan_frames(&off_grid_evidence(30), &meta(1.0, 10_000), &policy).unwrap();
        assert_eq!(p.entries.len(), policy.max_frames());
        assert!(p.token_estimate + policy.text_reserve_tokens <= policy.context_limit);
        assert_eq!(p.keyframe_indices().len(), 30);
        let idx = p.indices();
        assert_eq!(idx.first(), Some(&0));
        assert_eq!(idx.last(), Some(&9999));
    }

    #[test]
    fn keyframe_priority_by_score_then_time() {
        let mut ev = evidence(&[10.0, 20.0, 30.0]);
        ev.frames[2].supporting_ocr.push("y".into());
        let policy = BudgetPolicy {
            n_uniform: 1,
            k_max_keyframes: 2,
            ..Default::default()
        };
        let p = plan_frames(&ev, &meta(1.0, 100), &policy).unwrap();
        assert_eq!(p.keyframe_indices(), vec![10, 30]);
        assert_eq!(p.capped_keyframes, vec![20]);
    }

    #[test]
    fn collision_marks_both() {
        let p = plan_frames(&evidence(&[0.0]), &meta(1.0, 100), &BudgetPolicy::default()).unwrap();
        assert_eq!(p.entries[0].origin, FrameOrigin::Both);
        assert_eq!(p.entries.len(), 100);
    }

    #[test]
    fn missing_images_listed() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = meta(1.0, 3);
        m.frames_dir = dir.path().to_path_buf();
        std::fs::write(image_path(dir.path(), 1), b"").unwrap();
        let policy = BudgetPolicy {
            n_uniform: 3,
            ..Default::default()
        };
        match build_frame_plan(&evidence(&[]), &m, &policy) {
            Err(Error::MissingFrames { missing, .. }) => assert_eq!(missing, vec![0, 2]),
            other => panic!("{other:?}"),
        }
        for i in [0, 2] {
            std::fs::write(image_path(dir.path(), i), b"").unwrap();
        }
        assert!(build_frame_plan(&evidence(&[]), &m, &policy).is_ok());
    }

    #[test]
    fn eviction_order_spreads_and_keeps_endpoints() {
        assert_eq!(eviction_order(10, 2), vec![3, 7]);
        assert_eq!(eviction_order(4, 4), vec![1, 2, 3, 0]);
        let picks = eviction_order(100, 18);
        let mut sorted = picks.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 18);
        assert!(!picks.contains(&0) && !picks.contains(&99));
    }

    #[test]
    fn invalid_policy_rejected() {
        let bad = BudgetPolicy {
            text_reserve_tokens: 40_000,
            ..Default::default()
        };
        assert!(plan_frames(&evidence(&[]), &meta(1.0, 10), &bad).is_err());
    }

    proptest! {
        #[test]
        fn uniform_sorted_unique_in_range(n in 1usize..300, f in 1u64..5000) {
            let u = uniform_indices(n, f);
            prop_assert!(u.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(u.iter().all(|&i| i < f));
            prop_assert_eq!(u.len(), n.min(f as usize));
            prop_assert_eq!(u[0], 0);
            if n >= 2 { prop_assert_eq!(*u.last().unwrap(), f - 1); }
        }
    }
}
