//! Grounded claim generation over video timelines.
//!
//! The stages run in order: a per-video timeline of detections and OCR is
//! searched by a text model for query-relevant moments ([`localizer`]), those
//! moments become keyframes alongside evenly spaced frames ([`frame_plan`]),
//! a vision model writes cited claims from the frames and hints
//! ([`generator`]), and claims are merged across videos ([`consolidate`]).
//! [`eval`] scores the result and [`pipeline`] drives everything on disk.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod consolidate;
pub mod error;
pub mod eval;
pub mod frame_plan;
pub mod generator;
pub mod localizer;
pub mod manifest;
pub mod pipeline;
pub mod timeline;

pub use backend::{BackendProfile, ChatRequest, Client, MockRule, MockRuleSet, Role};
pub use consolidate::{ClaimCluster, ConsolidatedClaim, ConsolidationMode};
pub use error::{Error, Result};
pub use eval::{EvalReport, GoldClaim};
pub use frame_plan::{BudgetPolicy, FramePlan, PlanEntry};
pub use generator::{Claim, FrameAnnotation};
pub use localizer::{EvidenceSet, QueryContext, SelectedFrame};
pub use manifest::{Manifest, VideoEntry};
pub use pipeline::{run_topic, RunConfig, RunSummary, Stage};
pub use timeline::{FrameRecord, Timeline, VideoMeta};
