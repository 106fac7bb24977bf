//! Pipeline configuration.

use serde::{Deserialize, Serialize};

use crate::caption::DEFAULT_BEAM;
use crate::distill::{DEFAULT_ETA, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::eval::{default_thresholds, DEFAULT_CAPTION_GATE, DEFAULT_MAX_PROPOSALS};
use crate::matching::DEFAULT_MARGIN;
use crate::proposal::{DEFAULT_SOFT_NMS_SIGMA, DEFAULT_TOP_K};

/// Every knob of a pipeline run. Missing fields take their defaults when
/// parsed from JSON; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Proposals kept per video after soft-NMS.
    pub top_k: usize,
    pub soft_nms_sigma: f64,
    /// Weight of the adaptively fused distillation loss.
    pub gamma: f64,
    /// Weight of the suppression-fused distillation loss.
    pub eta: f64,
    /// Weight of hard labels from matched pairs during refinement.
    pub hard_label_weight: f64,
    /// Rounds of match-then-distill refinement.
    pub refine_iterations: usize,
    /// Gradient steps when fitting a student output.
    pub distill_steps: usize,
    /// Length every teacher and student feature sequence is resampled to.
    pub target_len: usize,
    pub margin: f64,
    /// Shared embedding width of the matcher; `None` uses the visual width.
    pub embed_dim: Option<usize>,
    pub match_epochs: usize,
    pub match_lr: f64,
    /// Videos per matcher update; `None` trains full-batch.
    pub match_batch: Option<usize>,
    pub beam: usize,
    pub max_caption_len: usize,
    pub iou_thresholds: Vec<f64>,
    /// Largest AN of the AR curve.
    pub max_proposals: usize,
    /// Minimum IoU for a prediction to be scored against a ground-truth caption.
    pub caption_gate: f64,
    pub frame_seconds: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            soft_nms_sigma: DEFAULT_SOFT_NMS_SIGMA,
            gamma: DEFAULT_GAMMA,
            eta: DEFAULT_ETA,
            hard_label_weight: 1.0,
            refine_iterations: 1,
            distill_steps: 2000,
            target_len: 100,
            margin: DEFAULT_MARGIN,
            embed_dim: None,
            match_epochs: 300,
            match_lr: 0.01,
            match_batch: None,
            beam: DEFAULT_BEAM,
            max_caption_len: 20,
            iou_thresholds: default_thresholds(),
            max_proposals: DEFAULT_MAX_PROPOSALS,
            caption_gate: DEFAULT_CAPTION_GATE,
            frame_seconds: 1.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.top_k == 0 || self.beam == 0 || self.max_caption_len == 0 || self.target_len == 0 {
            return bad("top_k, beam, max_caption_len and target_len must be positive".into());
        }
        if !(self.gamma >= 0.0 && self.eta >= 0.0 && self.hard_label_weight >= 0.0) {
            return bad(format!(
                "loss weights must be non-negative (gamma={}, eta={}, hard_label_weight={})",
                self.gamma, self.eta, self.hard_label_weight
            ));
        }
        if !(self.soft_nms_sigma > 0.0) {
            return bad(format!("soft_nms_sigma must be positive, got {}", self.soft_nms_sigma));
        }
        if !(self.margin >= 0.0) || !(self.match_lr >= 0.0) {
            return bad("margin and match_lr must be non-negative".into());
        }
        if self.embed_dim == Some(0) || self.match_batch == Some(0) {
            return bad("embed_dim and match_batch must be positive when set".into());
        }
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("iou_thresholds must be a non-empty list in (0, 1]".into());
        }
        if self.max_proposals < 2 {
            return bad("max_proposals must be at least 2".into());
        }
        if !(self.caption_gate > 0.0 && self.caption_gate <= 1.0) {
            return bad(format!("caption_gate {} outside (0, 1]", self.caption_gate));
        }
        if !(self.frame_seconds > 0.0 && self.frame_seconds.is_finite()) {
            return bad(format!("frame_seconds must be positive, got {}", self.frame_seconds));
        }
        Ok(())
    }
}
