//! The Acc sequence metric.
//!
//! ```text
//! Acc = Σ_t [IoU_t·δ(v_t>0) + p_t·(1 − δ(v_t>0))] / T  −  α·(Σ_t q_t·δ(v_t>0) / T*)^β
//! ```
//!
//! `p_t` is 1 when the prediction is empty, `q_t` is 1 when a visible target
//! was missed entirely (empty prediction or IoU exactly 0), `T*` counts the
//! visible frames. With `T* = 0` the penalty is 0.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

/// Challenge attribute tags carried by annotated frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    /// Out of view.
    OV,
    /// Occlusion.
    OC,
    /// Fast motion.
    FM,
    /// Scale variation.
    SV,
    /// Infrared (thermal) crossover.
    IC,
    /// Dynamic background clusters.
    DBC,
    /// Tiny / small target scale.
    TS,
}

impl Attribute {
    pub const ALL: [Attribute; 7] = [
        Attribute::OV,
        Attribute::OC,
        Attribute::FM,
        Attribute::SV,
        Attribute::IC,
        Attribute::DBC,
        Attribute::TS,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::OV => "OV",
            Attribute::OC => "OC",
            Attribute::FM => "FM",
            Attribute::SV => "SV",
            Attribute::IC => "IC",
            Attribute::DBC => "DBC",
            Attribute::TS => "TS",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attribute tag `{s}`")))
    }
}

/// Ground truth for one frame. A frame is visible iff it carries a box of
/// positive area.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    bbox: Option<BoundingBox>,
    attributes: BTreeSet<Attribute>,
}

impl FrameAnnotation {
    pub fn visible(bbox: BoundingBox) -> Result<Self> {
        if !bbox.has_positive_area() {
            return Err(Error::invalid("visible target box must have positive area"));
        }
        Ok(Self {
            bbox: Some(bbox),
            attributes: BTreeSet::new(),
        })
    }

    pub fn absent() -> Self {
        Self {
            bbox: None,
            attributes: BTreeSet::new(),
        }
    }

    pub fn with_attributes(mut self, tags: impl IntoIterator<Item = Attribute>) -> Self {
        self.attributes.extend(tags);
        self
    }

    pub fn is_visible(&self) -> bool {
        self.bbox.is_some()
    }

    pub fn bbox(&self) -> Option<&BoundingBox> {
        self.bbox.as_ref()
    }

    pub fn attributes(&self) -> &BTreeSet<Attribute> {
        &self.attributes
    }

    pub fn has_attribute(&self, tag: Attribute) -> bool {
        self.attributes.contains(&tag)
    }
}

/// System output for one frame; `None` means "no UAV".
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FramePrediction {
    pub bbox: Option<BoundingBox>,
}

impl FramePrediction {
    pub fn absent() -> Self {
        Self { bbox: None }
    }

    pub fn boxed(bbox: BoundingBox) -> Self {
        Self { bbox: Some(bbox) }
    }

    pub fn is_absent(&self) -> bool {
        self.bbox.is_none()
    }
}

impl From<Option<BoundingBox>> for FramePrediction {
    fn from(bbox: Option<BoundingBox>) -> Self {
        Self { bbox }
    }
}

/// Penalty weight α and exponent β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EvalParams")]
pub struct EvalConfig {
    alpha: f64,
    beta: f64,
}

impl EvalConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::invalid(format!(
                "beta must be finite and > 0, got {beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalParams {
    alpha: f64,
    beta: f64,
}

impl TryFrom<EvalParams> for EvalConfig {
    type Error = Error;

    fn try_from(p: EvalParams) -> Result<Self> {
        Self::new(p.alpha, p.beta)
    }
}

impl Default for EvalConfig {
    /// α = 0.2, β = 0.3.
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceResult {
    pub acc: f64,
    pub accuracy_term: f64,
    pub penalty_term: f64,
    /// `T`.
    pub num_frames: usize,
    /// `T*`.
    pub num_visible: usize,
    pub num_failures: usize,
    pub per_frame_scores: Vec<f64>,
    /// `q_t` per frame; always false on invisible frames.
    pub failure_flags: Vec<bool>,
}

pub fn frame_score(gt: &FrameAnnotation, pred: &FramePrediction) -> f64 {
    match (gt.bbox(), pred.bbox.as_ref()) {
        (Some(g), Some(p)) => iou(p, g),
        (Some(_), None) => 0.0,
        (None, None) => 1.0,
        (None, Some(_)) => 0.0,
    }
}

pub fn failure_flag(gt: &FrameAnnotation, pred: &FramePrediction) -> bool {
    match (gt.bbox(), pred.bbox.as_ref()) {
        (Some(g), Some(p)) => iou(p, g) == 0.0,
        (Some(_), None) => true,
        (None, _) => false,
    }
}

pub fn evaluate_sequence(
    annotations: &[FrameAnnotation],
    predictions: &[FramePrediction],
    config: &EvalConfig,
) -> Result<SequenceResult> {
    if annotations.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sequence"));
    }
    if annotations.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} annotations vs {} predictions",
            annotations.len(),
            predictions.len()
        )));
    }

    let num_frames = annotations.len();
    let mut per_frame_scores = Vec::with_capacity(num_frames);
    let mut failure_flags = Vec::with_capacity(num_frames);
    let mut num_visible = 0usize;
    let mut num_failures = 0usize;
    for (gt, pred) in annotations.iter().zip(predictions) {
        per_frame_scores.push(frame_score(gt, pred));
        let failed = failure_flag(gt, pred);
        failure_flags.push(failed);
        num_visible += gt.is_visible() as usize;
        num_failures += failed as usize;
    }

    let accuracy_term = per_frame_scores.iter().sum::<f64>() / num_frames as f64;
    let penalty_term = if num_visible == 0 {
        0.0
    } else {
        let ratio = num_failures as f64 / num_visible as f64;
        config.alpha * ratio.powf(config.beta)
    };

    Ok(SequenceResult {
        acc: accuracy_term - penalty_term,
        accuracy_term,
        penalty_term,
        num_frames,
        num_visible,
        num_failures,
        per_frame_scores,
        failure_flags,
    })
}

/// How per-sequence scores are pooled into a dataset score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Unweighted mean over sequences.
    #[default]
    PerSequence,
    /// Mean weighted by each sequence's frame count.
    PerFrame,
}

pub fn evaluate_dataset(per_sequence: &[SequenceResult]) -> Result<f64> {
    evaluate_dataset_with(per_sequence, Aggregation::PerSequence)
}

pub fn evaluate_dataset_with(per_sequence: &[SequenceResult], how: Aggregation) -> Result<f64> {
    if per_sequence.is_empty() {
        return Err(Error::invalid("no sequences to aggregate"));
    }
    Ok(match how {
        Aggregation::PerSequence => {
            per_sequence.iter().map(|r| r.acc).sum::<f64>() / per_sequence.len() as f64
        }
        Aggregation::PerFrame => {
            let frames: usize = per_sequence.iter().map(|r| r.num_frames).sum();
            per_sequence
                .iter()
                .map(|r| r.acc * r.num_frames as f64)
                .sum::<f64>()
                / frames as f64
        }
    })
}

/// Evaluates only the frames tagged with `tag`. `None` when no frame carries
/// the tag.
pub fn attribute_slice(
    annotations: &[FrameAnnotation],
    predictions: &[FramePrediction],
    tag: Attribute,
    config: &EvalConfig,
) -> Result<Option<SequenceResult>> {
    if annotations.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} annotations vs {} predictions",
            annotations.len(),
            predictions.len()
        )));
    }
    let (gts, preds): (Vec<_>, Vec<_>) = annotations
        .iter()
        .zip(predictions)
        .filter(|(gt, _)| gt.has_attribute(tag))
        .map(|(gt, p)| (gt.clone(), *p))
        .unzip();
    if gts.is_empty() {
        return Ok(None);
    }
    evaluate_sequence(&gts, &preds, config).map(Some)
}
