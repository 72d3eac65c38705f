//! Detection ↔ tracking collaboration.
//!
//! The pipeline starts in global detection. The best detection at or above
//! `θ_det` becomes the template and the pipeline switches to local tracking.
//! While tracking, the evidential verdict on each tracked box decides whether
//! to keep tracking or fall back to detection; on a rejected frame the
//! prediction is empty and detection resumes on the next frame (unless
//! same-frame re-detection is enabled).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::edl::{judge, Decision, DirichletEvidence};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::metric::FramePrediction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!(
                "detection score must be in [0, 1], got {score}"
            )));
        }
        Ok(Self { bbox, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub bbox: BoundingBox,
    /// Two-class evidence, class 0 = target.
    pub evidence: DirichletEvidence,
}

/// The target exemplar handed from detection to tracking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Template {
    pub bbox: BoundingBox,
    /// Frame the template was taken from.
    pub frame_index: usize,
}

/// Whole-frame detector.
pub trait Detector<F> {
    fn detect(&mut self, frame_index: usize, frame: &F) -> Vec<Detection>;
}

/// Template-conditioned local tracker with an evidential head.
pub trait Tracker<F> {
    /// Called once when a new template is adopted, before the first `track`.
    fn init(&mut self, _template: &Template, _frame_index: usize, _frame: &F) {}

    fn track(&mut self, template: &Template, frame_index: usize, frame: &F) -> TrackOutput;
}

/// Turns tracker evidence into a keep/switch verdict.
pub trait EvidentialJudge {
    fn judge(&self, evidence: &DirichletEvidence, theta_eh: f64) -> Result<Decision>;
}

/// The standard rule: target class wins and `u < θ_eh`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UncertaintyJudge;

impl EvidentialJudge for UncertaintyJudge {
    fn judge(&self, evidence: &DirichletEvidence, theta_eh: f64) -> Result<Decision> {
        judge(evidence, theta_eh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    GlobalDetection,
    LocalTracking,
}

/// Collaboration strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Detection and tracking alternate under the evidential verdict.
    #[serde(rename = "EC")]
    Evidential,
    /// Detect once, then track forever.
    #[serde(rename = "SC")]
    SimpleCombination,
    /// Run the detector on every frame.
    #[serde(rename = "DetOnly")]
    DetectionOnly,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Evidential => "EC",
            Strategy::SimpleCombination => "SC",
            Strategy::DetectionOnly => "DetOnly",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub theta_eh: f64,
    pub theta_det: f64,
    /// Re-run the detector on the frame where tracking was rejected.
    #[serde(default)]
    pub redetect_same_frame: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            theta_eh: 0.2,
            theta_det: 0.5,
            redetect_same_frame: false,
        }
    }
}

impl PipelineConfig {
    pub fn new(theta_eh: f64, theta_det: f64) -> Result<Self> {
        let c = Self {
            theta_eh,
            theta_det,
            redetect_same_frame: false,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta_eh) {
            return Err(Error::invalid(format!(
                "theta_eh must be in [0, 1], got {}",
                self.theta_eh
            )));
        }
        if !(0.0..=1.0).contains(&self.theta_det) {
            return Err(Error::invalid(format!(
                "theta_det must be in [0, 1], got {}",
                self.theta_det
            )));
        }
        Ok(())
    }
}

/// Pipeline automaton. The template lives inside the tracking variant, so
/// tracking without a template cannot be represented.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PipelineState {
    GlobalDetection,
    LocalTracking { template: Template },
}

impl PipelineState {
    pub fn mode(&self) -> Mode {
        match self {
            PipelineState::GlobalDetection => Mode::GlobalDetection,
            PipelineState::LocalTracking { .. } => Mode::LocalTracking,
        }
    }

    pub fn template(&self) -> Option<&Template> {
        match self {
            PipelineState::GlobalDetection => None,
            PipelineState::LocalTracking { template } => Some(template),
        }
    }
}

/// Highest score, then larger area, then earliest in scan order.
pub fn select_detection(detections: &[Detection]) -> Option<&Detection> {
    detections.iter().reduce(|best, d| {
        match d
            .score
            .partial_cmp(&best.score)
            .unwrap_or(Ordering::Equal)
            .then(
                d.bbox
                    .area()
                    .partial_cmp(&best.bbox.area())
                    .unwrap_or(Ordering::Equal),
            ) {
            Ordering::Greater => d,
            _ => best,
        }
    })
}

/// What happened on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Mode at the start of the frame.
    pub mode: Mode,
    pub prediction: FramePrediction,
    /// Evidential verdict, when the tracker ran and the judge was consulted.
    pub decision: Option<Decision>,
}

/// Detector, tracker, and judge bundled with thresholds.
pub struct Pipeline<D, T, J = UncertaintyJudge> {
    pub detector: D,
    pub tracker: T,
    pub judge: J,
    pub config: PipelineConfig,
    /// When false the verdict is ignored and tracking never ends.
    pub judge_enabled: bool,
}

impl<D, T> Pipeline<D, T, UncertaintyJudge> {
    pub fn new(detector: D, tracker: T, config: PipelineConfig) -> Self {
        Self {
            detector,
            tracker,
            judge: UncertaintyJudge,
            config,
            judge_enabled: true,
        }
    }

    pub fn simple_combination(detector: D, tracker: T, config: PipelineConfig) -> Self {
        Self {
            judge_enabled: false,
            ..Self::new(detector, tracker, config)
        }
    }
}

impl<D, T, J> Pipeline<D, T, J> {
    fn detect_into<F>(&mut self, frame_index: usize, frame: &F) -> (PipelineState, FramePrediction)
    where
        D: Detector<F>,
        T: Tracker<F>,
    {
        let detections = self.detector.detect(frame_index, frame);
        match select_detection(&detections).filter(|d| d.score >= self.config.theta_det) {
            Some(det) => {
                let template = Template {
                    bbox: det.bbox,
                    frame_index,
                };
                self.tracker.init(&template, frame_index, frame);
                (
                    PipelineState::LocalTracking { template },
                    FramePrediction::boxed(det.bbox),
                )
            }
            None => (PipelineState::GlobalDetection, FramePrediction::absent()),
        }
    }

    /// Advances the automaton by one frame.
    pub fn step<F>(
        &mut self,
        state: PipelineState,
        frame_index: usize,
        frame: &F,
    ) -> Result<(PipelineState, StepRecord)>
    where
        D: Detector<F>,
        T: Tracker<F>,
        J: EvidentialJudge,
    {
        match state {
            PipelineState::GlobalDetection => {
                let (next, prediction) = self.detect_into(frame_index, frame);
                Ok((
                    next,
                    StepRecord {
                        mode: Mode::GlobalDetection,
                        prediction,
                        decision: None,
                    },
                ))
            }
            PipelineState::LocalTracking { template } => {
                let out = self.tracker.track(&template, frame_index, frame);
                if !self.judge_enabled {
                    return Ok((
                        state,
                        StepRecord {
                            mode: Mode::LocalTracking,
                            prediction: FramePrediction::boxed(out.bbox),
                            decision: None,
                        },
                    ));
                }
                let decision = self.judge.judge(&out.evidence, self.config.theta_eh)?;
                let (next, prediction) = match decision {
                    Decision::ContinueTracking => (state, FramePrediction::boxed(out.bbox)),
                    Decision::SwitchToDetection if self.config.redetect_same_frame => {
                        self.detect_into(frame_index, frame)
                    }
                    Decision::SwitchToDetection => {
                        (PipelineState::GlobalDetection, FramePrediction::absent())
                    }
                };
                Ok((
                    next,
                    StepRecord {
                        mode: Mode::LocalTracking,
                        prediction,
                        decision: Some(decision),
                    },
                ))
            }
        }
    }

    /// Folds [`Pipeline::step`] over the frames, starting in global detection.
    pub fn run_traced<F>(&mut self, frames: &[F]) -> Result<Vec<StepRecord>>
    where
        D: Detector<F>,
        T: Tracker<F>,
        J: EvidentialJudge,
    {
        if frames.is_empty() {
            return Err(Error::invalid("cannot run the pipeline on zero frames"));
        }
        let mut state = PipelineState::GlobalDetection;
        let mut records = Vec::with_capacity(frames.len());
        for (i, frame) in frames.iter().enumerate() {
            let (next, rec) = self.step(state, i, frame)?;
            state = next;
            records.push(rec);
        }
        Ok(records)
    }

    pub fn run<F>(&mut self, frames: &[F]) -> Result<Vec<FramePrediction>>
    where
        D: Detector<F>,
        T: Tracker<F>,
        J: EvidentialJudge,
    {
        Ok(self
            .run_traced(frames)?
            .into_iter()
            .map(|r| r.prediction)
            .collect())
    }
}

/// Evidential combination over a whole sequence.
pub fn run_sequence<F, D: Detector<F>, T: Tracker<F>>(
    frames: &[F],
    detector: D,
    tracker: T,
    theta_eh: f64,
    theta_det: f64,
) -> Result<Vec<FramePrediction>> {
    Pipeline::new(detector, tracker, PipelineConfig::new(theta_eh, theta_det)?).run(frames)
}

/// Detector hands off to the tracker once and never takes over again.
pub fn run_simple_combination<F, D: Detector<F>, T: Tracker<F>>(
    frames: &[F],
    detector: D,
    tracker: T,
    theta_det: f64,
) -> Result<Vec<FramePrediction>> {
    let config = PipelineConfig::new(PipelineConfig::default().theta_eh, theta_det)?;
    Pipeline::simple_combination(detector, tracker, config).run(frames)
}

/// Per-frame detection with no tracking: best detection at or above `θ_det`.
pub fn run_detection_only<F, D: Detector<F>>(
    frames: &[F],
    mut detector: D,
    theta_det: f64,
) -> Result<Vec<FramePrediction>> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot run the pipeline on zero frames"));
    }
    Ok(frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let dets = detector.detect(i, f);
            select_detection(&dets)
                .filter(|d| d.score >= theta_det)
                .map(|d| d.bbox)
                .into()
        })
        .collect())
}

/// Number of maximal runs of `mode` in a trace.
pub fn count_episodes(records: &[StepRecord], mode: Mode) -> usize {
    let mut count = 0;
    let mut prev = None;
    for r in records {
        if r.mode == mode && prev != Some(mode) {
            count += 1;
        }
        prev = Some(r.mode);
    }
    count
}
