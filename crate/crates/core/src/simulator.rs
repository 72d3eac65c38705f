//! Seeded synthetic anti-UAV scenarios and simulated detector/tracker models.
//!
//! Frames are geometric states (target box, decoy boxes), not images.
//!
//! # Random streams
//!
//! Every draw comes from a ChaCha8 generator whose seed is derived with
//! [`derive_seed`] from a parent seed and a path of stream ids:
//!
//! * scenario geometry: `(scenario.seed, STREAM_SCENARIO)`
//! * trial scenario seed: `(base_seed, STREAM_TRIAL, trial)`
//! * detector on frame `i`: `(scenario.seed, STREAM_DETECTOR, i)`
//! * tracker on frame `i`: `(scenario.seed, STREAM_TRACKER, i)`
//!
//! Adding a new component means adding a new stream id; existing streams
//! keep their draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edl::DirichletEvidence;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, FrameSize};
use crate::metric::{evaluate_sequence, Attribute, EvalConfig, FrameAnnotation, FramePrediction};
use crate::pipeline::{
    run_detection_only, Detection, Detector, Pipeline, PipelineConfig, Strategy, Template,
    TrackOutput, Tracker,
};

pub const STREAM_SCENARIO: u64 = 1;
pub const STREAM_DETECTOR: u64 = 2;
pub const STREAM_TRACKER: u64 = 3;
pub const STREAM_TRIAL: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a stream path below `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

fn gauss(rng: &mut impl Rng, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

/// Boxes smaller than this (w·h, px²) are tagged `TS`.
pub const TINY_TARGET_AREA: f64 = 16.0 * 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Leaving the frame is a spec error.
    #[default]
    Reject,
    /// Bounce off the frame edges.
    Reflect,
}

/// Frames `[start, end)` moving at `velocity` instead of the base velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionBurst {
    pub start: usize,
    pub end: usize,
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    /// Initial centre; drawn uniformly inside the frame when absent.
    #[serde(default)]
    pub start: Option<[f64; 2]>,
    pub size: [f64; 2],
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Per-frame standard deviation of the random walk on the base velocity.
    #[serde(default)]
    pub velocity_jitter: f64,
    #[serde(default)]
    pub bursts: Vec<MotionBurst>,
    #[serde(default)]
    pub boundary: Boundary,
}

/// Static decoys. Centres come from `positions` first, the rest are drawn
/// uniformly inside the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    pub count: usize,
    #[serde(default = "default_distractor_size")]
    pub size: [f64; 2],
    #[serde(default)]
    pub positions: Vec<[f64; 2]>,
}

fn default_distractor_size() -> [f64; 2] {
    [20.0, 14.0]
}

impl Default for DistractorSpec {
    fn default() -> Self {
        Self {
            count: 0,
            size: default_distractor_size(),
            positions: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub frame_size: FrameSize,
    pub num_frames: usize,
    /// Disjoint `[start, end)` frame ranges where the target is visible.
    pub presence_intervals: Vec<[usize; 2]>,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub distractors: DistractorSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    /// Static `size` box centred in the frame, visible on the given intervals.
    pub fn static_target(num_frames: usize, presence: Vec<[usize; 2]>, size: [f64; 2]) -> Self {
        let frame = FrameSize::default();
        Self {
            frame_size: frame,
            num_frames,
            presence_intervals: presence,
            trajectory: TrajectorySpec {
                start: Some([frame.width / 2.0, frame.height / 2.0]),
                size,
                velocity: [0.0, 0.0],
                velocity_jitter: 0.0,
                bursts: vec![],
                boundary: Boundary::Reject,
            },
            distractors: DistractorSpec::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::config("scenario.num_frames", "must be > 0"));
        }
        let mut iv = self.presence_intervals.clone();
        iv.sort();
        for (i, [s, e]) in iv.iter().enumerate() {
            if s >= e || *e > self.num_frames {
                return Err(Error::config(
                    format!("scenario.presence_intervals[{i}]"),
                    format!(
                        "[{s}, {e}) must be non-empty and within [0, {})",
                        self.num_frames
                    ),
                ));
            }
            if i > 0 && iv[i - 1][1] > *s {
                return Err(Error::config(
                    "scenario.presence_intervals",
                    format!("intervals {:?} and {:?} overlap", iv[i - 1], iv[i]),
                ));
            }
        }
        let t = &self.trajectory;
        let [w, h] = t.size;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::config(
                "scenario.trajectory.size",
                "must be positive",
            ));
        }
        if w > self.frame_size.width || h > self.frame_size.height {
            return Err(Error::config(
                "scenario.trajectory.size",
                "target larger than frame",
            ));
        }
        if !(t.velocity_jitter >= 0.0 && t.velocity_jitter.is_finite()) {
            return Err(Error::config(
                "scenario.trajectory.velocity_jitter",
                "must be >= 0",
            ));
        }
        if t.velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(
                "scenario.trajectory.velocity",
                "must be finite",
            ));
        }
        for (i, b) in t.bursts.iter().enumerate() {
            if b.start >= b.end || b.velocity.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(
                    format!("scenario.trajectory.bursts[{i}]"),
                    "needs start < end and finite velocity",
                ));
            }
        }
        let d = &self.distractors;
        if d.count > 0 {
            let [dw, dh] = d.size;
            if !(dw > 0.0 && dh > 0.0) || dw > self.frame_size.width || dh > self.frame_size.height
            {
                return Err(Error::config(
                    "scenario.distractors.size",
                    "must be positive and fit in the frame",
                ));
            }
        }
        if d.positions.len() > d.count {
            return Err(Error::config(
                "scenario.distractors.positions",
                "more positions than count",
            ));
        }
        Ok(())
    }
}

/// Geometric state of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub index: usize,
    pub frame_size: FrameSize,
    /// Target box when visible.
    pub target: Option<BoundingBox>,
    pub distractors: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frames: Vec<SceneFrame>,
    pub annotations: Vec<FrameAnnotation>,
}

fn in_burst(bursts: &[MotionBurst], t: usize) -> Option<&MotionBurst> {
    bursts.iter().find(|b| (b.start..b.end).contains(&t))
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, &[STREAM_SCENARIO]);
    let frame = spec.frame_size;
    let traj = &spec.trajectory;
    let [w, h] = traj.size;
    let (lo_x, hi_x) = (w / 2.0, frame.width - w / 2.0);
    let (lo_y, hi_y) = (h / 2.0, frame.height - h / 2.0);

    let [mut cx, mut cy] = match traj.start {
        Some(c) => c,
        None => [
            lo_x + rng.random::<f64>() * (hi_x - lo_x),
            lo_y + rng.random::<f64>() * (hi_y - lo_y),
        ],
    };
    let mut base_v = traj.velocity;

    let d = &spec.distractors;
    let distractors: Vec<BoundingBox> = (0..d.count)
        .map(|i| {
            let [dw, dh] = d.size;
            let [dx, dy] = d.positions.get(i).copied().unwrap_or_else(|| {
                [
                    dw / 2.0 + rng.random::<f64>() * (frame.width - dw),
                    dh / 2.0 + rng.random::<f64>() * (frame.height - dh),
                ]
            });
            BoundingBox::from_center(dx, dy, dw, dh)
        })
        .collect::<Result<_>>()?;

    let mut visible = vec![false; spec.num_frames];
    for [s, e] in &spec.presence_intervals {
        visible[*s..*e].iter_mut().for_each(|v| *v = true);
    }

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut annotations = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        if t > 0 {
            let jx = gauss(&mut rng, traj.velocity_jitter);
            let jy = gauss(&mut rng, traj.velocity_jitter);
            base_v[0] += jx;
            base_v[1] += jy;
            let v = in_burst(&traj.bursts, t).map_or(base_v, |b| b.velocity);
            cx += v[0];
            cy += v[1];
            if traj.boundary == Boundary::Reflect {
                for (c, lo, hi, k) in [(&mut cx, lo_x, hi_x, 0), (&mut cy, lo_y, hi_y, 1)] {
                    // fold back into [lo, hi]; repeated in case of large steps
                    while *c < lo || *c > hi {
                        *c = if *c < lo {
                            2.0 * lo - *c
                        } else {
                            2.0 * hi - *c
                        };
                        base_v[k] = -base_v[k];
                    }
                }
            }
        }
        let bbox = BoundingBox::from_center(cx, cy, w, h)?;
        if !bbox.is_inside(frame) {
            return Err(Error::config(
                "scenario.trajectory",
                format!(
                    "target leaves the frame at frame {t} ({:?})",
                    bbox.to_array()
                ),
            ));
        }
        let target = visible[t].then_some(bbox);
        let ann = match target {
            Some(b) => {
                let mut tags = Vec::new();
                if in_burst(&traj.bursts, t).is_some() {
                    tags.push(Attribute::FM);
                }
                if b.area() < TINY_TARGET_AREA {
                    tags.push(Attribute::TS);
                }
                FrameAnnotation::visible(b)?.with_attributes(tags)
            }
            None => FrameAnnotation::absent(),
        };
        frames.push(SceneFrame {
            index: t,
            frame_size: frame,
            target,
            distractors: distractors.clone(),
        });
        annotations.push(ann);
    }
    Ok(Scenario {
        frames,
        annotations,
    })
}

/// Uniform law on `[low, high] ⊆ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreLaw {
    pub low: f64,
    pub high: f64,
}

impl ScoreLaw {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.low + rng.random::<f64>() * (self.high - self.low)
    }

    fn validate(&self, path: &str) -> Result<()> {
        if !(0.0 <= self.low && self.low <= self.high && self.high <= 1.0) {
            return Err(Error::config(path, "needs 0 <= low <= high <= 1"));
        }
        Ok(())
    }
}

fn check_probability(path: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(
            path,
            format!("must be a probability in [0, 1], got {p}"),
        ));
    }
    Ok(())
}

fn check_nonneg(path: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::config(
            path,
            format!("must be finite and >= 0, got {v}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDetectorModel {
    /// Probability of detecting a visible target on a frame.
    pub recall: f64,
    /// Per-frame probability of firing on one decoy.
    pub false_positive_rate: f64,
    /// Standard deviation of centre and size jitter, px.
    pub localization_noise: f64,
    pub true_score: ScoreLaw,
    pub false_score: ScoreLaw,
}

impl SimDetectorModel {
    pub fn perfect() -> Self {
        Self {
            recall: 1.0,
            false_positive_rate: 0.0,
            localization_noise: 0.0,
            true_score: ScoreLaw {
                low: 1.0,
                high: 1.0,
            },
            false_score: ScoreLaw {
                low: 0.0,
                high: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("detector.recall", self.recall)?;
        check_probability("detector.false_positive_rate", self.false_positive_rate)?;
        check_nonneg("detector.localization_noise", self.localization_noise)?;
        self.true_score.validate("detector.true_score")?;
        self.false_score.validate("detector.false_score")
    }
}

fn jitter_box(b: &BoundingBox, sigma: f64, rng: &mut impl Rng) -> BoundingBox {
    let (cx, cy) = b.center();
    let (dx, dy, dw, dh) = (
        gauss(rng, sigma),
        gauss(rng, sigma),
        gauss(rng, sigma),
        gauss(rng, sigma),
    );
    if sigma == 0.0 {
        return *b;
    }
    BoundingBox::from_center(
        cx + dx,
        cy + dy,
        (b.w() + dw).max(1.0),
        (b.h() + dh).max(1.0),
    )
    .expect("finite jittered box")
}

/// One frame of detector output. Draw order: recall coin, target jitter,
/// target score, false-positive coin, decoy index, decoy jitter, decoy score.
pub fn simulate_detector(
    model: &SimDetectorModel,
    frame: &SceneFrame,
    rng: &mut impl Rng,
) -> Vec<Detection> {
    let mut out = Vec::new();
    let hit = rng.random::<f64>() < model.recall;
    let jittered = frame
        .target
        .map(|t| jitter_box(&t, model.localization_noise, rng));
    let score = model.true_score.sample(rng);
    if let (true, Some(b)) = (hit, jittered) {
        out.push(Detection::new(b, score).expect("score law within [0, 1]"));
    }
    let fire = rng.random::<f64>() < model.false_positive_rate;
    if fire && !frame.distractors.is_empty() {
        let j = rng.random_range(0..frame.distractors.len());
        let b = jitter_box(&frame.distractors[j], model.localization_noise, rng);
        let s = model.false_score.sample(rng);
        out.push(Detection::new(b, s).expect("score law within [0, 1]"));
    }
    out
}

/// Detector port backed by [`simulate_detector`].
#[derive(Debug, Clone)]
pub struct SimDetector {
    pub model: SimDetectorModel,
    pub seed: u64,
}

impl Detector<SceneFrame> for SimDetector {
    fn detect(&mut self, frame_index: usize, frame: &SceneFrame) -> Vec<Detection> {
        let mut rng = stream_rng(self.seed, &[STREAM_DETECTOR, frame_index as u64]);
        simulate_detector(&self.model, frame, &mut rng)
    }
}

/// Uniform ranges for (target, background) evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceRange {
    pub target: [f64; 2],
    pub background: [f64; 2],
}

impl EvidenceRange {
    fn sample(&self, rng: &mut impl Rng) -> DirichletEvidence {
        let u =
            |r: [f64; 2], rng: &mut dyn rand::RngCore| r[0] + rng.random::<f64>() * (r[1] - r[0]);
        let t = u(self.target, rng);
        let b = u(self.background, rng);
        DirichletEvidence::binary(t, b).expect("validated evidence ranges")
    }

    fn validate(&self, path: &str) -> Result<()> {
        for (name, r) in [("target", self.target), ("background", self.background)] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1].is_finite()) {
                return Err(Error::config(
                    format!("{path}.{name}"),
                    "needs 0 <= low <= high",
                ));
            }
        }
        Ok(())
    }
}

/// Evidence the simulated head emits given whether the tracked box is
/// really on the target. With probability `confusion_rate` the law of the
/// opposite state is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceLaw {
    pub on_target: EvidenceRange,
    pub off_target: EvidenceRange,
    pub confusion_rate: f64,
}

impl EvidenceLaw {
    pub fn perfect() -> Self {
        Self {
            on_target: EvidenceRange {
                target: [40.0, 60.0],
                background: [0.0, 0.0],
            },
            off_target: EvidenceRange {
                target: [0.0, 0.0],
                background: [10.0, 20.0],
            },
            confusion_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTrackerModel {
    /// Standard deviation of per-frame box jitter, px.
    pub drift: f64,
    /// Per-frame probability of latching onto a decoy (or background).
    pub lock_loss_probability: f64,
    pub evidence: EvidenceLaw,
}

impl SimTrackerModel {
    pub fn perfect() -> Self {
        Self {
            drift: 0.0,
            lock_loss_probability: 0.0,
            evidence: EvidenceLaw::perfect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_nonneg("tracker.drift", self.drift)?;
        check_probability("tracker.lock_loss_probability", self.lock_loss_probability)?;
        check_probability(
            "tracker.evidence.confusion_rate",
            self.evidence.confusion_rate,
        )?;
        self.evidence
            .on_target
            .validate("tracker.evidence.on_target")?;
        self.evidence
            .off_target
            .validate("tracker.evidence.off_target")
    }
}

/// What the simulated tracker is latched onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lock {
    Target,
    Distractor(usize),
    /// Following nothing; the box random-walks from where the lock was lost.
    Lost(BoundingBox),
}

/// Which law the evidence was drawn from on the last frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthState {
    OnTarget,
    OffTarget,
}

/// One frame of tracker output. Draw order: lock-loss coin, decoy index,
/// box jitter (4 normals), confusion coin, evidence (2 uniforms).
pub fn simulate_tracker(
    model: &SimTrackerModel,
    lock: &mut Lock,
    last_box: &BoundingBox,
    frame: &SceneFrame,
    rng: &mut impl Rng,
) -> (TrackOutput, TruthState) {
    let lose = rng.random::<f64>() < model.lock_loss_probability;
    let decoy =
        (!frame.distractors.is_empty()).then(|| rng.random_range(0..frame.distractors.len()));

    if let Lock::Target = lock {
        match frame.target {
            None => *lock = Lock::Lost(*last_box),
            Some(_) if lose => *lock = decoy.map_or(Lock::Lost(*last_box), Lock::Distractor),
            Some(_) => {}
        }
    }
    let anchor = match *lock {
        Lock::Target => frame.target.expect("target lock implies a visible target"),
        Lock::Distractor(j) => frame.distractors[j],
        Lock::Lost(b) => b,
    };
    let bbox = jitter_box(&anchor, model.drift, rng);
    if let Lock::Lost(_) = lock {
        *lock = Lock::Lost(bbox);
    }

    let on_target = frame.target.is_some_and(|t| iou(&bbox, &t) > 0.0);
    let confused = rng.random::<f64>() < model.evidence.confusion_rate;
    let law = if on_target != confused {
        &model.evidence.on_target
    } else {
        &model.evidence.off_target
    };
    let evidence = law.sample(rng);
    let truth = if on_target {
        TruthState::OnTarget
    } else {
        TruthState::OffTarget
    };
    (TrackOutput { bbox, evidence }, truth)
}

/// Tracker port backed by [`simulate_tracker`].
#[derive(Debug, Clone)]
pub struct SimTracker {
    pub model: SimTrackerModel,
    pub seed: u64,
    lock: Lock,
    last_box: Option<BoundingBox>,
}

impl SimTracker {
    pub fn new(model: SimTrackerModel, seed: u64) -> Self {
        Self {
            model,
            seed,
            lock: Lock::Lost(BoundingBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box")),
            last_box: None,
        }
    }

    pub fn lock(&self) -> Lock {
        self.lock
    }
}

impl Tracker<SceneFrame> for SimTracker {
    fn init(&mut self, template: &Template, _frame_index: usize, frame: &SceneFrame) {
        let tb = &template.bbox;
        self.lock = if frame.target.is_some_and(|t| iou(tb, &t) > 0.0) {
            Lock::Target
        } else {
            frame
                .distractors
                .iter()
                .enumerate()
                .map(|(j, d)| (j, iou(tb, d)))
                .filter(|(_, v)| *v > 0.0)
                .fold(None, |best: Option<(usize, f64)>, c| match best {
                    Some(b) if b.1 >= c.1 => Some(b),
                    _ => Some(c),
                })
                .map_or(Lock::Lost(*tb), |(j, _)| Lock::Distractor(j))
        };
        self.last_box = Some(*tb);
    }

    fn track(
        &mut self,
        template: &Template,
        frame_index: usize,
        frame: &SceneFrame,
    ) -> TrackOutput {
        let mut rng = stream_rng(self.seed, &[STREAM_TRACKER, frame_index as u64]);
        let last = self.last_box.unwrap_or(template.bbox);
        let (out, _) = simulate_tracker(&self.model, &mut self.lock, &last, frame, &mut rng);
        self.last_box = Some(out.bbox);
        out
    }
}

/// One pipeline configuration in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentArm {
    pub mode: Strategy,
    pub theta_eh: f64,
    pub theta_det: f64,
}

impl ExperimentArm {
    pub fn label(&self) -> String {
        match self.mode {
            Strategy::Evidential => format!("EC(theta_eh={})", self.theta_eh),
            Strategy::SimpleCombination => "SC".to_string(),
            Strategy::DetectionOnly => "DetOnly".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: ScenarioSpec,
    pub detector: SimDetectorModel,
    pub tracker: SimTrackerModel,
    pub arms: Vec<ExperimentArm>,
    pub trials: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.detector.validate()?;
        self.tracker.validate()?;
        if self.trials == 0 {
            return Err(Error::config("trials", "must be >= 1"));
        }
        if self.arms.is_empty() {
            return Err(Error::config("arms", "at least one arm is required"));
        }
        for (i, a) in self.arms.iter().enumerate() {
            PipelineConfig::new(a.theta_eh, a.theta_det)
                .map_err(|e| Error::config(format!("arms[{i}]"), e.to_string()))?;
        }
        Ok(())
    }
}

/// Runs one arm on one scenario. Detector and tracker streams hang off the
/// scenario seed, so every arm sees the same random draws.
pub fn run_arm(
    spec: &ExperimentSpec,
    arm: &ExperimentArm,
    scenario_seed: u64,
    scenario: &Scenario,
) -> Result<Vec<FramePrediction>> {
    let detector = SimDetector {
        model: spec.detector,
        seed: scenario_seed,
    };
    let tracker = SimTracker::new(spec.tracker, scenario_seed);
    let config = PipelineConfig::new(arm.theta_eh, arm.theta_det)?;
    match arm.mode {
        Strategy::Evidential => Pipeline::new(detector, tracker, config).run(&scenario.frames),
        Strategy::SimpleCombination => {
            Pipeline::simple_combination(detector, tracker, config).run(&scenario.frames)
        }
        Strategy::DetectionOnly => run_detection_only(&scenario.frames, detector, arm.theta_det),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub arm: usize,
    pub trial: usize,
    pub scenario_seed: u64,
    pub acc: f64,
    pub accuracy_term: f64,
    pub penalty_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: ExperimentArm,
    pub label: String,
    pub trials: usize,
    pub mean_acc: f64,
    /// Sample standard deviation (n − 1); 0 for a single trial.
    pub std_acc: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentTable {
    pub rows: Vec<ArmSummary>,
    pub trials: Vec<TrialRecord>,
}

impl ExperimentTable {
    pub fn row(&self, arm: usize) -> &ArmSummary {
        &self.rows[arm]
    }
}

pub fn trial_seed(base_seed: u64, trial: usize) -> u64 {
    derive_seed(base_seed, &[STREAM_TRIAL, trial as u64])
}

/// Mean and spread of Acc per arm over `spec.trials` seeded scenarios.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentTable> {
    spec.validate()?;
    let per_trial: Vec<Vec<TrialRecord>> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(spec.base_seed, trial);
            let scenario = generate_scenario(&ScenarioSpec {
                seed,
                ..spec.scenario.clone()
            })?;
            spec.arms
                .iter()
                .enumerate()
                .map(|(ai, arm)| {
                    let preds = run_arm(spec, arm, seed, &scenario)?;
                    let r = evaluate_sequence(&scenario.annotations, &preds, &spec.eval)?;
                    Ok(TrialRecord {
                        arm: ai,
                        trial,
                        scenario_seed: seed,
                        acc: r.acc,
                        accuracy_term: r.accuracy_term,
                        penalty_term: r.penalty_term,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = spec.trials as f64;
    let rows = spec
        .arms
        .iter()
        .enumerate()
        .map(|(ai, arm)| {
            // fixed trial order keeps the sums bit-reproducible
            let accs: Vec<f64> = per_trial.iter().map(|t| t[ai].acc).collect();
            let mean = accs.iter().sum::<f64>() / n;
            let var = if spec.trials > 1 {
                accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let std = var.sqrt();
            ArmSummary {
                arm: *arm,
                label: arm.label(),
                trials: spec.trials,
                mean_acc: mean,
                std_acc: std,
                std_error: std / n.sqrt(),
            }
        })
        .collect();

    let mut trials: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();
    trials.sort_by_key(|r| (r.arm, r.trial));
    Ok(ExperimentTable { rows, trials })
}

/// Noise-free everything: EC must score exactly 1.0.
pub fn perfect_oracle_experiment() -> ExperimentSpec {
    let mut scenario = ScenarioSpec::static_target(60, vec![[5, 25], [35, 60]], [24.0, 16.0]);
    scenario.trajectory.start = None;
    scenario.trajectory.velocity = [1.5, -0.5];
    scenario.trajectory.boundary = Boundary::Reflect;
    scenario.distractors = DistractorSpec {
        count: 3,
        ..Default::default()
    };
    ExperimentSpec {
        scenario,
        detector: SimDetectorModel::perfect(),
        tracker: SimTrackerModel::perfect(),
        arms: vec![
            ExperimentArm {
                mode: Strategy::Evidential,
                theta_eh: 0.2,
                theta_det: 0.5,
            },
            ExperimentArm {
                mode: Strategy::DetectionOnly,
                theta_eh: 0.2,
                theta_det: 0.5,
            },
        ],
        trials: 20,
        base_seed: 1,
        eval: EvalConfig::default(),
    }
}

/// Decoys, a mid-sequence absence, imperfect recall and a noisy evidential
/// head. Arms: EC(0.2), DetOnly, SC.
pub fn stress_experiment() -> ExperimentSpec {
    ExperimentSpec {
        scenario: ScenarioSpec {
            frame_size: FrameSize::default(),
            num_frames: 150,
            presence_intervals: vec![[10, 65], [95, 150]],
            trajectory: TrajectorySpec {
                start: None,
                size: [22.0, 16.0],
                velocity: [2.0, 1.0],
                velocity_jitter: 0.2,
                bursts: vec![MotionBurst {
                    start: 40,
                    end: 48,
                    velocity: [9.0, -6.0],
                }],
                boundary: Boundary::Reflect,
            },
            distractors: DistractorSpec {
                count: 4,
                size: [20.0, 14.0],
                positions: vec![],
            },
            seed: 0,
        },
        detector: SimDetectorModel {
            recall: 0.75,
            false_positive_rate: 0.35,
            localization_noise: 1.5,
            true_score: ScoreLaw {
                low: 0.55,
                high: 1.0,
            },
            false_score: ScoreLaw {
                low: 0.5,
                high: 0.95,
            },
        },
        tracker: SimTrackerModel {
            drift: 1.0,
            lock_loss_probability: 0.01,
            evidence: EvidenceLaw {
                on_target: EvidenceRange {
                    target: [30.0, 150.0],
                    background: [0.0, 2.0],
                },
                off_target: EvidenceRange {
                    target: [0.5, 8.0],
                    background: [0.0, 4.0],
                },
                confusion_rate: 0.05,
            },
        },
        arms: vec![
            ExperimentArm {
                mode: Strategy::Evidential,
                theta_eh: 0.2,
                theta_det: 0.5,
            },
            ExperimentArm {
                mode: Strategy::DetectionOnly,
                theta_eh: 0.2,
                theta_det: 0.5,
            },
            ExperimentArm {
                mode: Strategy::SimpleCombination,
                theta_eh: 0.2,
                theta_det: 0.5,
            },
        ],
        trials: 200,
        base_seed: 1,
        eval: EvalConfig::default(),
    }
}

/// The stress config with one EC arm per `θ_eh`.
pub fn threshold_sweep_experiment(thetas: &[f64]) -> ExperimentSpec {
    let mut spec = stress_experiment();
    spec.arms = thetas
        .iter()
        .map(|&theta_eh| ExperimentArm {
            mode: Strategy::Evidential,
            theta_eh,
            theta_det: 0.5,
        })
        .collect();
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_full_presence() {
        let spec = ScenarioSpec::static_target(10, vec![[0, 10]], [20.0, 10.0]);
        let sc = generate_scenario(&spec).unwrap();
        assert_eq!(sc.annotations.len(), 10);
        let first = sc.annotations[0].bbox().copied().unwrap();
        assert!(sc.annotations.iter().all(|a| a.bbox() == Some(&first)));
    }

    #[test]
    fn presence_pattern() {
        let spec = ScenarioSpec::static_target(10, vec![[3, 7]], [20.0, 10.0]);
        let sc = generate_scenario(&spec).unwrap();
        let pattern: String = sc
            .annotations
            .iter()
            .map(|a| if a.is_visible() { '1' } else { '0' })
            .collect();
        assert_eq!(pattern, "0001111000");
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let mut spec = stress_experiment().scenario;
        spec.seed = 1234;
        let a = generate_scenario(&spec).unwrap();
        let b = generate_scenario(&spec).unwrap();
        assert_eq!(a, b);
        spec.seed = 1235;
        let c = generate_scenario(&spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn leaving_the_frame_is_rejected() {
        let mut spec = ScenarioSpec::static_target(100, vec![[0, 100]], [20.0, 10.0]);
        spec.trajectory.velocity = [10.0, 0.0];
        let err = generate_scenario(&spec).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");

        spec.trajectory.boundary = Boundary::Reflect;
        let sc = generate_scenario(&spec).unwrap();
        assert!(sc
            .frames
            .iter()
            .all(|f| f.target.unwrap().is_inside(f.frame_size)));
    }

    #[test]
    fn spec_validation() {
        let mut spec = ScenarioSpec::static_target(10, vec![[0, 5], [4, 8]], [20.0, 10.0]);
        assert!(spec.validate().is_err());
        spec.presence_intervals = vec![[5, 11]];
        assert!(spec.validate().is_err());
        spec.presence_intervals = vec![[5, 5]];
        assert!(spec.validate().is_err());
        spec.presence_intervals = vec![];
        spec.num_frames = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn burst_frames_tagged_fast_motion() {
        let mut spec = ScenarioSpec::static_target(20, vec![[0, 20]], [10.0, 10.0]);
        spec.trajectory.bursts = vec![MotionBurst {
            start: 5,
            end: 8,
            velocity: [5.0, 0.0],
        }];
        let sc = generate_scenario(&spec).unwrap();
        let fm: Vec<usize> = (0..20)
            .filter(|&i| sc.annotations[i].has_attribute(Attribute::FM))
            .collect();
        assert_eq!(fm, vec![5, 6, 7]);
        assert!(sc.annotations[0].has_attribute(Attribute::TS));
        let x0 = sc.frames[4].target.unwrap().x();
        assert_eq!(sc.frames[8].target.unwrap().x(), x0 + 15.0);
    }

    fn frame_with(target: Option<BoundingBox>, distractors: Vec<BoundingBox>) -> SceneFrame {
        SceneFrame {
            index: 0,
            frame_size: FrameSize::default(),
            target,
            distractors,
        }
    }

    #[test]
    fn perfect_detector_returns_ground_truth() {
        let t = BoundingBox::new(10., 10., 20., 10.).unwrap();
        let f = frame_with(Some(t), vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = simulate_detector(&SimDetectorModel::perfect(), &f, &mut rng);
            assert_eq!(d.len(), 1);
            assert_eq!(d[0].bbox, t);
        }
    }

    #[test]
    fn zero_recall_never_detects_target() {
        let t = BoundingBox::new(10., 10., 20., 10.).unwrap();
        let f = frame_with(Some(t), vec![]);
        let model = SimDetectorModel {
            recall: 0.0,
            ..SimDetectorModel::perfect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..200).all(|_| simulate_detector(&model, &f, &mut rng).is_empty()));
    }

    #[test]
    fn empirical_recall() {
        let t = BoundingBox::new(10., 10., 20., 10.).unwrap();
        let f = frame_with(Some(t), vec![]);
        let model = SimDetectorModel {
            recall: 0.8,
            ..SimDetectorModel::perfect()
        };
        let mut det = SimDetector { model, seed: 99 };
        let hits = (0..10_000)
            .filter(|&i| !det.detect(i, &f).is_empty())
            .count();
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.8).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn false_positives_only_on_decoys() {
        let d = BoundingBox::new(100., 100., 20., 14.).unwrap();
        let model = SimDetectorModel {
            recall: 0.0,
            false_positive_rate: 1.0,
            ..SimDetectorModel::perfect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = simulate_detector(&model, &frame_with(None, vec![d]), &mut rng);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, d);
        assert!(simulate_detector(&model, &frame_with(None, vec![]), &mut rng).is_empty());
    }

    #[test]
    fn perfect_tracker_follows_then_flags_absence() {
        let t = BoundingBox::new(10., 10., 20., 10.).unwrap();
        let mut tracker = SimTracker::new(SimTrackerModel::perfect(), 5);
        let template = Template {
            bbox: t,
            frame_index: 0,
        };
        let f0 = frame_with(Some(t), vec![]);
        tracker.init(&template, 0, &f0);
        assert_eq!(tracker.lock(), Lock::Target);
        let moved = t.translated(3.0, 1.0).unwrap();
        let out = tracker.track(&template, 1, &frame_with(Some(moved), vec![]));
        assert_eq!(out.bbox, moved);
        assert!(out.evidence.uncertainty() < 0.2);
        let out = tracker.track(&template, 2, &frame_with(None, vec![]));
        assert_eq!(
            crate::edl::judge(&out.evidence, 0.2).unwrap(),
            crate::edl::Decision::SwitchToDetection
        );
    }

    #[test]
    fn full_confusion_inverts_evidence() {
        let t = BoundingBox::new(10., 10., 20., 10.).unwrap();
        let mut model = SimTrackerModel::perfect();
        model.evidence.confusion_rate = 1.0;
        let mut tracker = SimTracker::new(model, 5);
        let template = Template {
            bbox: t,
            frame_index: 0,
        };
        let f = frame_with(Some(t), vec![]);
        tracker.init(&template, 0, &f);
        let on = tracker.track(&template, 1, &f);
        assert_eq!(
            crate::edl::judge(&on.evidence, 0.2).unwrap(),
            crate::edl::Decision::SwitchToDetection
        );
        let off = tracker.track(&template, 2, &frame_with(None, vec![]));
        assert_eq!(
            crate::edl::judge(&off.evidence, 0.2).unwrap(),
            crate::edl::Decision::ContinueTracking
        );
    }

    #[test]
    fn template_on_decoy_locks_decoy() {
        let t = BoundingBox::new(10., 10., 20., 10.).unwrap();
        let d = BoundingBox::new(300., 200., 20., 14.).unwrap();
        let mut tracker = SimTracker::new(SimTrackerModel::perfect(), 5);
        let template = Template {
            bbox: d,
            frame_index: 0,
        };
        tracker.init(&template, 0, &frame_with(Some(t), vec![d]));
        assert_eq!(tracker.lock(), Lock::Distractor(0));
    }

    #[test]
    fn seeds_are_distinct_per_stream() {
        let a = derive_seed(7, &[STREAM_DETECTOR, 0]);
        let b = derive_seed(7, &[STREAM_TRACKER, 0]);
        let c = derive_seed(7, &[STREAM_DETECTOR, 1]);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive_seed(7, &[STREAM_DETECTOR, 0]));
    }

    #[test]
    fn experiment_validation() {
        let mut spec = stress_experiment();
        spec.trials = 0;
        assert!(run_experiment(&spec).is_err());
        let mut spec = stress_experiment();
        spec.detector.recall = 1.5;
        let err = run_experiment(&spec).unwrap_err();
        assert!(err.to_string().contains("detector.recall"), "{err}");
    }
}
