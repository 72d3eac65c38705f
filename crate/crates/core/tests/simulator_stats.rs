use std::path::PathBuf;

use antiuav_core::geometry::{iou, BoundingBox, FrameSize};
use antiuav_core::io::load_experiment_config;
use antiuav_core::simulator::{
    generate_scenario, perfect_oracle_experiment, run_experiment, simulate_detector,
    simulate_tracker, stream_rng, stress_experiment, threshold_sweep_experiment, EvidenceLaw,
    ExperimentSpec, Lock, MotionBurst, ScenarioSpec, SceneFrame, ScoreLaw, SimDetectorModel,
    SimTrackerModel,
};
use antiuav_core::pipeline::Strategy;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn centred_frame(index: usize) -> SceneFrame {
    SceneFrame {
        index,
        frame_size: FrameSize::default(),
        target: Some(BoundingBox::from_center(320.0, 256.0, 24.0, 16.0).unwrap()),
        distractors: vec![],
    }
}

#[test]
fn detector_recall_law_of_large_numbers() {
    let model = SimDetectorModel {
        recall: 0.8,
        false_positive_rate: 0.0,
        localization_noise: 1.0,
        true_score: ScoreLaw { low: 0.6, high: 1.0 },
        false_score: ScoreLaw { low: 0.0, high: 0.5 },
    };
    let mut rng = stream_rng(2024, &[]);
    let hits = (0..10_000)
        .filter(|&i| !simulate_detector(&model, &centred_frame(i), &mut rng).is_empty())
        .count();
    let rate = hits as f64 / 10_000.0;
    assert!((rate - 0.8).abs() <= 0.01, "empirical recall {rate}");
}

/// Mean IoU of a 24×16 box jittered with σ = 2 px on centre and size,
/// from a 2·10⁶-sample Monte-Carlo run outside this crate; per-frame
/// standard deviation 0.1068.
const DRIFT2_MEAN_IOU: f64 = 0.7045;
const DRIFT2_IOU_SD: f64 = 0.1068;

#[test]
fn tracker_drift_band() {
    let model = SimTrackerModel {
        drift: 2.0,
        lock_loss_probability: 0.0,
        evidence: EvidenceLaw::perfect(),
    };
    let mut lock = Lock::Target;
    let mut rng = stream_rng(77, &[]);
    let frame = centred_frame(0);
    let gt = frame.target.unwrap();
    let n = 1000;
    let mean: f64 = (0..n)
        .map(|_| {
            let (out, _) = simulate_tracker(&model, &mut lock, &gt, &frame, &mut rng);
            iou(&out.bbox, &gt)
        })
        .sum::<f64>()
        / n as f64;
    let band = 4.0 * DRIFT2_IOU_SD / (n as f64).sqrt();
    assert!(
        (mean - DRIFT2_MEAN_IOU).abs() <= band,
        "mean IoU {mean} outside {DRIFT2_MEAN_IOU} ± {band}"
    );
}

#[test]
fn fast_motion_scenario_is_reproducible() {
    let mut spec = stress_experiment().scenario;
    spec.seed = 1234;
    spec.trajectory.bursts = vec![MotionBurst {
        start: 20,
        end: 60,
        velocity: [12.0, 8.0],
    }];
    let a = generate_scenario(&spec).unwrap();
    let b = generate_scenario(&spec).unwrap();
    assert_eq!(a.annotations, b.annotations);
    assert_eq!(a.frames, b.frames);
    let c = generate_scenario(&ScenarioSpec { seed: 1235, ..spec }).unwrap();
    assert_ne!(a.annotations, c.annotations);
}

#[test]
fn generated_boxes_stay_in_frame() {
    for seed in 0..50 {
        let spec = ScenarioSpec {
            seed,
            ..stress_experiment().scenario
        };
        let sc = generate_scenario(&spec).unwrap();
        for f in &sc.frames {
            if let Some(t) = f.target {
                assert!(t.is_inside(spec.frame_size), "seed {seed} frame {}", f.index);
            }
        }
    }
}

fn ec_only(mut spec: ExperimentSpec) -> ExperimentSpec {
    spec.arms.retain(|a| a.mode == Strategy::Evidential);
    spec
}

#[test]
fn more_lock_loss_never_helps() {
    let mut prev: Option<(f64, f64)> = None;
    for p in [0.0, 0.01, 0.03, 0.1] {
        let mut spec = ec_only(stress_experiment());
        spec.tracker.lock_loss_probability = p;
        let row = run_experiment(&spec).unwrap().rows[0].clone();
        if let Some((mean, se)) = prev {
            assert!(
                row.mean_acc <= mean + se.max(row.std_error),
                "lock loss {p}: {} > {mean}",
                row.mean_acc
            );
        }
        prev = Some((row.mean_acc, row.std_error));
    }
}

#[test]
fn full_confusion_drags_evidential_toward_simple() {
    let base = stress_experiment();
    let mut confused = base.clone();
    confused.tracker.evidence.confusion_rate = 1.0;
    let t0 = run_experiment(&base).unwrap();
    let t1 = run_experiment(&confused).unwrap();
    let (ec0, sc) = (t0.rows[0].mean_acc, t0.rows[2].mean_acc);
    let ec1 = t1.rows[0].mean_acc;
    assert!(ec1 < ec0, "confused EC {ec1} vs clean EC {ec0}");
    assert!((ec1 - sc).abs() < (ec0 - sc).abs());
}

#[test]
fn oracle_ceiling_on_many_scenarios() {
    let mut spec = perfect_oracle_experiment();
    spec.trials = 100;
    spec.base_seed = 99;
    let table = run_experiment(&spec).unwrap();
    assert!(table.trials.iter().filter(|t| t.arm == 0).all(|t| t.acc == 1.0));
}

#[test]
fn config_files_match_presets() {
    for (file, spec) in [
        ("stress.json", stress_experiment()),
        ("perfect.json", perfect_oracle_experiment()),
        ("sweep.json", threshold_sweep_experiment(&[0.05, 0.2, 0.5, 0.8])),
    ] {
        let resolved = load_experiment_config(config_path(file))
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(resolved, spec, "{file}");
    }
}
