use antiuav_core::edl::{
    edl_loss, edl_loss_grad, judge, predict, ClassLabel, Decision, DirichletEvidence,
};
use antiuav_core::geometry::{box_regression_loss, iou, BoundingBox, FrameSize, LossWeights};
use antiuav_core::metric::{
    attribute_slice, evaluate_sequence, frame_score, Attribute, EvalConfig, FrameAnnotation,
    FramePrediction,
};
use antiuav_core::rdm::{
    attention_weights, cross_attention_ts, rdm_forward, rdm_forward_with_activations,
    scaled_attention, RdmWeights, TokenMatrix, TokenOrigin,
};
use ndarray::Array2;
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..500.0f64, 0.0..400.0f64, 0.5..80.0f64, 0.5..80.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

fn evidence(k: usize) -> impl Strategy<Value = DirichletEvidence> {
    prop::collection::vec(0.0..50.0f64, k).prop_map(|e| DirichletEvidence::new(e).unwrap())
}

/// Visible flag, gt box and prediction per frame.
fn sequence(max_len: usize) -> impl Strategy<Value = (Vec<FrameAnnotation>, Vec<FramePrediction>)> {
    prop::collection::vec((any::<bool>(), bbox(), prop::option::of(bbox())), 1..max_len).prop_map(
        |frames| {
            frames
                .into_iter()
                .map(|(vis, gt, pred)| {
                    let a = if vis {
                        FrameAnnotation::visible(gt).unwrap()
                    } else {
                        FrameAnnotation::absent()
                    };
                    (a, FramePrediction { bbox: pred })
                })
                .unzip()
        },
    )
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn iou_of_box_with_itself_is_one(a in bbox()) {
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_translation_invariant(a in bbox(), b in bbox(), dx in -100.0..100.0f64, dy in -100.0..100.0f64) {
        let moved = iou(&a.translated(dx, dy).unwrap(), &b.translated(dx, dy).unwrap());
        prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_scale_invariant(a in bbox(), b in bbox(), s in 0.1..10.0f64) {
        let scale = |x: &BoundingBox| BoundingBox::new(x.x() * s, x.y() * s, x.w() * s, x.h() * s).unwrap();
        prop_assert!((iou(&scale(&a), &scale(&b)) - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn regression_loss_nonnegative_and_zero_at_gt(a in bbox(), b in bbox()) {
        let w = LossWeights::default();
        prop_assert!(box_regression_loss(&a, &b, &w, None).unwrap() >= 0.0);
        prop_assert!(box_regression_loss(&a, &b, &w, Some(FrameSize::default())).unwrap() >= 0.0);
        prop_assert!(box_regression_loss(&a, &a, &w, None).unwrap().abs() < 1e-12);
    }

    #[test]
    fn acc_within_bounds((gts, preds) in sequence(60), alpha in 0.0..1.0f64, beta in 0.05..2.0f64) {
        let cfg = EvalConfig::new(alpha, beta).unwrap();
        let r = evaluate_sequence(&gts, &preds, &cfg).unwrap();
        prop_assert!(r.acc >= -alpha - 1e-12 && r.acc <= 1.0 + 1e-12);
        prop_assert_eq!(r.acc, r.accuracy_term - r.penalty_term);
        prop_assert!(r.num_visible <= r.num_frames);
        prop_assert!(r.per_frame_scores.iter().all(|s| (0.0..=1.0).contains(s)));
        prop_assert!((0.0..=alpha).contains(&r.penalty_term));
    }

    #[test]
    fn fixing_a_frame_never_lowers_acc((gts, preds) in sequence(40), pick in any::<prop::sample::Index>()) {
        let cfg = EvalConfig::default();
        let i = pick.index(gts.len());
        let before = evaluate_sequence(&gts, &preds, &cfg).unwrap();
        let mut better = preds.clone();
        better[i] = FramePrediction { bbox: gts[i].bbox().copied() };
        let after = evaluate_sequence(&gts, &better, &cfg).unwrap();
        prop_assert!(after.acc >= before.acc);
        if gts[i].is_visible() && preds[i].bbox.is_none() {
            prop_assert!(after.acc > before.acc);
        }
    }

    #[test]
    fn higher_iou_never_lowers_acc((gts, preds) in sequence(40), pick in any::<prop::sample::Index>(), shrink in 0.0..1.0f64) {
        // move the prediction toward the gt box along a straight line
        let cfg = EvalConfig::default();
        let i = pick.index(gts.len());
        let (Some(gt), Some(p)) = (gts[i].bbox().copied(), preds[i].bbox) else { return Ok(()); };
        let lerp = |a: f64, b: f64| a + (b - a) * shrink;
        let closer = BoundingBox::new(lerp(p.x(), gt.x()), lerp(p.y(), gt.y()), lerp(p.w(), gt.w()), lerp(p.h(), gt.h())).unwrap();
        prop_assume!(iou(&closer, &gt) >= iou(&p, &gt));
        let before = evaluate_sequence(&gts, &preds, &cfg).unwrap();
        let mut moved = preds.clone();
        moved[i] = FramePrediction::boxed(closer);
        prop_assert!(evaluate_sequence(&gts, &moved, &cfg).unwrap().acc >= before.acc);
    }

    #[test]
    fn no_failures_means_no_penalty((gts, _) in sequence(40)) {
        let preds: Vec<FramePrediction> = gts.iter().map(|g| FramePrediction { bbox: g.bbox().copied() }).collect();
        let r = evaluate_sequence(&gts, &preds, &EvalConfig::default()).unwrap();
        prop_assert_eq!(r.penalty_term, 0.0);
        prop_assert_eq!(r.acc, 1.0);
    }

    #[test]
    fn attribute_slice_matches_explicit_filter((gts, preds) in sequence(40), mask in prop::collection::vec(any::<bool>(), 40)) {
        let cfg = EvalConfig::default();
        let tagged: Vec<FrameAnnotation> = gts.iter().zip(&mask)
            .map(|(g, &m)| if m { g.clone().with_attributes([Attribute::FM]) } else { g.clone() })
            .collect();
        let (fg, fp): (Vec<_>, Vec<_>) = tagged.iter().zip(&preds)
            .filter(|(g, _)| g.has_attribute(Attribute::FM))
            .map(|(g, p)| (g.clone(), *p))
            .unzip();
        let slice = attribute_slice(&tagged, &preds, Attribute::FM, &cfg).unwrap();
        if fg.is_empty() {
            prop_assert!(slice.is_none());
        } else {
            prop_assert_eq!(slice.unwrap(), evaluate_sequence(&fg, &fp, &cfg).unwrap());
        }
    }

    #[test]
    fn frame_score_matches_rule(vis in any::<bool>(), gt in bbox(), pred in prop::option::of(bbox())) {
        let a = if vis { FrameAnnotation::visible(gt).unwrap() } else { FrameAnnotation::absent() };
        let p = FramePrediction { bbox: pred };
        let expect = match (vis, pred) {
            (true, Some(b)) => iou(&b, &gt),
            (true, None) => 0.0,
            (false, None) => 1.0,
            (false, Some(_)) => 0.0,
        };
        prop_assert_eq!(frame_score(&a, &p), expect);
    }

    #[test]
    fn edl_probabilities_and_uncertainty(k in 2usize..6, seed in prop::collection::vec(0.0..1e6f64, 6)) {
        let ev = DirichletEvidence::new(seed[..k].to_vec()).unwrap();
        let p = predict(&ev);
        prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.uncertainty > 0.0 && p.uncertainty <= 1.0);
    }

    #[test]
    fn edl_loss_nonnegative_and_gradient_sign(ev in evidence(3), c in 0usize..3) {
        let label = ClassLabel::new(c, 3).unwrap();
        prop_assert!(edl_loss(&ev, &label).unwrap() >= 0.0);
        let g = edl_loss_grad(&ev, &label).unwrap();
        // more evidence for the true class lowers the loss; for others raises it
        prop_assert!(g[c] < 0.0);
        for (k, gk) in g.iter().enumerate() {
            if k != c { prop_assert!(*gk > 0.0); }
        }
    }

    #[test]
    fn more_target_evidence_lowers_loss(ev in evidence(2), extra in 0.01..20.0f64) {
        let label = ClassLabel::new(0, 2).unwrap();
        let e = ev.evidence();
        let more = DirichletEvidence::binary(e[0] + extra, e[1]).unwrap();
        prop_assert!(edl_loss(&more, &label).unwrap() < edl_loss(&ev, &label).unwrap());
    }

    #[test]
    fn judge_monotone_in_theta(ev in evidence(2), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if judge(&ev, lo).unwrap() == Decision::ContinueTracking {
            prop_assert_eq!(judge(&ev, hi).unwrap(), Decision::ContinueTracking);
        }
        prop_assert_eq!(judge(&ev, 0.0).unwrap(), Decision::SwitchToDetection);
    }

    #[test]
    fn judge_never_keeps_a_losing_target(t in 0.0..50.0f64, extra in 0.0..50.0f64, theta in 0.0..=1.0f64) {
        let ev = DirichletEvidence::binary(t, t + extra).unwrap();
        prop_assert_eq!(judge(&ev, theta).unwrap(), Decision::SwitchToDetection);
    }

    #[test]
    fn attention_rows_are_distributions(q in matrix(5, 4), k in matrix(7, 4)) {
        let w = attention_weights(&q.view(), &k.view()).unwrap();
        for row in w.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_stays_in_value_envelope(q in matrix(4, 3), k in matrix(6, 3), v in matrix(6, 3)) {
        let out = scaled_attention(&q.view(), &k.view(), &v.view()).unwrap();
        for c in 0..3 {
            let lo = v.column(c).fold(f64::INFINITY, |m, &x| m.min(x));
            let hi = v.column(c).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            for &x in out.column(c) {
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn empty_template_cross_attention_is_self_attention(q in matrix(4, 3), k in matrix(6, 3), v in matrix(6, 3)) {
        let empty = Array2::<f64>::zeros((0, 3));
        let cross = cross_attention_ts(&q.view(), &empty.view(), &k.view(), &empty.view(), &v.view()).unwrap();
        prop_assert_eq!(cross, scaled_attention(&q.view(), &k.view(), &v.view()).unwrap());
    }

    #[test]
    fn search_self_attention_ignores_template(t in matrix(4, 4), t2 in matrix(4, 4), s in matrix(9, 4), seed in any::<u64>()) {
        let w = RdmWeights::random(4, seed);
        let sm = TokenMatrix::new(s, TokenOrigin::Search).unwrap();
        let (_, _, a) = rdm_forward_with_activations(&TokenMatrix::new(t, TokenOrigin::Template).unwrap(), &sm, &w).unwrap();
        let (_, _, b) = rdm_forward_with_activations(&TokenMatrix::new(t2, TokenOrigin::Template).unwrap(), &sm, &w).unwrap();
        prop_assert_eq!(a.search_self, b.search_self);
    }

    #[test]
    fn rdm_preserves_shapes(ts in 1usize..4, ss in 1usize..5, d in 1usize..6, seed in any::<u64>()) {
        let t = TokenMatrix::new(Array2::from_elem((ts * ts, d), 0.3), TokenOrigin::Template).unwrap();
        let s = TokenMatrix::new(Array2::from_elem((ss * ss, d), -0.2), TokenOrigin::Search).unwrap();
        let (to, so) = rdm_forward(&t, &s, &RdmWeights::random(d, seed)).unwrap();
        prop_assert_eq!(to.tokens().dim(), (ts * ts, d));
        prop_assert_eq!(so.tokens().dim(), (ss * ss, d));
    }
}
