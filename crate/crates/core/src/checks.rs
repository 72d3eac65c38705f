//! On-demand property suites behind `antiuav check`.
//!
//! Each suite compares the library against an independent route: finite
//! differences of a literal loss transcription for the EDL gradient, a
//! compensated-sum transcription of the Acc formula for the metric, and a
//! loop-by-loop forward pass for the attention block.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::edl::{edl_loss, edl_loss_grad, predict, ClassLabel, DirichletEvidence};
use crate::geometry::{iou, BoundingBox};
use crate::metric::{evaluate_sequence, EvalConfig, FrameAnnotation, FramePrediction};
use crate::rdm::{
    attention_weights, cross_attention_ts, rdm_forward, rdm_forward_with_activations,
    scaled_attention, RdmWeights, TokenMatrix, TokenOrigin,
};
use crate::simulator::stream_rng;

pub const EDL_FD_STEP: f64 = 1e-6;
pub const EDL_GRAD_REL_TOL: f64 = 1e-6;
pub const METRIC_ABS_TOL: f64 = 1e-12;
pub const SOFTMAX_SUM_TOL: f64 = 1e-12;
pub const RDM_REFERENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckFailure {
    pub case: usize,
    /// Seed that regenerates the failing case via [`case_rng`].
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub target: &'static str,
    pub cases: usize,
    pub checks_run: usize,
    pub failures: Vec<CheckFailure>,
}

impl CheckReport {
    fn new(target: &'static str, cases: usize) -> Self {
        Self {
            target,
            cases,
            checks_run: 0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn expect(&mut self, ok: bool, case: usize, seed: u64, detail: impl FnOnce() -> String) {
        self.checks_run += 1;
        if !ok {
            self.failures.push(CheckFailure {
                case,
                seed,
                detail: detail(),
            });
        }
    }
}

/// Generator for case `case` of a suite seeded with `seed`.
pub fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    stream_rng(seed, &[case as u64])
}

fn case_seed(seed: u64, case: usize) -> u64 {
    crate::simulator::derive_seed(seed, &[case as u64])
}

/// `Σ_k y_k (log S − log α_k)` straight from the definition, on raw evidence
/// (no validation, so it can be probed slightly below zero).
fn literal_edl_loss(evidence: &[f64], class: usize) -> f64 {
    let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
    let s: f64 = alpha.iter().sum();
    (0..alpha.len())
        .map(|k| {
            let y = if k == class { 1.0 } else { 0.0 };
            y * (s.ln() - alpha[k].ln())
        })
        .sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Gradient, normalization and uncertainty-range checks for the EDL math.
///
/// With `mutate` the finite-difference side uses a deliberately perturbed
/// loss; the suite must then fail.
pub fn check_edl(cases: usize, seed: u64, mutate: bool) -> CheckReport {
    let mut report = CheckReport::new("edl", cases);
    for case in 0..cases {
        let cs = case_seed(seed, case);
        let mut rng = case_rng(seed, case);
        let k = [2usize, 3, 5][rng.random_range(0..3)];
        let evidence: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..20.0)).collect();
        let class = rng.random_range(0..k);
        let ev = DirichletEvidence::new(evidence.clone()).expect("valid evidence");
        let label = ClassLabel::new(class, k).expect("valid label");

        let loss_fn = |e: &[f64]| {
            let base = literal_edl_loss(e, class);
            if mutate {
                base + 1e-3 * e.iter().map(|v| v * v).sum::<f64>()
            } else {
                base
            }
        };

        let grad = edl_loss_grad(&ev, &label).expect("matching K");
        for i in 0..k {
            let mut up = evidence.clone();
            let mut dn = evidence.clone();
            up[i] += EDL_FD_STEP;
            dn[i] -= EDL_FD_STEP;
            let numeric = (loss_fn(&up) - loss_fn(&dn)) / (2.0 * EDL_FD_STEP);
            let err = rel_err(grad[i], numeric);
            report.expect(err <= EDL_GRAD_REL_TOL, case, cs, || {
                format!(
                    "dL/de[{i}]: analytic {} vs numeric {numeric} (rel {err:.3e})",
                    grad[i]
                )
            });
        }

        let loss = edl_loss(&ev, &label).expect("matching K");
        let literal = literal_edl_loss(&evidence, class);
        report.expect((loss - literal).abs() <= 1e-12, case, cs, || {
            format!("loss {loss} vs literal {literal}")
        });

        let p = predict(&ev);
        let total: f64 = p.probabilities.iter().sum();
        report.expect((total - 1.0).abs() <= 1e-12, case, cs, || {
            format!("sum p = {total}")
        });
        report.expect(
            p.uncertainty > 0.0 && p.uncertainty <= 1.0,
            case,
            cs,
            || format!("u = {} outside (0, 1]", p.uncertainty),
        );
    }
    report
}

/// Error-free transformation `a + b = s + e`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// Compensated (double-double) accumulator.
#[derive(Default, Clone, Copy)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.hi, x);
        let (hi, lo) = two_sum(s, e + self.lo);
        self.hi = hi;
        self.lo = lo;
    }

    fn div(self, n: f64) -> f64 {
        let q = self.hi / n;
        // one correction step using the remainder
        let r = self.hi - q * n + self.lo;
        q + r / n
    }
}

/// Acc written frame by frame from the formula, with compensated sums.
pub fn acc_transcription(
    gts: &[FrameAnnotation],
    preds: &[FramePrediction],
    cfg: &EvalConfig,
) -> f64 {
    let t_total = gts.len() as f64;
    let mut first = DoubleDouble::default();
    let mut visible = 0usize;
    let mut failures = 0usize;
    for (g, p) in gts.iter().zip(preds) {
        let v = if g.is_visible() { 1.0 } else { 0.0 };
        let iou_t = match (g.bbox(), p.bbox.as_ref()) {
            (Some(gb), Some(pb)) => iou(pb, gb),
            _ => 0.0,
        };
        let p_t = if p.bbox.is_none() { 1.0 } else { 0.0 };
        first.add(iou_t * v + p_t * (1.0 - v));
        if g.is_visible() {
            visible += 1;
            let q_t = p.bbox.is_none() || iou_t == 0.0;
            failures += q_t as usize;
        }
    }
    let accuracy = first.div(t_total);
    let penalty = if visible == 0 {
        0.0
    } else {
        cfg.alpha() * (failures as f64 / visible as f64).powf(cfg.beta())
    };
    accuracy - penalty
}

/// A random annotated sequence with a mix of exact, overlapping, disjoint,
/// empty and false-alarm predictions.
pub fn random_sequence(
    rng: &mut impl Rng,
    len: usize,
) -> (Vec<FrameAnnotation>, Vec<FramePrediction>) {
    let mut gts = Vec::with_capacity(len);
    let mut preds = Vec::with_capacity(len);
    let p_visible: f64 = rng.random();
    for _ in 0..len {
        let visible = rng.random::<f64>() < p_visible;
        let gt_box = BoundingBox::new(
            rng.random_range(0.0..600.0),
            rng.random_range(0.0..480.0),
            rng.random_range(1.0..60.0),
            rng.random_range(1.0..60.0),
        )
        .expect("finite box");
        let pred = match rng.random_range(0..5) {
            0 => None,
            1 => Some(gt_box),
            2 => Some(
                BoundingBox::new(
                    gt_box.x() + rng.random_range(-30.0..30.0),
                    gt_box.y() + rng.random_range(-30.0..30.0),
                    rng.random_range(1.0..60.0),
                    rng.random_range(1.0..60.0),
                )
                .expect("finite box"),
            ),
            3 => Some(
                gt_box
                    .translated(gt_box.w() + 5.0, 0.0)
                    .expect("finite box"),
            ),
            _ => Some(
                BoundingBox::new(
                    gt_box.x() + rng.random_range(-5.0..5.0),
                    gt_box.y() + rng.random_range(-5.0..5.0),
                    gt_box.w(),
                    gt_box.h(),
                )
                .expect("finite box"),
            ),
        };
        gts.push(if visible {
            FrameAnnotation::visible(gt_box).expect("positive area")
        } else {
            FrameAnnotation::absent()
        });
        preds.push(FramePrediction { bbox: pred });
    }
    (gts, preds)
}

/// `evaluate_sequence` against [`acc_transcription`] on random sequences
/// of length 1–500.
pub fn check_metric(cases: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("metric", cases);
    let cfg = EvalConfig::default();
    for case in 0..cases {
        let cs = case_seed(seed, case);
        let mut rng = case_rng(seed, case);
        let len = rng.random_range(1..=500);
        let (gts, preds) = random_sequence(&mut rng, len);
        let r = evaluate_sequence(&gts, &preds, &cfg).expect("valid sequence");
        let oracle = acc_transcription(&gts, &preds, &cfg);
        let err = (r.acc - oracle).abs();
        report.expect(err <= METRIC_ABS_TOL, case, cs, || {
            format!("acc {} vs transcription {oracle} (|diff| {err:.3e})", r.acc)
        });
        report.expect(r.acc >= -cfg.alpha() && r.acc <= 1.0, case, cs, || {
            format!("acc {} outside [-alpha, 1]", r.acc)
        });
    }
    report
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        sigma * rng.sample::<f64, _>(StandardNormal)
    })
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Array2<f64>) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matmul(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    let cols = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn attend(q: &Rows, k: &Rows, v: &Rows) -> Rows {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vr)| w / z * vr[c]).sum())
                .collect()
        })
        .collect()
}

fn depthwise(x: &Rows, kernel: &Rows, side: usize) -> Rows {
    let d = x[0].len();
    let mut out = vec![vec![0.0; d]; side * side];
    for r in 0..side as isize {
        for c in 0..side as isize {
            for ch in 0..d {
                let mut acc = 0.0;
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= side as isize || cc >= side as isize {
                            continue;
                        }
                        let tap = kernel[ch][((dr + 1) * 3 + (dc + 1)) as usize];
                        acc += tap * x[(rr * side as isize + cc) as usize][ch];
                    }
                }
                out[(r * side as isize + c) as usize][ch] = acc;
            }
        }
    }
    out
}

/// Loop-by-loop forward pass of the relevance decoupling block with
/// project-then-add fusion. Returns (template', search').
pub fn rdm_reference(template: &Array2<f64>, search: &Array2<f64>, w: &RdmWeights) -> (Rows, Rows) {
    let t_side = (template.nrows() as f64).sqrt().round() as usize;
    let s_side = (search.nrows() as f64).sqrt().round() as usize;
    let xt = to_rows(template);
    let xs = to_rows(search);
    let mt = depthwise(&xt, &to_rows(&w.template_mixing.weights), t_side);
    let ms = depthwise(&xs, &to_rows(&w.search_mixing.weights), s_side);

    let qt = matmul(&mt, &to_rows(&w.template_qkv.query));
    let kt = matmul(&mt, &to_rows(&w.template_qkv.key));
    let vt = matmul(&mt, &to_rows(&w.template_qkv.value));
    let qs = matmul(&ms, &to_rows(&w.search_qkv.query));
    let ks = matmul(&ms, &to_rows(&w.search_qkv.key));
    let vs = matmul(&ms, &to_rows(&w.search_qkv.value));

    let self_t = attend(&qt, &kt, &vt);
    let self_s = attend(&qs, &ks, &vs);
    let km: Rows = kt.iter().chain(ks.iter()).cloned().collect();
    let vm: Rows = vt.iter().chain(vs.iter()).cloned().collect();
    let cross = attend(&qs, &km, &vm);

    let cat: Rows = self_s
        .iter()
        .zip(&cross)
        .map(|(a, b)| a.iter().chain(b).cloned().collect())
        .collect();
    let fused_s = matmul(&cat, &to_rows(&w.reduction));

    let out = to_rows(&w.output);
    let proj_t = matmul(&self_t, &out);
    let proj_s = matmul(&fused_s, &out);
    let add = |x: &Rows, y: &Rows| -> Rows {
        x.iter()
            .zip(y)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect()
    };
    (add(&xt, &proj_t), add(&xs, &proj_s))
}

fn max_abs_diff(a: &Array2<f64>, b: &Rows) -> f64 {
    a.rows()
        .into_iter()
        .zip(b)
        .flat_map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Softmax normalization, convex-hull envelope, decoupling, empty-template
/// reduction and the reference forward pass.
pub fn check_rdm(cases: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("rdm", cases);
    for case in 0..cases {
        let cs = case_seed(seed, case);
        let mut rng = case_rng(seed, case);
        let d = rng.random_range(1..=8);
        let (nq, nk) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let sigma = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let q = gaussian_matrix(&mut rng, nq, d, sigma);
        let k = gaussian_matrix(&mut rng, nk, d, sigma);
        let v = gaussian_matrix(&mut rng, nk, d, sigma);

        let w = attention_weights(&q.view(), &k.view()).expect("shapes agree");
        let row_ok = w.rows().into_iter().all(|r| {
            (r.sum() - 1.0).abs() <= SOFTMAX_SUM_TOL && r.iter().all(|x| (0.0..=1.0).contains(x))
        });
        report.expect(row_ok, case, cs, || {
            "attention row not a probability vector".into()
        });

        let out = scaled_attention(&q.view(), &k.view(), &v.view()).expect("shapes agree");
        let mut inside = true;
        for c in 0..d {
            let col = v.column(c);
            let lo = col.fold(f64::INFINITY, |m, &x| m.min(x));
            let hi = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            inside &= out
                .column(c)
                .iter()
                .all(|&x| x >= lo - slack && x <= hi + slack);
        }
        report.expect(inside, case, cs, || "output left the value envelope".into());

        let empty = Array2::<f64>::zeros((0, d));
        let reduced = cross_attention_ts(
            &q.view(),
            &empty.view(),
            &k.view(),
            &empty.view(),
            &v.view(),
        )
        .expect("shapes agree");
        report.expect(reduced == out, case, cs, || {
            "empty-template cross attention differs".into()
        });

        // logits of magnitude 1e4 stay finite
        let a = (1e4 / (d as f64).sqrt()).sqrt();
        let big_q = q.mapv(|x| a * x.signum());
        let big_k = k.mapv(|x| a * x.signum());
        let extreme =
            scaled_attention(&big_q.view(), &big_k.view(), &v.view()).expect("shapes agree");
        report.expect(extreme.iter().all(|x| x.is_finite()), case, cs, || {
            "non-finite output at logits near 1e4".into()
        });

        // forward pass against the loop reference
        let (ts, ss) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let d_block = rng.random_range(1..=6);
        let template = gaussian_matrix(&mut rng, ts * ts, d_block, 1.0);
        let search = gaussian_matrix(&mut rng, ss * ss, d_block, 1.0);
        let weights = RdmWeights::random(d_block, cs);
        let t = TokenMatrix::new(template.clone(), TokenOrigin::Template).expect("finite");
        let s = TokenMatrix::new(search.clone(), TokenOrigin::Search).expect("finite");
        let (t_out, s_out) = rdm_forward(&t, &s, &weights).expect("square grids");
        let (rt, rs) = rdm_reference(&template, &search, &weights);
        let err = max_abs_diff(t_out.tokens(), &rt).max(max_abs_diff(s_out.tokens(), &rs));
        report.expect(err <= RDM_REFERENCE_TOL, case, cs, || {
            format!("forward pass differs from reference by {err:.3e}")
        });

        // search self-attention never sees the template
        let shifted = TokenMatrix::new(&template + 1.0, TokenOrigin::Template).expect("finite");
        let (_, _, a0) = rdm_forward_with_activations(&t, &s, &weights).expect("square grids");
        let (_, _, a1) =
            rdm_forward_with_activations(&shifted, &s, &weights).expect("square grids");
        report.expect(a0.search_self == a1.search_self, case, cs, || {
            "search self-attention changed with the template".into()
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_small_runs() {
        assert!(check_edl(200, 1, false).passed());
        assert!(check_metric(50, 1).passed());
        assert!(check_rdm(50, 1).passed());
    }

    #[test]
    fn mutated_loss_is_caught() {
        let r = check_edl(20, 1, true);
        assert!(!r.passed());
        assert!(r.failures.iter().all(|f| f.seed == case_seed(1, f.case)));
    }

    #[test]
    fn double_double_sum_is_exact_on_cancellation() {
        let mut acc = DoubleDouble::default();
        for x in [1e16, 1.0, -1e16, 1.0] {
            acc.add(x);
        }
        assert_eq!(acc.div(1.0), 2.0);
    }
}
