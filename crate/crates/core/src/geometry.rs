//! Axis-aligned boxes, IoU, and the box-regression loss used to train the
//! local tracking branch (`λ_iou · (1 − IoU) + λ_L1 · L1`).
//!
//! Boxes are stored as `(x, y, w, h)` with a top-left origin. Corner form is
//! derived on demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting non-finite coordinates and negative sizes.
    /// Zero-area boxes are allowed.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite box coordinate in [{x}, {y}, {w}, {h}]"
            )));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::invalid(format!(
                "negative box size in [{x}, {y}, {w}, {h}]"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from its centre and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn has_positive_area(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Whether the box lies entirely inside `[0, width] × [0, height]`.
    pub fn is_inside(&self, frame: FrameSize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.right() <= frame.width
            && self.bottom() <= frame.height
    }

    /// Area of the overlap with `other` (0 when disjoint or touching).
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Frame dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct FrameSize {
    pub width: f64,
    pub height: f64,
}

impl FrameSize {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite()) || width <= 0.0 || height <= 0.0 {
            return Err(Error::invalid(format!(
                "frame size must be positive and finite, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }
}

impl Default for FrameSize {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 512.0,
        }
    }
}

impl TryFrom<[f64; 2]> for FrameSize {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<FrameSize> for [f64; 2] {
    fn from(f: FrameSize) -> Self {
        [f.width, f.height]
    }
}

/// Intersection over union. Two zero-area boxes give 0 rather than NaN.
///
/// Areas are taken from edge differences, the same way the intersection is,
/// so a box compared with itself scores exactly 1.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let edge_area = |r: &BoundingBox| (r.right() - r.x) * (r.bottom() - r.y);
    let inter = a.intersection_area(b);
    let union = edge_area(a) + edge_area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Weights of the IoU and L1 terms of the box-regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    lambda_iou: f64,
    lambda_l1: f64,
}

impl LossWeights {
    pub fn new(lambda_iou: f64, lambda_l1: f64) -> Result<Self> {
        for (name, v) in [("lambda_iou", lambda_iou), ("lambda_l1", lambda_l1)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(Self {
            lambda_iou,
            lambda_l1,
        })
    }

    pub fn lambda_iou(&self) -> f64 {
        self.lambda_iou
    }

    pub fn lambda_l1(&self) -> f64 {
        self.lambda_l1
    }
}

impl Default for LossWeights {
    /// λ_iou = 2, λ_L1 = 5.
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

fn l1_scales(frame: Option<FrameSize>) -> [f64; 4] {
    match frame {
        Some(f) => [f.width, f.height, f.width, f.height],
        None => [1.0; 4],
    }
}

/// `λ_iou · (1 − IoU(pred, gt)) + λ_L1 · mean_i |pred_i − gt_i|`.
///
/// The L1 term averages over `(x, y, w, h)`; when `frame` is given each
/// parameter is first divided by the matching frame dimension.
pub fn box_regression_loss(
    pred: &BoundingBox,
    gt: &BoundingBox,
    weights: &LossWeights,
    frame: Option<FrameSize>,
) -> Result<f64> {
    if !gt.has_positive_area() {
        return Err(Error::invalid("ground-truth box must have positive area"));
    }
    let scales = l1_scales(frame);
    let p = pred.to_array();
    let g = gt.to_array();
    let l1 = (0..4).map(|i| (p[i] - g[i]).abs() / scales[i]).sum::<f64>() / 4.0;
    Ok(weights.lambda_iou * (1.0 - iou(pred, gt)) + weights.lambda_l1 * l1)
}

/// Gradient of [`box_regression_loss`] with respect to the predicted box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGradient {
    /// Partials in `(x, y, w, h)` order.
    pub grad: [f64; 4],
    /// Set when the evaluation point sits on a kink (coincident edges, a
    /// touching boundary, or a zero L1 residual). `grad` then holds the
    /// average of the one-sided derivatives.
    pub non_smooth: bool,
}

// Derivative of min(a, b) w.r.t. a, averaging at the kink.
fn dmin(a: f64, b: f64) -> f64 {
    if a < b {
        1.0
    } else if a > b {
        0.0
    } else {
        0.5
    }
}

// Derivative of max(a, b) w.r.t. a, averaging at the kink.
fn dmax(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a < b {
        0.0
    } else {
        0.5
    }
}

/// Partials of the overlap extent along one axis w.r.t. (pos, size) of the
/// predicted interval `[p, p + s)` against `[g, g + gs)`.
fn overlap_axis(p: f64, s: f64, g: f64, gs: f64) -> (f64, f64, f64, bool) {
    let hi = p + s;
    let ghi = g + gs;
    let extent = hi.min(ghi) - p.max(g);
    if extent < 0.0 {
        return (0.0, 0.0, 0.0, false);
    }
    let d_hi = dmin(hi, ghi);
    let d_lo = dmax(p, g);
    let kink = hi == ghi || p == g || extent == 0.0;
    let (d_pos, d_size) = if extent == 0.0 {
        // touching: one side is flat, average with zero
        (0.5 * (d_hi - d_lo), 0.5 * d_hi)
    } else {
        (d_hi - d_lo, d_hi)
    };
    (extent, d_pos, d_size, kink)
}

/// Analytic gradient of [`box_regression_loss`] w.r.t. `pred`'s `(x, y, w, h)`.
pub fn box_regression_loss_grad(
    pred: &BoundingBox,
    gt: &BoundingBox,
    weights: &LossWeights,
    frame: Option<FrameSize>,
) -> Result<LossGradient> {
    if !gt.has_positive_area() {
        return Err(Error::invalid("ground-truth box must have positive area"));
    }
    let (iw, diw_dx, diw_dw, kink_x) = overlap_axis(pred.x, pred.w, gt.x, gt.w);
    let (ih, dih_dy, dih_dh, kink_y) = overlap_axis(pred.y, pred.h, gt.y, gt.h);
    let mut non_smooth = kink_x || kink_y;

    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;

    // dI and dA (pred area) in (x, y, w, h) order.
    let d_inter = [diw_dx * ih, dih_dy * iw, diw_dw * ih, dih_dh * iw];
    let d_area = [0.0, 0.0, pred.h, pred.w];

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        grad[i] = -weights.lambda_iou * d_iou;
    }

    let scales = l1_scales(frame);
    let p = pred.to_array();
    let g = gt.to_array();
    for i in 0..4 {
        let r = p[i] - g[i];
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            non_smooth = true;
            0.0
        };
        grad[i] += weights.lambda_l1 * sign / (4.0 * scales[i]);
    }

    Ok(LossGradient { grad, non_smooth })
}
