//! Relevance decoupling attention at toy scale.
//!
//! Template and search tokens are mixed spatially (depthwise 3×3), projected
//! to Q/K/V, then combined by three single-head attentions:
//!
//! * template self-attention `Softmax(Q_t K_tᵀ/√d) V_t`
//! * search self-attention `Softmax(Q_s K_sᵀ/√d) V_s`
//! * cross-attention `Softmax(Q_s K_mᵀ/√d) V_m` with `K_m = [K_t; K_s]`,
//!   `V_m = [V_t; V_s]`
//!
//! The two search branches are concatenated along channels, reduced back to
//! `d` channels, and everything goes through an output projection that is
//! added to the input tokens.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TokenOrigin {
    Template,
    Search,
}

/// `N × d` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    tokens: Array2<f64>,
    origin: TokenOrigin,
}

impl TokenMatrix {
    pub fn new(tokens: Array2<f64>, origin: TokenOrigin) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::invalid(
                "token matrix needs at least one token and one channel",
            ));
        }
        ensure_finite(&tokens.view(), "tokens")?;
        Ok(Self { tokens, origin })
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn origin(&self) -> TokenOrigin {
        self.origin
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }
}

fn ensure_finite(m: &ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}

/// Row-wise `Softmax(Q Kᵀ / √d)`, computed with max subtraction.
pub fn attention_weights(q: &ArrayView2<f64>, k: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::invalid(format!(
            "query/key channel mismatch: {} vs {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() == 0 {
        return Err(Error::invalid("attention needs at least one key"));
    }
    ensure_finite(q, "queries")?;
    ensure_finite(k, "keys")?;

    let scale = (q.ncols() as f64).sqrt();
    let mut logits = q.dot(&k.t()) / scale;
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(logits)
}

/// `Softmax(Q Kᵀ / √d) V`.
pub fn scaled_attention(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::invalid(format!(
            "key/value token mismatch: {} vs {}",
            k.nrows(),
            v.nrows()
        )));
    }
    ensure_finite(v, "values")?;
    let w = attention_weights(q, k)?;
    Ok(w.dot(v))
}

/// Search queries attending over template and search keys/values stacked
/// row-wise. An empty template reduces this to search self-attention.
pub fn cross_attention_ts(
    q_s: &ArrayView2<f64>,
    k_t: &ArrayView2<f64>,
    k_s: &ArrayView2<f64>,
    v_t: &ArrayView2<f64>,
    v_s: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if k_t.ncols() != k_s.ncols() || v_t.ncols() != v_s.ncols() {
        return Err(Error::invalid("template and search channel dims differ"));
    }
    if k_t.nrows() != v_t.nrows() {
        return Err(Error::invalid("template key/value token mismatch"));
    }
    let k_m = concatenate(Axis(0), &[k_t.view(), k_s.view()])
        .map_err(|e| Error::invalid(e.to_string()))?;
    let v_m = concatenate(Axis(0), &[v_t.view(), v_s.view()])
        .map_err(|e| Error::invalid(e.to_string()))?;
    scaled_attention(q_s, &k_m.view(), &v_m.view())
}

/// Per-channel 3×3 kernels, stride 1, zero padding. Row `c` holds channel
/// `c`'s kernel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel {
    pub weights: Array2<f64>,
}

impl DepthwiseKernel {
    /// Centre tap 1, everything else 0.
    pub fn identity(channels: usize) -> Self {
        let mut weights = Array2::zeros((channels, 9));
        weights.column_mut(4).fill(1.0);
        Self { weights }
    }

    fn apply(&self, tokens: &ArrayView2<f64>, side: usize) -> Array2<f64> {
        let d = tokens.ncols();
        let mut out = Array2::zeros((side * side, d));
        for r in 0..side {
            for c in 0..side {
                for dr in 0..3 {
                    for dc in 0..3 {
                        let (rr, cc) = (r + dr, c + dc);
                        // padded coordinates are offset by one
                        if rr == 0 || cc == 0 || rr > side || cc > side {
                            continue;
                        }
                        let src = tokens.row((rr - 1) * side + (cc - 1));
                        let taps = self.weights.column(dr * 3 + dc);
                        let mut dst = out.row_mut(r * side + c);
                        for ch in 0..d {
                            dst[ch] += taps[ch] * src[ch];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Query/key/value projections (`d × d`, no bias).
#[derive(Debug, Clone, PartialEq)]
pub struct QkvProjection {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

/// Where the residual addition sits relative to the output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionOrder {
    /// `x + W_o · features`
    #[default]
    ProjectThenAdd,
    /// `W_o · (x + features)`
    AddThenProject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdmWeights {
    pub template_mixing: DepthwiseKernel,
    pub search_mixing: DepthwiseKernel,
    pub template_qkv: QkvProjection,
    pub search_qkv: QkvProjection,
    /// `2d × d` channel reduction (a 1×1 convolution).
    pub reduction: Array2<f64>,
    /// `d × d` output projection.
    pub output: Array2<f64>,
    pub fusion: FusionOrder,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
}

impl RdmWeights {
    /// Seeded uniform init in `±1/√fan_in`.
    pub fn random(channels: usize, seed: u64) -> Self {
        let d = channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 1.0 / (d as f64).sqrt();
        let qkv = |rng: &mut ChaCha8Rng| QkvProjection {
            query: uniform(rng, (d, d), b),
            key: uniform(rng, (d, d), b),
            value: uniform(rng, (d, d), b),
        };
        let template_qkv = qkv(&mut rng);
        let search_qkv = qkv(&mut rng);
        Self {
            template_mixing: DepthwiseKernel {
                weights: uniform(&mut rng, (d, 9), 1.0 / 3.0),
            },
            search_mixing: DepthwiseKernel {
                weights: uniform(&mut rng, (d, 9), 1.0 / 3.0),
            },
            template_qkv,
            search_qkv,
            reduction: uniform(&mut rng, (2 * d, d), 1.0 / ((2 * d) as f64).sqrt()),
            output: uniform(&mut rng, (d, d), b),
            fusion: FusionOrder::default(),
        }
    }

    /// All projections zero, identity mixing.
    pub fn zeros(channels: usize) -> Self {
        let d = channels;
        let qkv = || QkvProjection {
            query: Array2::zeros((d, d)),
            key: Array2::zeros((d, d)),
            value: Array2::zeros((d, d)),
        };
        Self {
            template_mixing: DepthwiseKernel::identity(d),
            search_mixing: DepthwiseKernel::identity(d),
            template_qkv: qkv(),
            search_qkv: qkv(),
            reduction: Array2::zeros((2 * d, d)),
            output: Array2::zeros((d, d)),
            fusion: FusionOrder::default(),
        }
    }

    pub fn with_identity_mixing(mut self) -> Self {
        let d = self.channels();
        self.template_mixing = DepthwiseKernel::identity(d);
        self.search_mixing = DepthwiseKernel::identity(d);
        self
    }

    pub fn channels(&self) -> usize {
        self.output.nrows()
    }

    /// Checks every matrix against the channel count of the output projection.
    pub fn validate(&self) -> Result<()> {
        let d = self.channels();
        let square = [
            ("template_qkv.query", &self.template_qkv.query),
            ("template_qkv.key", &self.template_qkv.key),
            ("template_qkv.value", &self.template_qkv.value),
            ("search_qkv.query", &self.search_qkv.query),
            ("search_qkv.key", &self.search_qkv.key),
            ("search_qkv.value", &self.search_qkv.value),
            ("output", &self.output),
        ];
        for (name, m) in square {
            if m.dim() != (d, d) {
                return Err(Error::invalid(format!(
                    "{name} must be {d}x{d}, got {:?}",
                    m.dim()
                )));
            }
        }
        if self.reduction.dim() != (2 * d, d) {
            return Err(Error::invalid(format!(
                "reduction must be {}x{d}, got {:?}",
                2 * d,
                self.reduction.dim()
            )));
        }
        for (name, k) in [
            ("template_mixing", &self.template_mixing),
            ("search_mixing", &self.search_mixing),
        ] {
            if k.weights.dim() != (d, 9) {
                return Err(Error::invalid(format!(
                    "{name} must be {d}x9, got {:?}",
                    k.weights.dim()
                )));
            }
        }
        Ok(())
    }
}

fn grid_side(n: usize) -> Option<usize> {
    let side = (n as f64).sqrt().round() as usize;
    (side * side == n).then_some(side)
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct RdmActivations {
    pub template_self: Array2<f64>,
    pub search_self: Array2<f64>,
    pub cross: Array2<f64>,
    pub search_fused: Array2<f64>,
}

/// One relevance-decoupling block; output shapes equal input shapes.
pub fn rdm_forward(
    template: &TokenMatrix,
    search: &TokenMatrix,
    weights: &RdmWeights,
) -> Result<(TokenMatrix, TokenMatrix)> {
    rdm_forward_with_activations(template, search, weights).map(|(t, s, _)| (t, s))
}

pub fn rdm_forward_with_activations(
    template: &TokenMatrix,
    search: &TokenMatrix,
    weights: &RdmWeights,
) -> Result<(TokenMatrix, TokenMatrix, RdmActivations)> {
    weights.validate()?;
    let d = weights.channels();
    if template.channels() != d || search.channels() != d {
        return Err(Error::invalid(format!(
            "token channels ({}, {}) do not match weights ({d})",
            template.channels(),
            search.channels()
        )));
    }
    let t_side = grid_side(template.num_tokens()).ok_or_else(|| {
        Error::invalid(format!(
            "template token count {} is not a perfect square",
            template.num_tokens()
        ))
    })?;
    let s_side = grid_side(search.num_tokens()).ok_or_else(|| {
        Error::invalid(format!(
            "search token count {} is not a perfect square",
            search.num_tokens()
        ))
    })?;

    let mt = weights
        .template_mixing
        .apply(&template.tokens.view(), t_side);
    let ms = weights.search_mixing.apply(&search.tokens.view(), s_side);

    let (qt, kt, vt) = (
        mt.dot(&weights.template_qkv.query),
        mt.dot(&weights.template_qkv.key),
        mt.dot(&weights.template_qkv.value),
    );
    let (qs, ks, vs) = (
        ms.dot(&weights.search_qkv.query),
        ms.dot(&weights.search_qkv.key),
        ms.dot(&weights.search_qkv.value),
    );

    let template_self = scaled_attention(&qt.view(), &kt.view(), &vt.view())?;
    let search_self = scaled_attention(&qs.view(), &ks.view(), &vs.view())?;
    let cross = cross_attention_ts(&qs.view(), &kt.view(), &ks.view(), &vt.view(), &vs.view())?;

    let stacked = concatenate(Axis(1), &[search_self.view(), cross.view()])
        .map_err(|e| Error::invalid(e.to_string()))?;
    let search_fused = stacked.dot(&weights.reduction);

    let features = concatenate(Axis(0), &[template_self.view(), search_fused.view()])
        .map_err(|e| Error::invalid(e.to_string()))?;
    let inputs = concatenate(Axis(0), &[template.tokens.view(), search.tokens.view()])
        .map_err(|e| Error::invalid(e.to_string()))?;
    let out = match weights.fusion {
        FusionOrder::ProjectThenAdd => &inputs + &features.dot(&weights.output),
        FusionOrder::AddThenProject => (&inputs + &features).dot(&weights.output),
    };

    let nt = template.num_tokens();
    let t_out = TokenMatrix::new(out.slice(s![..nt, ..]).to_owned(), TokenOrigin::Template)?;
    let s_out = TokenMatrix::new(out.slice(s![nt.., ..]).to_owned(), TokenOrigin::Search)?;
    Ok((
        t_out,
        s_out,
        RdmActivations {
            template_self,
            search_self,
            cross,
            search_fused,
        },
    ))
}

/// Token grid and channel width of one backbone stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub stage: usize,
    pub template_side: usize,
    pub search_side: usize,
    pub channels: usize,
}

impl StageShape {
    pub fn template_tokens(&self) -> usize {
        self.template_side * self.template_side
    }

    pub fn search_tokens(&self) -> usize {
        self.search_side * self.search_side
    }

    pub fn token_count(&self) -> usize {
        self.template_tokens() + self.search_tokens()
    }
}

/// Channel multipliers of the three stages.
pub const STAGE_CHANNEL_MULTIPLIERS: [usize; 3] = [1, 3, 6];

/// Token grids for square template/search crops: stage `s` downsamples by
/// `4·2^(s−1)` and ends at `6C` channels.
pub fn stage_shapes(
    template_side: usize,
    search_side: usize,
    base_channels: usize,
) -> Result<Vec<StageShape>> {
    if template_side == 0 || search_side == 0 || base_channels == 0 {
        return Err(Error::invalid("sides and channel count must be positive"));
    }
    if template_side % 16 != 0 || search_side % 16 != 0 {
        return Err(Error::invalid(format!(
            "template ({template_side}) and search ({search_side}) sides must be divisible by 16"
        )));
    }
    Ok(STAGE_CHANNEL_MULTIPLIERS
        .iter()
        .enumerate()
        .map(|(i, mult)| {
            let stride = 4 << i;
            StageShape {
                stage: i + 1,
                template_side: template_side / stride,
                search_side: search_side / stride,
                channels: base_channels * mult,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_key_copies_value() {
        let q = array![[1.0, -2.0], [3.0, 0.5], [0.0, 0.0]];
        let k = array![[0.3, 0.1]];
        let v = array![[7.0, -1.0]];
        let out = scaled_attention(&q.view(), &k.view(), &v.view()).unwrap();
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![7.0, -1.0]);
        }
    }

    #[test]
    fn zero_queries_average_values() {
        let q = Array2::zeros((2, 3));
        let k = array![
            [1.0, 2.0, 3.0],
            [-1.0, 0.0, 4.0],
            [2.0, 2.0, 2.0],
            [0.0, 1.0, 0.0]
        ];
        let v = array![
            [1.0, 0.0, 4.0],
            [3.0, 2.0, 0.0],
            [5.0, 4.0, 8.0],
            [7.0, 2.0, 0.0]
        ];
        let out = scaled_attention(&q.view(), &k.view(), &v.view()).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip([4.0, 2.0, 3.0]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_token_hand_softmax() {
        let q = array![[1.0], [0.0]];
        let k = array![[1.0], [0.0]];
        let v = array![[10.0], [20.0]];
        let out = scaled_attention(&q.view(), &k.view(), &v.view()).unwrap();
        // e/(e+1) = 0.7310585786300049
        let w0 = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((out[[0, 0]] - (10.0 * w0 + 20.0 * (1.0 - w0))).abs() < 1e-12);
        assert!((out[[0, 0]] - 12.689_414_213_699_951).abs() < 1e-12);
        assert_eq!(out[[1, 0]], 15.0);
    }

    #[test]
    fn shape_errors() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 4));
        assert!(attention_weights(&a.view(), &b.view()).is_err());
        let v = Array2::<f64>::zeros((3, 3));
        assert!(scaled_attention(&a.view(), &a.view(), &v.view()).is_err());
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(attention_weights(&a.view(), &empty.view()).is_err());
        assert!(cross_attention_ts(&a.view(), &b.view(), &a.view(), &b.view(), &a.view()).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let q = array![[1e4], [-1e4]];
        let k = array![[1.0], [-1.0], [0.5]];
        let v = array![[1.0], [2.0], [3.0]];
        let out = scaled_attention(&q.view(), &k.view(), &v.view()).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert_eq!(out[[0, 0]], 1.0);
        assert_eq!(out[[1, 0]], 2.0);
    }

    #[test]
    fn cross_attention_cases() {
        // one template token, one search token, d = 1
        let qs = array![[2.0]];
        let (kt, ks) = (array![[1.0]], array![[-1.0]]);
        let (vt, vs) = (array![[4.0]], array![[8.0]]);
        let out =
            cross_attention_ts(&qs.view(), &kt.view(), &ks.view(), &vt.view(), &vs.view()).unwrap();
        let (a, b) = (2.0f64.exp(), (-2.0f64).exp());
        let expected = (4.0 * a + 8.0 * b) / (a + b);
        assert!((out[[0, 0]] - expected).abs() < 1e-14);

        // constant values
        let qs = array![[0.3, 1.0], [5.0, -2.0]];
        let kt = array![[1.0, 1.0]];
        let ks = array![[0.0, 2.0], [1.0, -1.0]];
        let vt = array![[3.0, -3.0]];
        let vs = array![[3.0, -3.0], [3.0, -3.0]];
        let out =
            cross_attention_ts(&qs.view(), &kt.view(), &ks.view(), &vt.view(), &vs.view()).unwrap();
        for v in out.rows() {
            assert!((v[0] - 3.0).abs() < 1e-14 && (v[1] + 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weights_give_identity() {
        let t = TokenMatrix::new(
            Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.1),
            TokenOrigin::Template,
        )
        .unwrap();
        let s = TokenMatrix::new(
            Array2::from_shape_fn((9, 3), |(i, j)| (i as f64) - (j as f64)),
            TokenOrigin::Search,
        )
        .unwrap();
        let (to, so) = rdm_forward(&t, &s, &RdmWeights::zeros(3)).unwrap();
        assert_eq!(to.tokens(), t.tokens());
        assert_eq!(so.tokens(), s.tokens());
    }

    #[test]
    fn non_square_tokens_rejected() {
        let t = TokenMatrix::new(Array2::ones((3, 2)), TokenOrigin::Template).unwrap();
        let s = TokenMatrix::new(Array2::ones((4, 2)), TokenOrigin::Search).unwrap();
        assert!(rdm_forward(&t, &s, &RdmWeights::random(2, 1)).is_err());
        let t = TokenMatrix::new(Array2::ones((4, 3)), TokenOrigin::Template).unwrap();
        assert!(rdm_forward(&t, &s, &RdmWeights::random(2, 1)).is_err());
    }

    #[test]
    fn bad_weight_shapes_rejected() {
        let mut w = RdmWeights::random(4, 3);
        w.reduction = Array2::zeros((4, 4));
        assert!(w.validate().is_err());
    }

    #[test]
    fn stage_shape_fixtures() {
        let st = stage_shapes(128, 320, 64).unwrap();
        assert_eq!(st.len(), 3);
        assert_eq!(
            (st[0].token_count(), st[0].channels),
            (32 * 32 + 80 * 80, 64)
        );
        assert_eq!(st[0].token_count(), 7424);
        assert_eq!((st[2].token_count(), st[2].channels), (464, 384));

        let st = stage_shapes(16, 16, 1).unwrap();
        assert_eq!((st[2].token_count(), st[2].channels), (2, 6));

        let st = stage_shapes(64, 160, 8).unwrap();
        assert_eq!((st[2].token_count(), st[2].channels), (116, 48));

        assert!(stage_shapes(100, 320, 64).is_err());
        assert!(stage_shapes(0, 320, 64).is_err());
    }
}
