//! Evidential (Dirichlet) classification math.
//!
//! Evidence `e ≥ 0` parameterizes a Dirichlet with `α = e + 1`. The strength
//! is `S = Σ α_k = K + Σ e_k`, the expected class probability `p̂_k = α_k / S`
//! and the uncertainty `u = K / S ∈ (0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonnegative per-class evidence, `K ≥ 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DirichletEvidence {
    evidence: Vec<f64>,
}

impl DirichletEvidence {
    pub fn new(evidence: Vec<f64>) -> Result<Self> {
        if evidence.len() < 2 {
            return Err(Error::invalid(format!(
                "evidence needs at least 2 classes, got {}",
                evidence.len()
            )));
        }
        if let Some((k, v)) = evidence
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::invalid(format!(
                "evidence[{k}] must be finite and >= 0, got {v}"
            )));
        }
        Ok(Self { evidence })
    }

    /// Two-class evidence with class 0 = target, class 1 = background.
    pub fn binary(target: f64, background: f64) -> Result<Self> {
        Self::new(vec![target, background])
    }

    pub fn num_classes(&self) -> usize {
        self.evidence.len()
    }

    pub fn evidence(&self) -> &[f64] {
        &self.evidence
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.evidence.iter().map(|e| e + 1.0).collect()
    }

    pub fn strength(&self) -> f64 {
        self.evidence.len() as f64 + self.evidence.iter().sum::<f64>()
    }

    pub fn uncertainty(&self) -> f64 {
        self.evidence.len() as f64 / self.strength()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let s = self.strength();
        self.evidence.iter().map(|e| (e + 1.0) / s).collect()
    }
}

impl TryFrom<Vec<f64>> for DirichletEvidence {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DirichletEvidence> for Vec<f64> {
    fn from(e: DirichletEvidence) -> Self {
        e.evidence
    }
}

/// One-hot ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassLabel {
    class: usize,
    num_classes: usize,
}

impl ClassLabel {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || class >= num_classes {
            return Err(Error::invalid(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { class, num_classes })
    }

    /// Parses a one-hot vector; exactly one entry must be 1 and the rest 0.
    pub fn from_onehot(onehot: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = onehot
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i)
            .collect();
        let zeros = onehot.iter().filter(|v| **v == 0.0).count();
        if ones.len() != 1 || zeros + 1 != onehot.len() {
            return Err(Error::invalid("label is not a one-hot vector"));
        }
        Self::new(ones[0], onehot.len())
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn onehot(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| if k == self.class { 1.0 } else { 0.0 })
            .collect()
    }
}

/// ReLU of the raw head outputs.
pub fn evidence_from_logits(logits: &[f64]) -> Result<DirichletEvidence> {
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite logit {v}")));
    }
    DirichletEvidence::new(logits.iter().map(|v| v.max(0.0)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub uncertainty: f64,
}

pub fn predict(ev: &DirichletEvidence) -> Prediction {
    Prediction {
        probabilities: ev.probabilities(),
        uncertainty: ev.uncertainty(),
    }
}

fn check_k(ev: &DirichletEvidence, label: &ClassLabel) -> Result<()> {
    if ev.num_classes() != label.num_classes() {
        return Err(Error::invalid(format!(
            "class count mismatch: evidence has {}, label has {}",
            ev.num_classes(),
            label.num_classes()
        )));
    }
    Ok(())
}

/// `Σ_k y_k (log S − log α_k) = log S − log α_c`.
pub fn edl_loss(ev: &DirichletEvidence, label: &ClassLabel) -> Result<f64> {
    check_k(ev, label)?;
    let alpha_c = ev.evidence[label.class] + 1.0;
    let rest: f64 = ev
        .evidence
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != label.class)
        .map(|(_, e)| e + 1.0)
        .sum();
    // log(S / α_c) = log1p(rest / α_c), exact at large evidence
    Ok((rest / alpha_c).ln_1p())
}

/// `∂L/∂e_k = 1/S − δ(k = c)/α_c`.
pub fn edl_loss_grad(ev: &DirichletEvidence, label: &ClassLabel) -> Result<Vec<f64>> {
    check_k(ev, label)?;
    let inv_s = 1.0 / ev.strength();
    let inv_alpha_c = 1.0 / (ev.evidence[label.class] + 1.0);
    Ok((0..ev.num_classes())
        .map(|k| {
            if k == label.class {
                inv_s - inv_alpha_c
            } else {
                inv_s
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    ContinueTracking,
    SwitchToDetection,
}

/// Target class index in two-class evidence.
pub const TARGET_CLASS: usize = 0;

/// Keep tracking iff the target class strictly wins and `u < θ_eh`.
///
/// Accepts `θ_eh ∈ [0, 1]`; at 0 every verdict switches since `u > 0`.
pub fn judge(ev: &DirichletEvidence, theta_eh: f64) -> Result<Decision> {
    if ev.num_classes() != 2 {
        return Err(Error::invalid(format!(
            "judge needs 2-class evidence, got {}",
            ev.num_classes()
        )));
    }
    if !(0.0..=1.0).contains(&theta_eh) {
        return Err(Error::invalid(format!(
            "theta_eh must be in [0, 1], got {theta_eh}"
        )));
    }
    // p̂_0 > p̂_1 ⇔ e_0 > e_1
    let target_wins = ev.evidence[TARGET_CLASS] > ev.evidence[1 - TARGET_CLASS];
    Ok(if target_wins && ev.uncertainty() < theta_eh {
        Decision::ContinueTracking
    } else {
        Decision::SwitchToDetection
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_evidence() {
        assert_eq!(
            evidence_from_logits(&[-1.0, 2.0]).unwrap().evidence(),
            &[0.0, 2.0]
        );
        assert_eq!(
            evidence_from_logits(&[0.0, 0.0]).unwrap().evidence(),
            &[0.0, 0.0]
        );
        assert_eq!(
            evidence_from_logits(&[3.5, -0.1, 0.2]).unwrap().evidence(),
            &[3.5, 0.0, 0.2]
        );
        assert!(evidence_from_logits(&[f64::NAN, 1.0]).is_err());
        assert!(evidence_from_logits(&[1.0]).is_err());
    }

    #[test]
    fn predict_fixtures() {
        let p = predict(&DirichletEvidence::binary(0.0, 0.0).unwrap());
        assert_eq!(p.probabilities, vec![0.5, 0.5]);
        assert_eq!(p.uncertainty, 1.0);

        let p = predict(&DirichletEvidence::binary(3.0, 1.0).unwrap());
        assert!((p.probabilities[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probabilities[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.uncertainty - 1.0 / 3.0).abs() < 1e-15);

        let p = predict(&DirichletEvidence::binary(1e6, 0.0).unwrap());
        assert!((p.uncertainty - 2.0 / (1e6 + 2.0)).abs() < 1e-18);
        assert!(p.probabilities[0] > 0.999_998);
    }

    #[test]
    fn loss_fixtures() {
        let y = ClassLabel::new(0, 2).unwrap();
        let l = edl_loss(&DirichletEvidence::binary(0.0, 0.0).unwrap(), &y).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = edl_loss(&DirichletEvidence::binary(3.0, 1.0).unwrap(), &y).unwrap();
        assert!((l - 0.405_465_108_108_164_4).abs() < 1e-15);

        let mut prev = f64::INFINITY;
        for t in [0.0, 1.0, 10.0, 1e3, 1e6, 1e12] {
            let l = edl_loss(&DirichletEvidence::binary(t, 0.0).unwrap(), &y).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
    }

    #[test]
    fn grad_fixture_and_signs() {
        let y = ClassLabel::new(0, 2).unwrap();
        let g = edl_loss_grad(&DirichletEvidence::binary(0.0, 0.0).unwrap(), &y).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);

        let ev = DirichletEvidence::new(vec![2.0, 0.5, 7.0]).unwrap();
        let y = ClassLabel::new(1, 3).unwrap();
        let g = edl_loss_grad(&ev, &y).unwrap();
        assert!(g[1] <= 0.0);
        assert_eq!(g[0], 1.0 / ev.strength());
        assert_eq!(g[2], 1.0 / ev.strength());
    }

    #[test]
    fn class_count_mismatch() {
        let ev = DirichletEvidence::binary(1.0, 1.0).unwrap();
        let y = ClassLabel::new(0, 3).unwrap();
        assert!(edl_loss(&ev, &y).is_err());
        assert!(edl_loss_grad(&ev, &y).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(
            ClassLabel::from_onehot(&[0.0, 1.0, 0.0]).unwrap().class(),
            1
        );
        assert!(ClassLabel::from_onehot(&[1.0, 1.0]).is_err());
        assert!(ClassLabel::from_onehot(&[0.5, 0.5]).is_err());
        assert!(ClassLabel::from_onehot(&[0.0, 0.0]).is_err());
        assert!(ClassLabel::new(2, 2).is_err());
        assert_eq!(ClassLabel::new(1, 3).unwrap().onehot(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn judge_fixtures() {
        let j = |t, b, th| judge(&DirichletEvidence::binary(t, b).unwrap(), th).unwrap();
        assert_eq!(j(3.0, 1.0, 0.2), Decision::SwitchToDetection);
        assert_eq!(j(19.0, 1.0, 0.2), Decision::ContinueTracking);
        assert_eq!(j(0.0, 0.0, 1.0), Decision::SwitchToDetection);
        // background wins, even with low u
        assert_eq!(j(1.0, 40.0, 1.0), Decision::SwitchToDetection);
        // exact tie at high evidence
        assert_eq!(j(50.0, 50.0, 1.0), Decision::SwitchToDetection);
        assert_eq!(j(1e9, 0.0, 0.0), Decision::SwitchToDetection);

        let three = DirichletEvidence::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(judge(&three, 0.5).is_err());
        assert!(judge(&DirichletEvidence::binary(1.0, 0.0).unwrap(), 1.5).is_err());
    }
}
