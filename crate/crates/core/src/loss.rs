//! Multi-task objective: box regression + objectness + ROI-gated
//! segmentation, summed with unit weights.
//!
//! Every term is mean-normalized and returns its gradient alongside the
//! value.

use crate::error::{Error, Result};
use crate::roiconv::{BinaryMask, RoiMask};
use crate::rpn::{AnchorLabel, AnchorTargets};
use crate::tensor::{Scalar, Tensor};

/// Quadratic below 1, linear above.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// A scalar loss and its gradient with respect to the input it was given.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// Smooth-L1 box regression averaged over positive anchors.
///
/// `pred` holds four offsets per anchor, `[tx, ty, tw, th]`. Zero when there
/// are no positives.
pub fn regression_loss<T: Scalar>(pred: &[[T; 4]], targets: &AnchorTargets) -> LossGrad<T> {
    let n_pos = targets.count(AnchorLabel::Positive);
    let mut grad = vec![T::zero(); pred.len() * 4];
    if n_pos == 0 {
        return LossGrad {
            value: T::zero(),
            grad,
        };
    }
    let scale = T::one() / T::lit(n_pos as f64);
    let mut value = T::zero();
    for (a, (p, label)) in pred.iter().zip(&targets.labels).enumerate() {
        if *label != AnchorLabel::Positive {
            continue;
        }
        let t = targets.deltas[a].to_array();
        for c in 0..4 {
            let d = p[c] - T::lit(t[c]);
            value = value + smooth_l1(d);
            grad[a * 4 + c] = smooth_l1_grad(d) * scale;
        }
    }
    LossGrad {
        value: value * scale,
        grad,
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Objectness term. `empty` is set when no anchor was sampled, in which
/// case the value is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectnessLoss<T> {
    pub loss: LossGrad<T>,
    pub empty: bool,
}

/// Mean binary cross-entropy over sampled anchors, one logit per anchor.
pub fn objectness_loss<T: Scalar>(
    logits: &[T],
    targets: &AnchorTargets,
) -> Result<ObjectnessLoss<T>> {
    if logits.len() != targets.labels.len() {
        return Err(Error::ShapeMismatch {
            op: "objectness_loss",
            expected: vec![targets.labels.len()],
            got: vec![logits.len()],
        });
    }
    let n = targets.n_sampled();
    let mut grad = vec![T::zero(); logits.len()];
    if n == 0 {
        return Ok(ObjectnessLoss {
            loss: LossGrad {
                value: T::zero(),
                grad,
            },
            empty: true,
        });
    }
    let scale = T::one() / T::lit(n as f64);
    let mut value = T::zero();
    for ((&z, label), g) in logits.iter().zip(&targets.labels).zip(grad.iter_mut()) {
        let y = match label {
            AnchorLabel::Positive => T::one(),
            AnchorLabel::Negative => T::zero(),
            AnchorLabel::Ignore => continue,
        };
        value = value + softplus(z) - z * y;
        *g = (sigmoid(z) - y) * scale;
    }
    Ok(ObjectnessLoss {
        loss: LossGrad {
            value: value * scale,
            grad,
        },
        empty: false,
    })
}

/// Two-class softmax cross-entropy over the pixels of the ROI union, each
/// pixel counted once, divided by the in-union pixel count. Zero when the
/// union is empty.
pub fn masked_seg_loss<T: Scalar>(
    scores: &Tensor<T>,
    gt: &BinaryMask,
    roi: &RoiMask,
) -> Result<LossGrad<T>> {
    let (c, h, w) = scores.chw()?;
    if c != 2 || (gt.height(), gt.width()) != (h, w) || (roi.height(), roi.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "masked_seg_loss",
            expected: vec![2, h, w],
            got: vec![c, gt.height(), gt.width(), roi.height(), roi.width()],
        });
    }
    let plane = h * w;
    let mut grad = vec![T::zero(); 2 * plane];
    let n = roi.count();
    if n == 0 {
        return Ok(LossGrad {
            value: T::zero(),
            grad,
        });
    }
    let scale = T::one() / T::lit(n as f64);
    let s = scores.data();
    let mut value = T::zero();
    for p in roi.positions() {
        let (bg, fg) = (s[p], s[plane + p]);
        let m = bg.max(fg);
        let lse = m + ((bg - m).exp() + (fg - m).exp()).ln();
        let (label_score, y_fg) = if gt.cells()[p] {
            (fg, T::one())
        } else {
            (bg, T::zero())
        };
        value = value + lse - label_score;
        let p_fg = sigmoid(fg - bg);
        grad[plane + p] = (p_fg - y_fg) * scale;
        grad[p] = (y_fg - p_fg) * scale;
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
    })
}

/// Per-iteration loss summary. Detection terms are `None` when detection
/// is switched off.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_reg: Option<f64>,
    pub l_cls: Option<f64>,
    pub l_seg: f64,
    pub total: f64,
    pub n_pos_anchors: usize,
    pub n_sampled_anchors: usize,
    pub n_inroi_pixels: usize,
    /// No anchor was sampled for the objectness term.
    pub no_sampled_anchors: bool,
}

/// Unweighted sum of the available terms.
pub fn total_loss(l_reg: Option<f64>, l_cls: Option<f64>, l_seg: f64) -> f64 {
    l_reg.unwrap_or(0.0) + l_cls.unwrap_or(0.0) + l_seg
}

impl LossReport {
    pub fn new(l_reg: Option<f64>, l_cls: Option<f64>, l_seg: f64) -> Self {
        LossReport {
            l_reg,
            l_cls,
            l_seg,
            total: total_loss(l_reg, l_cls, l_seg),
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpn::BoxDelta;

    fn targets(labels: &[AnchorLabel]) -> AnchorTargets {
        AnchorTargets {
            labels: labels.to_vec(),
            deltas: vec![BoxDelta::default(); labels.len()],
        }
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0f64), 0.0);
        assert_eq!(smooth_l1(0.5f64), 0.125);
        assert_eq!(smooth_l1(2.0f64), 1.5);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
        let eps = 1e-9f64;
        assert!((smooth_l1(1.0 - eps) - smooth_l1(1.0 + eps)).abs() < 1e-8);
        assert!((smooth_l1_grad(1.0 - eps) - smooth_l1_grad(1.0 + eps)).abs() < 1e-8);
    }

    #[test]
    fn regression_averages_over_positives() {
        use AnchorLabel::*;
        let mut t = targets(&[Positive, Negative, Positive]);
        t.deltas[2] = BoxDelta::from_array([0.5, 0.0, 0.0, 0.0]);
        let pred = [[0.0f64; 4], [9.0; 4], [0.0; 4]];
        let l = regression_loss(&pred, &t);
        assert!((l.value - 0.0625).abs() < 1e-15);
        assert_eq!(l.grad[8], -0.25);
        assert!(l.grad[4..8].iter().all(|&g| g == 0.0));
        assert_eq!(regression_loss(&pred, &targets(&[Negative; 3])).value, 0.0);
    }

    #[test]
    fn objectness_examples() {
        use AnchorLabel::*;
        let l = objectness_loss(&[0.0f64], &targets(&[Positive])).unwrap();
        assert!((l.loss.value - 2f64.ln()).abs() < 1e-15);
        let l = objectness_loss(&[20.0f64], &targets(&[Positive])).unwrap();
        assert!(l.loss.value < 1e-8);
        let l = objectness_loss(&[0.0f64, 0.0], &targets(&[Positive, Negative])).unwrap();
        assert!((l.loss.value - 2f64.ln()).abs() < 1e-15);
        let l = objectness_loss(&[3.0f64, -1.0], &targets(&[Ignore, Ignore])).unwrap();
        assert!(l.empty);
        assert_eq!(l.loss.value, 0.0);
        assert!(objectness_loss(&[0.0f64], &targets(&[Positive, Negative])).is_err());
    }

    #[test]
    fn objectness_is_stable_for_large_logits() {
        use AnchorLabel::*;
        let l = objectness_loss(&[-800.0f64, 800.0], &targets(&[Positive, Negative])).unwrap();
        assert!((l.loss.value - 800.0).abs() < 1e-9);
        assert!(l.loss.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn seg_loss_examples() {
        let scores = Tensor::<f64>::zeros(&[2, 2, 2]);
        let gt = BinaryMask::from_cells(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(
            masked_seg_loss(&scores, &gt, &RoiMask::empty(2, 2))
                .unwrap()
                .value,
            0.0
        );
        let one = RoiMask::from_cells(2, 2, vec![false, false, true, false]).unwrap();
        assert!((masked_seg_loss(&scores, &gt, &one).unwrap().value - 2f64.ln()).abs() < 1e-15);
        let two = RoiMask::from_cells(2, 2, vec![true, false, true, false]).unwrap();
        assert!((masked_seg_loss(&scores, &gt, &two).unwrap().value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn seg_loss_rejects_extent_mismatch() {
        let scores = Tensor::<f64>::zeros(&[2, 2, 2]);
        let gt = BinaryMask::empty(2, 3);
        assert!(masked_seg_loss(&scores, &gt, &RoiMask::full(2, 2)).is_err());
        let scores = Tensor::<f64>::zeros(&[3, 2, 2]);
        assert!(masked_seg_loss(&scores, &BinaryMask::empty(2, 2), &RoiMask::full(2, 2)).is_err());
    }

    #[test]
    fn totals() {
        assert_eq!(total_loss(Some(0.0), Some(0.0), 0.0), 0.0);
        assert!((total_loss(Some(0.1), Some(0.2), 0.3) - 0.6).abs() < 1e-15);
        assert_eq!(total_loss(None, None, 0.45), 0.45);
        assert_eq!(LossReport::new(None, None, 0.45).total, 0.45);
    }
}
