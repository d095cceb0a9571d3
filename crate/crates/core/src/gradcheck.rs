//! Central finite-difference checks of the analytical gradients, always in
//! `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_indexed, Sample, SampleParams};
use crate::error::{Error, Result};
use crate::loss::smooth_l1;
use crate::model::{backward, forward, objective, Forward, MaskSource, NetworkConfig, Params};
use crate::roiconv::BinaryMask;
use crate::rpn::{assign_anchor_targets, AnchorLabel, AnchorTargets, RpnConfig};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const PASS_THRESHOLD: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of `f` at every coordinate of `x`.
pub fn numeric_gradient(
    x: &mut Tensor<f64>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + step;
            let plus = f(x);
            x.data_mut()[i] = orig - step;
            let minus = f(x);
            x.data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    /// Parameter tensor, e.g. `roi_conv1.weight`.
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < PASS_THRESHOLD
    }
}

/// Small network used for whole-model checks on a 16x16 input.
pub fn gradcheck_config(seed: u64) -> NetworkConfig {
    NetworkConfig {
        height: 16,
        width: 16,
        backbone_channels: [3, 4, 4],
        rpn_channels: 4,
        roi_channels: 3,
        upsample_channels: 3,
        rpn: RpnConfig {
            max_samples: 16,
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}

/// Hook that perturbs parameters after the analytic pass.
pub type Tamper = dyn Fn(&mut Params<f64>);

/// Added to every bias of the checked network so that ReLUs sit well away
/// from their kink and no activation is vanishingly small.
pub const BIAS_OFFSET: f64 = 0.3;

/// Default initialisation with every bias shifted by [`BIAS_OFFSET`].
pub fn gradcheck_params(cfg: &NetworkConfig, seed: u64) -> Params<f64> {
    let mut params = Params::<f64>::init(cfg, seed);
    for (name, t) in params.named_tensors_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v += BIAS_OFFSET;
            }
        }
    }
    params
}

/// The total loss as a list of already-normalised summands: one per in-ROI
/// pixel, one per sampled anchor, four per positive anchor.
///
/// Differencing these term by term and summing afterwards gives the same
/// central difference as differencing the total, without cancelling the
/// large constant part of the loss against itself.
pub fn objective_terms(
    fwd: &Forward<f64>,
    gt_mask: &BinaryMask,
    targets: Option<&AnchorTargets>,
    cfg: &NetworkConfig,
) -> Vec<f64> {
    let mut out = Vec::new();
    let roi = fwd.roi_mask_image(cfg.stride());
    let n = roi.count() as f64;
    let s = fwd.seg_scores.data();
    let plane = s.len() / 2;
    for p in roi.positions() {
        let (bg, fg) = (s[p], s[plane + p]);
        let m = bg.max(fg);
        let lse = m + ((bg - m).exp() + (fg - m).exp()).ln();
        let label = if gt_mask.cells()[p] { fg } else { bg };
        out.push((lse - label) / n);
    }
    let Some(t) = targets.filter(|_| cfg.detection_enabled) else {
        return out;
    };
    let n_sampled = t.n_sampled() as f64;
    for (&z, label) in fwd.objectness.iter().zip(&t.labels) {
        let y = match label {
            AnchorLabel::Positive => 1.0,
            AnchorLabel::Negative => 0.0,
            AnchorLabel::Ignore => continue,
        };
        out.push((z.max(0.0) + (-z.abs()).exp().ln_1p() - z * y) / n_sampled);
    }
    let n_pos = t.count(AnchorLabel::Positive) as f64;
    for (a, (pred, label)) in fwd.deltas.iter().zip(&t.labels).enumerate() {
        if *label == AnchorLabel::Positive {
            let target = t.deltas[a].to_array();
            for c in 0..4 {
                out.push(smooth_l1(pred[c] - target[c]) / n_pos);
            }
        }
    }
    out
}

/// 16x16 synthetic sample: a 32x32 draw halved in both extents.
pub fn gradcheck_sample(seed: u64) -> Result<Sample> {
    generate_indexed(seed, 0, 32, 32, &SampleParams::default())?.downsample2()
}

/// Checks every parameter gradient of the total loss.
///
/// The ROI union and the anchor targets are taken from the unperturbed
/// forward pass and held fixed, as in training where the mask is a constant
/// of the iteration. `tamper` edits the analytical gradients before the
/// comparison.
pub fn gradcheck_network(
    cfg: &NetworkConfig,
    params: &Params<f64>,
    sample: &Sample,
    seed: u64,
    tamper: Option<&Tamper>,
) -> Result<Vec<GradcheckEntry>> {
    let anchors = cfg.anchors();
    let image: Tensor<f64> = sample.image.cast();
    let base = forward(&image, params, cfg, &anchors, MaskSource::Auto)?;
    let mask = base.roi_mask.clone();
    let targets: Option<AnchorTargets> = if cfg.detection_enabled {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Some(assign_anchor_targets(
            &anchors,
            &sample.gt_boxes,
            cfg.rpn.iou_hi,
            cfg.rpn.iou_lo,
            cfg.rpn.max_samples,
            &mut rng,
        )?)
    } else {
        None
    };

    let fixed = forward(&image, params, cfg, &anchors, MaskSource::Fixed(&mask))?;
    let obj = objective(&fixed, &sample.gt_mask, targets.as_ref(), cfg)?;
    let mut grads = backward(&fixed, params, cfg, &obj.heads)?;
    if let Some(t) = tamper {
        t(&mut grads);
    }

    let terms = |p: &Params<f64>| -> Vec<f64> {
        let f = forward(&image, p, cfg, &anchors, MaskSource::Fixed(&mask)).expect("forward");
        objective_terms(&f, &sample.gt_mask, targets.as_ref(), cfg)
    };
    let summed: f64 = terms(params).iter().sum();
    if (summed - obj.report.total).abs() > 1e-12 * obj.report.total.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "loss terms sum to {summed}, objective reports {}",
            obj.report.total
        )));
    }

    let mut work = params.clone();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let n = analytic[k].len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = work.named_tensors()[k].1.data()[i];
            work.named_tensors_mut()[k].1.data_mut()[i] = orig + FD_STEP;
            let plus = terms(&work);
            work.named_tensors_mut()[k].1.data_mut()[i] = orig - FD_STEP;
            let minus = terms(&work);
            work.named_tensors_mut()[k].1.data_mut()[i] = orig;
            let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
            numeric.push(diff / (2.0 * FD_STEP));
        }
        out.push(GradcheckEntry {
            name,
            max_rel_error: max_relative_error(&analytic[k], &numeric),
            elements: n,
        });
    }
    Ok(out)
}

/// Whole-network check on the default 16x16 setup.
pub fn gradcheck_all(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let cfg = gradcheck_config(seed);
    let params = gradcheck_params(&cfg, seed);
    let sample = gradcheck_sample(seed)?;
    gradcheck_network(&cfg, &params, &sample, seed, None)
}
