//! Localization unit: anchors, box coding, anchor-target assignment and
//! proposal selection.
//!
//! Anchors are square, one per (scale, feature cell). They are indexed
//! scale-major, `(s * feat_h + i) * feat_w + j`, so the objectness map
//! `[n_scales, feat_h, feat_w]` lines up with the anchor list directly.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::roiconv::BBox;

pub const DEFAULT_SCALES: [usize; 3] = [6, 10, 16];

/// Faster R-CNN style defaults, scaled down for small inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnConfig {
    pub scales: Vec<usize>,
    pub iou_hi: f64,
    pub iou_lo: f64,
    pub max_samples: usize,
    pub pre_nms_k: usize,
    pub nms_thresh: f64,
    pub post_nms_k: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            scales: DEFAULT_SCALES.to_vec(),
            iou_hi: 0.7,
            iou_lo: 0.3,
            max_samples: 32,
            pre_nms_k: 12,
            nms_thresh: 0.7,
            post_nms_k: 4,
        }
    }
}

/// Reference box on the image grid; not clipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub bbox: BBox,
    pub scale: usize,
    pub row: usize,
    pub col: usize,
}

pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: usize,
    scales: &[usize],
) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(feat_h * feat_w * scales.len());
    for &s in scales {
        for i in 0..feat_h {
            for j in 0..feat_w {
                let cx = (j as f64 + 0.5) * stride as f64;
                let cy = (i as f64 + 0.5) * stride as f64;
                let half = s as f64 / 2.0;
                let x0 = (cx - half).round() as i32;
                let y0 = (cy - half).round() as i32;
                out.push(Anchor {
                    bbox: BBox::new(x0, y0, x0 + s as i32 - 1, y0 + s as i32 - 1),
                    scale: s,
                    row: i,
                    col: j,
                });
            }
        }
    }
    out
}

/// Intersection over union with inclusive pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = BBox::new(
        a.x0.max(b.x0),
        a.y0.max(b.y0),
        a.x1.min(b.x1),
        a.y1.min(b.y1),
    )
    .area();
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Regression offsets of a box relative to an anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

/// Real-valued box in center/size form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    /// Inclusive integer box: center `x0 + w/2`, width `x1 - x0 + 1`.
    pub fn from_bbox(b: &BBox) -> Self {
        let w = b.width() as f64;
        let h = b.height() as f64;
        CenterBox {
            cx: b.x0 as f64 + 0.5 * w,
            cy: b.y0 as f64 + 0.5 * h,
            w,
            h,
        }
    }

    /// Rounds back to inclusive integer corners.
    pub fn to_bbox(&self) -> BBox {
        let x0 = (self.cx - 0.5 * self.w).round();
        let y0 = (self.cy - 0.5 * self.h).round();
        let x1 = (self.cx + 0.5 * self.w).round() - 1.0;
        let y1 = (self.cy + 0.5 * self.h).round() - 1.0;
        BBox::new(
            x0 as i32,
            y0 as i32,
            (x1 as i32).max(x0 as i32),
            (y1 as i32).max(y0 as i32),
        )
    }
}

fn check_size(op: &'static str, b: &CenterBox) -> Result<()> {
    if b.w > 0.0 && b.h > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            op,
            format!("non-positive box size {}x{}", b.w, b.h),
        ))
    }
}

pub fn encode(gt: &CenterBox, anchor: &CenterBox) -> Result<BoxDelta> {
    check_size("encode_box", gt)?;
    check_size("encode_box", anchor)?;
    Ok(BoxDelta {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    })
}

pub fn decode(delta: &BoxDelta, anchor: &CenterBox) -> Result<CenterBox> {
    check_size("decode_box", anchor)?;
    Ok(CenterBox {
        cx: anchor.cx + delta.tx * anchor.w,
        cy: anchor.cy + delta.ty * anchor.h,
        w: anchor.w * delta.tw.exp(),
        h: anchor.h * delta.th.exp(),
    })
}

pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    encode(&CenterBox::from_bbox(gt), &CenterBox::from_bbox(anchor))
}

/// Decoded box before rounding; round with [`CenterBox::to_bbox`] and clip.
pub fn decode_box(delta: &BoxDelta, anchor: &BBox) -> Result<CenterBox> {
    decode(delta, &CenterBox::from_bbox(anchor))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Regression target per anchor; meaningful for positives only.
    pub deltas: Vec<BoxDelta>,
}

impl AnchorTargets {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn n_sampled(&self) -> usize {
        self.labels.len() - self.count(AnchorLabel::Ignore)
    }
}

/// Labels anchors against ground truth and subsamples negatives.
///
/// An anchor is positive if its IoU with some ground-truth box reaches
/// `iou_hi`, or if it is the best anchor for some ground-truth box (ties go
/// to the lowest index). It is negative if its best IoU is below `iou_lo`.
/// When more than `max_samples` anchors are labeled, negatives are reduced
/// to `max(max_samples - positives, positives)`; positives are never
/// dropped.
pub fn assign_anchor_targets<R: Rng + ?Sized>(
    anchors: &[Anchor],
    gt: &[BBox],
    iou_hi: f64,
    iou_lo: f64,
    max_samples: usize,
    rng: &mut R,
) -> Result<AnchorTargets> {
    if iou_lo >= iou_hi {
        return Err(Error::invalid(
            "assign_anchor_targets",
            format!("iou_lo {iou_lo} must be below iou_hi {iou_hi}"),
        ));
    }
    let n = anchors.len();
    let mut best_iou = vec![f64::NEG_INFINITY; n];
    let mut best_gt = vec![0usize; n];
    let mut labels = vec![AnchorLabel::Ignore; n];

    for (g, gbox) in gt.iter().enumerate() {
        let mut arg = None::<(usize, f64)>;
        for (a, anchor) in anchors.iter().enumerate() {
            let v = iou(&anchor.bbox, gbox);
            if v > best_iou[a] {
                best_iou[a] = v;
                best_gt[a] = g;
            }
            if arg.is_none_or(|(_, bv)| v > bv) {
                arg = Some((a, v));
            }
        }
        if let Some((a, _)) = arg {
            labels[a] = AnchorLabel::Positive;
        }
    }
    for a in 0..n {
        if labels[a] == AnchorLabel::Positive {
            continue;
        }
        if gt.is_empty() || best_iou[a] < iou_lo {
            labels[a] = AnchorLabel::Negative;
        } else if best_iou[a] >= iou_hi {
            labels[a] = AnchorLabel::Positive;
        }
    }

    let mut deltas = vec![BoxDelta::default(); n];
    for a in 0..n {
        if labels[a] == AnchorLabel::Positive {
            deltas[a] = encode_box(&gt[best_gt[a]], &anchors[a].bbox)?;
        }
    }

    let negatives: Vec<usize> = (0..n)
        .filter(|&a| labels[a] == AnchorLabel::Negative)
        .collect();
    let n_pos = n - negatives.len() - labels.iter().filter(|&&l| l == AnchorLabel::Ignore).count();
    if n_pos + negatives.len() > max_samples {
        let keep = max_samples
            .saturating_sub(n_pos)
            .max(n_pos)
            .min(negatives.len());
        let mut kept = vec![false; negatives.len()];
        for i in sample(rng, negatives.len(), keep).into_iter() {
            kept[i] = true;
        }
        for (&a, keep) in negatives.iter().zip(kept) {
            if !keep {
                labels[a] = AnchorLabel::Ignore;
            }
        }
    }
    Ok(AnchorTargets { labels, deltas })
}

/// Indices in descending score order, ties to the lower index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression over boxes already sorted by descending
/// score. Returns the kept positions.
pub fn nms(sorted_boxes: &[BBox], thresh: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, b) in sorted_boxes.iter().enumerate() {
        if keep.iter().all(|&k| iou(&sorted_boxes[k], b) <= thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Covering feature-grid box of an image-grid box, clipped to the grid.
pub fn image_to_feature_box(b: &BBox, stride: usize, feat_h: usize, feat_w: usize) -> Option<BBox> {
    let s = stride as i32;
    let f = BBox::new(
        b.x0.div_euclid(s),
        b.y0.div_euclid(s),
        (b.x1 + 1 + s - 1).div_euclid(s) - 1,
        (b.y1 + 1 + s - 1).div_euclid(s) - 1,
    );
    f.clip(feat_h, feat_w)
}

/// Upper bound on the log size ratio when decoding predicted deltas.
const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// A scored proposal in both grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub image_box: BBox,
    pub feature_box: BBox,
    pub score: f64,
}

/// Top-k, decode, clip, NMS, keep-k, map to the feature grid.
///
/// Never returns an empty list: if nothing survives, the full feature grid
/// is returned as a single ROI with score `-inf`.
#[allow(clippy::too_many_arguments)]
pub fn select_proposals(
    objectness: &[f64],
    deltas: &[BoxDelta],
    anchors: &[Anchor],
    pre_nms_k: usize,
    nms_thresh: f64,
    post_nms_k: usize,
    img_h: usize,
    img_w: usize,
    stride: usize,
) -> Vec<Proposal> {
    let (feat_h, feat_w) = (img_h / stride, img_w / stride);
    let mut cands: Vec<(BBox, f64)> = Vec::new();
    for a in rank_by_score(objectness).into_iter().take(pre_nms_k) {
        let mut d = deltas[a];
        d.tw = d.tw.min(MAX_LOG_RATIO);
        d.th = d.th.min(MAX_LOG_RATIO);
        let Ok(decoded) = decode_box(&d, &anchors[a].bbox) else {
            continue;
        };
        if !(decoded.cx.is_finite() && decoded.cy.is_finite()) {
            continue;
        }
        if let Some(b) = decoded.to_bbox().clip(img_h, img_w) {
            cands.push((b, objectness[a]));
        }
    }
    let boxes: Vec<BBox> = cands.iter().map(|c| c.0).collect();
    let mut out: Vec<Proposal> = nms(&boxes, nms_thresh)
        .into_iter()
        .take(post_nms_k)
        .filter_map(|i| {
            let (b, score) = cands[i];
            image_to_feature_box(&b, stride, feat_h, feat_w).map(|feature_box| Proposal {
                image_box: b,
                feature_box,
                score,
            })
        })
        .collect();
    if out.is_empty() {
        out.push(Proposal {
            image_box: BBox::new(0, 0, img_w as i32 - 1, img_h as i32 - 1),
            feature_box: BBox::new(0, 0, feat_w as i32 - 1, feat_h as i32 - 1),
            score: f64::NEG_INFINITY,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_anchor() {
        let a = generate_anchors(1, 1, 4, &[4]);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].bbox, BBox::new(0, 0, 3, 3));
        assert_eq!(generate_anchors(2, 2, 4, &[4, 8]).len(), 8);
        assert_eq!(
            generate_anchors(1, 1, 4, &[8])[0].bbox,
            BBox::new(-2, -2, 5, 5)
        );
    }

    #[test]
    fn anchor_index_is_scale_major() {
        let a = generate_anchors(2, 3, 4, &[4, 8]);
        let idx = (2 + 1) * 3 + 2;
        assert_eq!((a[idx].scale, a[idx].row, a[idx].col), (8, 1, 2));
    }

    #[test]
    fn iou_basics() {
        let b = BBox::new(3, 4, 9, 7);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&b, &BBox::new(10, 0, 12, 2)), 0.0);
        assert!((iou(&BBox::new(0, 0, 3, 3), &BBox::new(2, 2, 5, 5)) - 4.0 / 28.0).abs() < 1e-15);
    }

    #[test]
    fn encode_examples() {
        let b = BBox::new(4, 4, 11, 11);
        assert_eq!(encode_box(&b, &b).unwrap(), BoxDelta::default());
        let gt = BBox::new(2, 4, 17, 11);
        let d = encode_box(&gt, &b).unwrap();
        assert!((d.tx - 0.25).abs() < 1e-15);
        assert_eq!(d.ty, 0.0);
        assert!((d.tw - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.th, 0.0);
        assert_eq!(decode_box(&d, &b).unwrap().to_bbox(), gt);
    }

    #[test]
    fn encode_rejects_degenerate() {
        let bad = CenterBox {
            cx: 0.0,
            cy: 0.0,
            w: 0.0,
            h: 1.0,
        };
        let ok = CenterBox {
            cx: 0.0,
            cy: 0.0,
            w: 1.0,
            h: 1.0,
        };
        assert!(encode(&bad, &ok).is_err());
        assert!(encode(&ok, &bad).is_err());
        assert!(decode(&BoxDelta::default(), &bad).is_err());
    }

    #[test]
    fn exact_match_anchor_is_positive() {
        let anchors = generate_anchors(4, 4, 4, &[4]);
        let gt = [anchors[5].bbox];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_anchor_targets(&anchors, &gt, 0.7, 0.3, 1000, &mut rng).unwrap();
        assert_eq!(t.labels[5], AnchorLabel::Positive);
        assert_eq!(t.count(AnchorLabel::Positive), 1);
    }

    #[test]
    fn empty_gt_gives_negatives() {
        let anchors = generate_anchors(4, 4, 4, &[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_anchor_targets(&anchors, &[], 0.7, 0.3, 1000, &mut rng).unwrap();
        assert_eq!(t.count(AnchorLabel::Negative), 16);
        let t = assign_anchor_targets(&anchors, &[], 0.7, 0.3, 6, &mut rng).unwrap();
        assert_eq!(t.count(AnchorLabel::Negative), 6);
        assert!(assign_anchor_targets(&anchors, &[], 0.3, 0.3, 6, &mut rng).is_err());
    }

    #[test]
    fn sampling_keeps_positives() {
        let anchors = generate_anchors(8, 8, 4, &DEFAULT_SCALES);
        let gt = [BBox::new(5, 5, 14, 12), BBox::new(20, 18, 25, 27)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let full = assign_anchor_targets(&anchors, &gt, 0.7, 0.3, usize::MAX, &mut rng).unwrap();
        let t = assign_anchor_targets(&anchors, &gt, 0.7, 0.3, 32, &mut rng).unwrap();
        let pos = full.count(AnchorLabel::Positive);
        assert_eq!(t.count(AnchorLabel::Positive), pos);
        assert_eq!(t.n_sampled(), 32.max(2 * pos));
    }

    #[test]
    fn nms_cases() {
        let b = BBox::new(0, 0, 5, 5);
        assert_eq!(nms(&[b, b], 0.5), vec![0]);
        let disjoint = [
            BBox::new(0, 0, 1, 1),
            BBox::new(3, 3, 4, 4),
            BBox::new(6, 0, 7, 1),
        ];
        assert_eq!(nms(&disjoint, 0.5), vec![0, 1, 2]);
    }

    #[test]
    fn proposals_singleton_and_suppression() {
        let anchors = generate_anchors(1, 1, 4, &[8]);
        let p = select_proposals(
            &[0.3],
            &[BoxDelta::default()],
            &anchors,
            12,
            0.7,
            4,
            8,
            8,
            4,
        );
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].image_box, BBox::new(0, 0, 5, 5));

        let anchors = generate_anchors(1, 2, 4, &[4]);
        let same = [anchors[0], anchors[0]];
        let p = select_proposals(
            &[0.8, 0.9],
            &[BoxDelta::default(); 2],
            &same,
            12,
            0.5,
            4,
            8,
            8,
            4,
        );
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].score, 0.9);
    }

    #[test]
    fn feature_mapping_covers_image_box() {
        assert_eq!(
            image_to_feature_box(&BBox::new(5, 3, 9, 4), 4, 16, 16),
            Some(BBox::new(1, 0, 2, 1))
        );
        assert_eq!(
            image_to_feature_box(&BBox::new(4, 4, 7, 7), 4, 16, 16),
            Some(BBox::new(1, 1, 1, 1))
        );
    }

    #[test]
    fn proposals_fall_back_to_full_grid() {
        let p = select_proposals(&[], &[], &[], 12, 0.7, 4, 16, 16, 4);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].feature_box, BBox::new(0, 0, 3, 3));
    }
}
