use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use roifcn::data::{decode_pgm, encode_pgm, Gray};
use roifcn::loss::masked_seg_loss;
use roifcn::metrics::{prf_dice, ConfusionCounts};
use roifcn::roiconv::{rasterize_rois, roi_conv_forward};
use roifcn::rpn::{decode_box, encode_box, iou, nms};
use roifcn::tensor::{conv2d_forward, ConvParams, Tensor};
use roifcn::{BBox, BinaryMask};

fn bbox(max: i32) -> impl Strategy<Value = BBox> {
    (0..max, 0..max, 1..max / 2, 1..max / 2).prop_map(move |(x0, y0, w, h)| {
        BBox::new(x0, y0, (x0 + w - 1).min(max - 1), (y0 + h - 1).min(max - 1))
    })
}

/// IoU by counting pixels.
fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for r in -2..70 {
        for c in -2..70 {
            let (ia, ib) = (a.contains(r, c), b.contains(r, c));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_matches_pixels(a in bbox(64), b in bbox(64)) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - raster_iou(&a, &b)).abs() < 1e-12);
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn nms_output_is_pairwise_separated(
        boxes in prop::collection::vec(bbox(32), 1..20),
        thresh in 0.1f64..0.9,
    ) {
        let kept = nms(&boxes, thresh);
        prop_assert_eq!(kept[0], 0);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]) <= thresh);
            }
        }
        // Every dropped box overlaps some earlier kept box too much.
        for d in (0..boxes.len()).filter(|i| !kept.contains(i)) {
            prop_assert!(kept.iter().any(|&k| k < d && iou(&boxes[k], &boxes[d]) > thresh));
        }
    }

    #[test]
    fn box_coding_round_trips(gt in bbox(64), anchor in bbox(64)) {
        let d = encode_box(&gt, &anchor).unwrap();
        let back = decode_box(&d, &anchor).unwrap().to_bbox();
        prop_assert_eq!(back, gt);
    }

    #[test]
    fn roi_conv_equals_masked_dense_conv(
        seed in any::<u64>(),
        h in 3usize..14,
        w in 3usize..14,
        raw in prop::collection::vec((0usize..14, 0usize..14, 0usize..14, 0usize..14), 0..4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(&[2, h, w], 1.0, &mut rng);
        let p = ConvParams::new(
            Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng),
            Tensor::uniform(&[3], 1.0, &mut rng),
            1,
            1,
        ).unwrap();
        let boxes: Vec<BBox> = raw
            .iter()
            .map(|&(a, b, c, d)| {
                let (r0, r1) = (a.min(c) % h, a.max(c) % h);
                let (c0, c1) = (b.min(d) % w, b.max(d) % w);
                BBox::new(c0.min(c1) as i32, r0.min(r1) as i32, c0.max(c1) as i32, r0.max(r1) as i32)
            })
            .collect();
        let mask = rasterize_rois(&boxes, h, w).unwrap();
        let y = roi_conv_forward(&x, &p, &mask).unwrap();
        let dense = conv2d_forward(&x, &p).unwrap();
        for (i, (&a, &b)) in y.data().iter().zip(dense.data()).enumerate() {
            let cell = i % (h * w);
            if mask.cells()[cell] {
                prop_assert!((a - b).abs() <= 1e-12);
            } else {
                prop_assert!(a == 0.0 && a.is_sign_positive());
            }
        }
    }

    #[test]
    fn roi_output_ignores_inputs_beyond_the_halo(seed in any::<u64>(), bx in bbox(12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::<f64>::uniform(&[1, 12, 12], 1.0, &mut rng);
        let p = ConvParams::new(Tensor::uniform(&[2, 1, 3, 3], 1.0, &mut rng), Tensor::zeros(&[2]), 1, 1).unwrap();
        let mask = rasterize_rois(&[bx], 12, 12).unwrap();
        let before = roi_conv_forward(&x, &p, &mask).unwrap();
        for r in 0..12i32 {
            for c in 0..12i32 {
                let near = r >= bx.y0 - 1 && r <= bx.y1 + 1 && c >= bx.x0 - 1 && c <= bx.x1 + 1;
                if !near {
                    x.data_mut()[(r * 12 + c) as usize] = 123.0;
                }
            }
        }
        let after = roi_conv_forward(&x, &p, &mask).unwrap();
        prop_assert_eq!(before.data(), after.data());
    }

    #[test]
    fn duplicated_boxes_do_not_change_the_union(boxes in prop::collection::vec(bbox(16), 0..5)) {
        let once = rasterize_rois(&boxes, 16, 16).unwrap();
        let twice: Vec<BBox> = boxes.iter().chain(boxes.iter()).copied().collect();
        prop_assert_eq!(once.clone(), rasterize_rois(&twice, 16, 16).unwrap());
        let area: i64 = boxes.iter().map(BBox::area).sum();
        prop_assert!(once.count() as i64 <= area);
    }

    #[test]
    fn seg_loss_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = Tensor::<f64>::uniform(&[2, 4, 5], 3.0, &mut rng);
        let gt = BinaryMask::from_cells(4, 5, (0..20).map(|i| i % 3 == 0).collect()).unwrap();
        let roi = rasterize_rois(&[BBox::new(0, 1, 3, 3)], 4, 5).unwrap();
        let base = masked_seg_loss(&scores, &gt, &roi).unwrap();
        let shifted_scores = scores.map(|v| v + shift);
        let shifted = masked_seg_loss(&shifted_scores, &gt, &roi).unwrap();
        prop_assert!((base.value - shifted.value).abs() < 1e-9);
        for (a, b) in base.grad.iter().zip(&shifted.grad) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn scores_are_bounded_and_dice_is_harmonic(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
        let s = prf_dice(&ConfusionCounts { tp, fp, fn_, tn: 0 });
        for v in [s.precision, s.recall, s.dice] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if s.precision + s.recall > 0.0 {
            let harmonic = 2.0 * s.precision * s.recall / (s.precision + s.recall);
            prop_assert!((s.dice - harmonic).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_round_trips(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Gray { height: h, width: w, pixels: (0..h * w).map(|_| rng.gen()).collect() };
        let back = decode_pgm(&encode_pgm(&g), "memory").unwrap();
        prop_assert_eq!(back, g);
    }
}
