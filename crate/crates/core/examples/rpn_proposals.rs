// Anchors, IoU, box coding, target assignment and proposal selection on a
// single hand-made scene.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roifcn::rpn::{
    assign_anchor_targets, decode_box, encode_box, generate_anchors, iou, nms, rank_by_score,
    select_proposals, AnchorLabel, BoxDelta,
};
use roifcn::BBox;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let a = BBox::new(0, 0, 3, 3);
    let b = BBox::new(2, 2, 5, 5);
    println!(
        "IoU of {a:?} and {b:?} = {:.6} (4/28 = {:.6})",
        iou(&a, &b),
        4.0 / 28.0
    );

    // 32x32 image, stride 4: an 8x8 feature grid with two anchor scales.
    let anchors = generate_anchors(8, 8, 4, &[6, 10]);
    let gt = [BBox::new(9, 10, 15, 14), BBox::new(22, 3, 25, 12)];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets = assign_anchor_targets(&anchors, &gt, 0.7, 0.3, 32, &mut rng)?;
    println!(
        "{} anchors: {} positive, {} negative, {} ignored",
        anchors.len(),
        targets.count(AnchorLabel::Positive),
        targets.count(AnchorLabel::Negative),
        targets.count(AnchorLabel::Ignore)
    );

    let anchor = anchors[targets
        .labels
        .iter()
        .position(|l| *l == AnchorLabel::Positive)
        .unwrap()]
    .bbox;
    let delta = encode_box(&gt[0], &anchor)?;
    let back = decode_box(&delta, &anchor)?.to_bbox();
    println!(
        "encode {:?} against {anchor:?} -> {delta:?}, decoded back to {back:?}",
        gt[0]
    );

    // Pretend the network scored anchors by their overlap with the truth.
    let scores: Vec<f64> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| iou(&a.bbox, g)).fold(0.0, f64::max))
        .collect();
    let order = rank_by_score(&scores);
    let top: Vec<BBox> = order.iter().take(10).map(|&i| anchors[i].bbox).collect();
    println!("NMS keeps {} of the top 10 anchors", nms(&top, 0.3).len());

    let zero = vec![BoxDelta::default(); anchors.len()];
    for p in select_proposals(&scores, &zero, &anchors, 12, 0.7, 4, 32, 32, 4) {
        println!(
            "proposal {:?} (feature grid {:?}) score {:.3}",
            p.image_box, p.feature_box, p.score
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
