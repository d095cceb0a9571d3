// Masked convolution restricted to a union of boxes, checked against a
// dense convolution followed by masking, and against per-region crops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roifcn::roiconv::{
    rasterize_rois, roi_conv_backward, roi_conv_forward, roi_conv_regionwise, same_padding,
};
use roifcn::tensor::{conv2d_forward, ConvParams, Tensor};
use roifcn::BBox;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::<f64>::uniform(&[2, 12, 12], 1.0, &mut rng);
    let kernel = Tensor::uniform(&[4, 2, 3, 3], 0.5, &mut rng);
    let bias = Tensor::uniform(&[4], 0.1, &mut rng);
    let p = ConvParams::new(kernel, bias, 1, same_padding(3))?;

    let rois = [BBox::new(1, 1, 4, 6), BBox::new(3, 5, 9, 8)];
    let mask = rasterize_rois(&rois, 12, 12)?;
    println!("ROI union covers {} of {} cells", mask.count(), 12 * 12);

    let y = roi_conv_forward(&x, &p, &mask)?;
    let dense = conv2d_forward(&x, &p)?;
    let gate = mask.to_tensor::<f64>();
    let plane = 12 * 12;
    let mut worst = 0.0f64;
    for (i, (&a, &b)) in y.data().iter().zip(dense.data()).enumerate() {
        let expected = b * gate.data()[i % plane];
        worst = worst.max((a - expected).abs());
    }
    println!("max |roi_conv - dense * mask| = {worst:.2e}");

    let regionwise = roi_conv_regionwise(&x, &p, &rois)?;
    let diff = y
        .data()
        .iter()
        .zip(regionwise.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |image-wise - region-wise| = {diff:.2e}");

    let dy = Tensor::uniform(y.shape(), 1.0, &mut rng);
    let g = roi_conv_backward(&x, &p, &mask, &dy)?;
    println!(
        "gradients: |dx| {:.3}, |dkernel| {:.3}, |dbias| {:.3}",
        g.dx.max_abs(),
        g.dkernel.max_abs(),
        g.dbias.max_abs()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
