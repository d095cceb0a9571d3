// Generates a small synthetic dataset on disk and reads it back.

use roifcn::data::{
    generate_indexed, manifest_path, read_pgm, DatasetManifest, SampleParams, Split,
};
use roifcn::harness::cmd_gen_data;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let s = generate_indexed(11, 0, 64, 64, &SampleParams::default())?;
    println!(
        "sample: {} foreground pixels ({:.2}%), {} boxes {:?}",
        s.gt_mask.count(),
        100.0 * s.positive_fraction(),
        s.gt_boxes.len(),
        s.gt_boxes
    );

    let dir = tempfile::tempdir()?;
    cmd_gen_data(dir.path(), 6, 2, (48, 48), 11)?;
    let manifest = DatasetManifest::read(&manifest_path(dir.path(), Split::Train), Split::Train)?;
    println!("train manifest lists {} samples", manifest.entries.len());
    let first = manifest.load(0)?;
    let gray = read_pgm(&manifest.entries[0].0)?;
    println!(
        "first image {}x{}, {} foreground pixels",
        gray.height,
        gray.width,
        first.gt_mask.count()
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
