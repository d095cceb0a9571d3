// Times image-wise masked convolution against per-region convolution over
// a small grid of image sizes and ROI counts.

use roifcn::harness::{bench_csv, cmd_bench};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let rows = cmd_bench(&[16, 32, 48], &[1, 3, 6], 3, 0)?;
    print!("{}", bench_csv(&rows));
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
