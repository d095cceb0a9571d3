// Trains the detection-guided model and the segmentation-only ablation on
// the same small dataset, then evaluates both.
//
// The run here is deliberately short so that it finishes in seconds; use
// `configs/small_objects.cfg` with the `roifcn` binary for full-length runs.

use roifcn::config::RunConfig;
use roifcn::harness::{cmd_eval, cmd_gen_data, cmd_train};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let data = dir.path().join("data");
    cmd_gen_data(&data, 40, 8, (32, 32), 5)?;

    let mut cfg =
        RunConfig::parse("height = 32\nwidth = 32\niterations = 200\nlr = 0.01\nseed = 5\n")?;
    for detection in [true, false] {
        cfg.network.detection_enabled = detection;
        let name = if detection { "detection" } else { "ablation" };
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        let outcome = cmd_train(&data, &cfg, &ckpt)?;
        let first = outcome.log.first().map_or(0.0, |r| r.total);
        let last = outcome.log.last().map_or(0.0, |r| r.total);
        let report = cmd_eval(
            &data,
            &ckpt,
            &dir.path().join(format!("{name}_report.csv")),
            &dir.path().join(format!("{name}_curve.csv")),
        )?;
        println!(
            "{name:<9} loss {first:.3} -> {last:.3}; test precision {:.3} recall {:.3} dice {:.3}",
            report.mean.precision, report.mean.recall, report.mean.dice
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
