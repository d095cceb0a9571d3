// Saves a briefly trained model, loads it back and confirms the forward
// pass is unchanged bit for bit.

use roifcn::checkpoint::{load_checkpoint, save_checkpoint};
use roifcn::data::{generate_indexed, SampleParams};
use roifcn::model::{forward, train_step, MaskSource, NetworkConfig, TrainState};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = NetworkConfig {
        height: 32,
        width: 32,
        ..Default::default()
    };
    let anchors = cfg.anchors();
    let mut state = TrainState::<f32>::new(&cfg);
    for i in 0..5 {
        let sample = generate_indexed(1, i, 32, 32, &SampleParams::default())?;
        train_step(&sample, &mut state, &cfg, &anchors)?;
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path)?;
    let restored = load_checkpoint::<f32>(&path)?;
    println!(
        "{} bytes on disk, iteration {}",
        std::fs::metadata(&path)?.len(),
        restored.iteration
    );

    let probe = generate_indexed(1, 99, 32, 32, &SampleParams::default())?;
    let a = forward(
        &probe.image,
        &state.params,
        &cfg,
        &anchors,
        MaskSource::Auto,
    )?;
    let b = forward(
        &probe.image,
        &restored.params,
        &cfg,
        &anchors,
        MaskSource::Auto,
    )?;
    let identical = a
        .seg_scores
        .data()
        .iter()
        .zip(b.seg_scores.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    println!("forward pass after reload is bit-identical: {identical}");
    if !identical {
        return Err("checkpoint round trip changed the model".into());
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
