// Finite-difference check of every parameter gradient of the full network.

use roifcn::gradcheck::{gradcheck_all, PASS_THRESHOLD};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let entries = gradcheck_all(0)?;
    for e in &entries {
        println!(
            "{:<18} {:>4} values  max relative error {:.2e}",
            e.name, e.elements, e.max_rel_error
        );
    }
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    println!("worst {worst:.2e} (threshold {PASS_THRESHOLD:.0e})");
    if worst >= PASS_THRESHOLD {
        return Err("gradient check failed".into());
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
