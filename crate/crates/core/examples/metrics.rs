// Precision, recall and dice on hand-made masks, and the sorted dice curve.

use roifcn::metrics::{aggregate_report, confusion_counts, SliceResult};
use roifcn::BinaryMask;

fn mask(rows: &[&str]) -> BinaryMask {
    let cells = rows
        .iter()
        .flat_map(|r| r.chars().map(|c| c == '#'))
        .collect();
    BinaryMask::from_cells(rows.len(), rows[0].len(), cells).expect("rectangular")
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let gt = mask(&["....", ".##.", ".#..", "...."]);
    let cases = [
        ("partial", mask(&["....", ".#..", ".##.", "...."])),
        ("perfect", gt.clone()),
        ("empty", mask(&["....", "....", "....", "...."])),
    ];
    let mut slices = Vec::new();
    for (id, pred) in cases {
        let c = confusion_counts(&pred, &gt)?;
        let s = SliceResult::new(id, c);
        println!(
            "{id:<8} tp {} fp {} fn {}: precision {:.4} recall {:.4} dice {:.4}",
            c.tp, c.fp, c.fn_, s.scores.precision, s.scores.recall, s.scores.dice
        );
        slices.push(s);
    }
    let report = aggregate_report(slices)?;
    print!("{}", report.to_csv());
    print!("{}", report.curve_csv());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
