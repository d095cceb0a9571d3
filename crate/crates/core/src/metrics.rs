//! Pixel-level precision, recall and dice, plus the report and the sorted
//! dice curve.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::roiconv::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            op: "confusion_counts",
            expected: vec![gt.height(), gt.width()],
            got: vec![pred.height(), pred.width()],
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.cells().iter().zip(gt.cells()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and dice. A 0/0 ratio scores 0, except that an empty
/// prediction on an empty ground truth scores dice 1.
pub fn prf_dice(c: &ConfusionCounts) -> Scores {
    let dice = if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
    };
    Scores {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        dice,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceResult {
    pub slice_id: String,
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

impl SliceResult {
    pub fn new(slice_id: impl Into<String>, counts: ConfusionCounts) -> Self {
        SliceResult {
            slice_id: slice_id.into(),
            counts,
            scores: prf_dice(&counts),
        }
    }

    pub fn has_positive_gt(&self) -> bool {
        self.counts.tp + self.counts.fn_ > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Unweighted mean over every slice.
    pub mean: Scores,
    /// `(slice_id, dice)` of slices with positive ground truth, ascending
    /// by dice; ties keep input order.
    pub curve: Vec<(String, f64)>,
    pub slices: Vec<SliceResult>,
}

pub fn aggregate_report(slices: Vec<SliceResult>) -> Result<Report> {
    if slices.is_empty() {
        return Err(Error::invalid("aggregate_report", "no slices to aggregate"));
    }
    let n = slices.len() as f64;
    let mean = Scores {
        precision: slices.iter().map(|s| s.scores.precision).sum::<f64>() / n,
        recall: slices.iter().map(|s| s.scores.recall).sum::<f64>() / n,
        dice: slices.iter().map(|s| s.scores.dice).sum::<f64>() / n,
    };
    let mut curve: Vec<(String, f64)> = slices
        .iter()
        .filter(|s| s.has_positive_gt())
        .map(|s| (s.slice_id.clone(), s.scores.dice))
        .collect();
    curve.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(Report {
        mean,
        curve,
        slices,
    })
}

const EMPTY_CONVENTION: &str =
    "# convention: a slice with empty ground truth and empty prediction scores dice 1; such slices enter the mean but not the curve";

impl Report {
    /// `slice_id,precision,recall,dice` rows followed by a `#mean,` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{EMPTY_CONVENTION}").unwrap();
        writeln!(s, "slice_id,precision,recall,dice").unwrap();
        for r in &self.slices {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                r.slice_id, r.scores.precision, r.scores.recall, r.scores.dice
            )
            .unwrap();
        }
        writeln!(
            s,
            "#mean,{:.6},{:.6},{:.6}",
            self.mean.precision, self.mean.recall, self.mean.dice
        )
        .unwrap();
        s
    }

    /// `rank,slice_id,dice`, rank starting at 1.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("rank,slice_id,dice\n");
        for (i, (id, d)) in self.curve.iter().enumerate() {
            writeln!(s, "{},{id},{d:.6}", i + 1).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[bool]) -> BinaryMask {
        BinaryMask::from_cells(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn counts() {
        let gt: Vec<bool> = (0..100).map(|i| i < 3).collect();
        let c = confusion_counts(&mask(&gt), &mask(&gt)).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 0, 0, 97));
        let c = confusion_counts(&mask(&[false; 100]), &mask(&gt)).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 3));
        let c = confusion_counts(&mask(&[true; 100]), &mask(&gt)).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (3, 97, 0));
        assert_eq!(c.total(), 100);
        assert!(confusion_counts(&mask(&[true; 3]), &mask(&[true; 4])).is_err());
    }

    #[test]
    fn formulas() {
        let s = prf_dice(&ConfusionCounts {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 0,
        });
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.dice - 4.0 / 6.0).abs() < 1e-12);
        let s = prf_dice(&ConfusionCounts {
            tp: 5,
            fp: 0,
            fn_: 0,
            tn: 9,
        });
        assert_eq!((s.precision, s.recall, s.dice), (1.0, 1.0, 1.0));
        let s = prf_dice(&ConfusionCounts {
            tp: 0,
            fp: 2,
            fn_: 3,
            tn: 9,
        });
        assert_eq!((s.precision, s.recall, s.dice), (0.0, 0.0, 0.0));
        let s = prf_dice(&ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 9,
        });
        assert_eq!((s.precision, s.recall, s.dice), (0.0, 0.0, 1.0));
    }

    #[test]
    fn aggregation() {
        let one = SliceResult::new(
            "a",
            ConfusionCounts {
                tp: 1,
                fp: 2,
                fn_: 2,
                tn: 5,
            },
        );
        let r = aggregate_report(vec![one.clone()]).unwrap();
        assert_eq!(r.mean, one.scores);

        let d = |tp, fp| {
            SliceResult::new(
                format!("s{tp}"),
                ConfusionCounts {
                    tp,
                    fp,
                    fn_: 0,
                    tn: 0,
                },
            )
        };
        // dice 0.4 then 0.2
        let r = aggregate_report(vec![d(1, 3), d(1, 8)]).unwrap();
        assert!((r.mean.dice - 0.3).abs() < 1e-12);
        assert_eq!(
            r.curve.iter().map(|c| c.0.as_str()).collect::<Vec<_>>(),
            ["s1", "s1"]
        );
        assert!(r.curve[0].1 < r.curve[1].1);

        let empty = SliceResult::new(
            "e",
            ConfusionCounts {
                tn: 4,
                ..Default::default()
            },
        );
        let r = aggregate_report(vec![empty, d(1, 3)]).unwrap();
        assert_eq!(r.curve.len(), 1);
        assert!((r.mean.dice - 0.7).abs() < 1e-12);
        assert!(aggregate_report(vec![]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = aggregate_report(vec![SliceResult::new(
            "x",
            ConfusionCounts {
                tp: 1,
                fp: 1,
                fn_: 0,
                tn: 2,
            },
        )])
        .unwrap();
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[1], "slice_id,precision,recall,dice");
        assert!(lines[2].starts_with("x,0.500000,1.000000,0.666667"));
        assert!(lines[3].starts_with("#mean,"));
        assert_eq!(r.curve_csv(), "rank,slice_id,dice\n1,x,0.666667\n");
    }
}
