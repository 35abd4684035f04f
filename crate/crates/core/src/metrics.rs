//! Pseudo-label quality against ground truth, and column summaries.

use crate::error::{Error, Result};
use crate::probmaps::{check_dims, BinaryMask, Label, PixelPartition};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoQuality {
    pub selected_accuracy: f64,
    pub selected_coverage: f64,
    pub pseudo_precision: f64,
    pub pseudo_recall: f64,
    /// Set when nothing was selected; accuracy is then reported as 1.
    pub empty_selection: bool,
    /// Set when no pixel was assigned FG; precision is then reported as 1.
    pub empty_foreground: bool,
}

pub fn pseudo_quality(part: &PixelPartition, gt: &BinaryMask) -> Result<PseudoQuality> {
    check_dims("pseudo_quality", part, gt)?;
    let (mut sel, mut correct, mut fg, mut tp) = (0usize, 0usize, 0usize, 0usize);
    for (l, &y) in part.labels().iter().zip(gt.values()) {
        match l {
            Label::Ignore => {}
            Label::Fg => {
                sel += 1;
                fg += 1;
                if y {
                    correct += 1;
                    tp += 1;
                }
            }
            Label::Bg => {
                sel += 1;
                if !y {
                    correct += 1;
                }
            }
        }
    }
    let gt_fg = gt.count();
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(PseudoQuality {
        selected_accuracy: ratio(correct, sel),
        selected_coverage: sel as f64 / part.labels().len() as f64,
        pseudo_precision: ratio(tp, fg),
        pseudo_recall: ratio(tp, gt_fg),
        empty_selection: sel == 0,
        empty_foreground: fg == 0,
    })
}

/// Column-wise mean, min and max.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnSummary {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn aggregate(columns: &[&str], rows: &[Vec<f64>]) -> Result<ColumnSummary> {
    if rows.is_empty() {
        return Err(Error::Contract("aggregate needs at least one row".into()));
    }
    let k = columns.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::shape("aggregate", format!("every row must have {k} values")));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; k];
    let mut min = vec![f64::INFINITY; k];
    let mut max = vec![f64::NEG_INFINITY; k];
    for r in rows {
        for j in 0..k {
            mean[j] += r[j] / n;
            min[j] = min[j].min(r[j]);
            max[j] = max[j].max(r[j]);
        }
    }
    Ok(ColumnSummary {
        columns: columns.iter().map(|c| c.to_string()).collect(),
        mean,
        min,
        max,
    })
}

/// Mean of a slice; `None` when empty.
pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
