//! Accuracy and per-class precision/recall/F1 from a confusion matrix.
//!
//! Conventions: `0/0` precision or recall counts as 0, F1 is 0 when
//! `P + R == 0`, and macro means run over the classes that occur in the true
//! labels only.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for label in [truth, predicted] {
            if label >= self.classes {
                return Err(Error::OutOfRange {
                    what: "label",
                    index: label,
                    len: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Elementwise sum; confusion matrices merge associatively.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::LengthMismatch {
                op: "ConfusionMatrix::merge",
                expected: self.classes,
                actual: other.classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }
}

pub fn confusion_from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            op: "confusion_from_predictions",
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_loss: f64,
    pub n: u64,
}

/// How per-class scores are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Ok(0.0);
    }
    let m = sorted_mean(losses.to_vec());
    if !m.is_finite() || m < 0.0 {
        return Err(Error::NonFinite("mean loss"));
    }
    Ok(m)
}

/// Mean summed in ascending order, so it does not depend on class numbering.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn macro_metrics(cm: &ConfusionMatrix, losses: &[f64]) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    let mut fs = Vec::new();
    for c in 0..cm.classes() {
        let support = cm.row_sum(c);
        if support == 0 {
            continue;
        }
        let tp = cm.get(c, c);
        let p = ratio(tp, cm.col_sum(c));
        let r = ratio(tp, support);
        ps.push(p);
        rs.push(r);
        fs.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        precision: sorted_mean(ps),
        recall: sorted_mean(rs),
        f1: sorted_mean(fs),
        mean_loss: mean_loss(losses)?,
        n: total,
    })
}

/// Pooled counts. For single-label data micro P, R and F1 all equal accuracy.
pub fn micro_metrics(cm: &ConfusionMatrix, losses: &[f64]) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let acc = ratio(cm.trace(), total);
    Ok(MetricsReport {
        accuracy: acc,
        precision: acc,
        recall: acc,
        f1: acc,
        mean_loss: mean_loss(losses)?,
        n: total,
    })
}

pub fn metrics(cm: &ConfusionMatrix, losses: &[f64], averaging: Averaging) -> Result<MetricsReport> {
    match averaging {
        Averaging::Macro => macro_metrics(cm, losses),
        Averaging::Micro => micro_metrics(cm, losses),
    }
}
