//! Confusion-matrix classification metrics with macro averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Input(format!("class index out of range for {num_classes} classes")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn report(&self) -> ClassificationReport {
        let k = self.num_classes();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let mut precision = Vec::with_capacity(k);
        let mut recall = Vec::with_capacity(k);
        let mut f1 = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.counts[c][c];
            let pr = ratio(tp, self.col_sum(c));
            let rc = ratio(tp, self.row_sum(c));
            precision.push(pr);
            recall.push(rc);
            f1.push(if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) });
        }
        let present: Vec<usize> = (0..k).filter(|&c| self.row_sum(c) > 0).collect();
        let macro_avg = |v: &[f64]| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|&c| v[c]).sum::<f64>() / present.len() as f64
            }
        };
        let trace: u64 = (0..k).map(|c| self.counts[c][c]).sum();
        ClassificationReport {
            accuracy: ratio(trace, self.total()),
            macro_precision: macro_avg(&precision),
            macro_recall: macro_avg(&recall),
            macro_f1: macro_avg(&f1),
            per_class_precision: precision,
            per_class_recall: recall,
            per_class_f1: f1,
        }
    }
}

/// Accuracy plus per-class and macro-averaged precision, recall and F1.
/// Macro averages run over classes present in the evaluated set; `0/0`
/// ratios count as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let truth = [0, 1, 2, 1, 0];
        let r = ConfusionMatrix::from_predictions(3, &truth, &truth).unwrap().report();
        assert_eq!(
            (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn binary_hand_values() {
        let cm = ConfusionMatrix::from_counts(vec![vec![50, 10], vec![5, 35]]).unwrap();
        let r = cm.report();
        assert!((r.per_class_precision[0] - 50.0 / 55.0).abs() < 1e-15);
        assert!((r.per_class_recall[0] - 50.0 / 60.0).abs() < 1e-15);
        assert!((r.per_class_precision[1] - 35.0 / 45.0).abs() < 1e-15);
        assert!((r.per_class_recall[1] - 35.0 / 40.0).abs() < 1e-15);
        // Mean of the per-class F1s 100/115 and 98/119.
        let expected = (100.0 / 115.0 + 98.0 / 119.0) / 2.0;
        assert!((r.macro_f1 - expected).abs() < 1e-12, "{}", r.macro_f1);
        assert!((r.macro_f1 - 0.8465).abs() < 5e-5);
        assert!((r.accuracy - 0.85).abs() < 1e-15);
    }

    #[test]
    fn absent_class_excluded() {
        // class 2 never occurs and is never predicted
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 0]]).unwrap();
        let r = cm.report();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.per_class_f1[2], 0.0);
    }
}
