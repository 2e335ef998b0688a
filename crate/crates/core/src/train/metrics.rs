use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("confusion matrix has no counts")]
    Empty,
    #[error("label {label} outside [0, {num_classes})")]
    Label { label: usize, num_classes: usize },
    #[error("confusion matrix must be square, row {row} has {len} entries for {num_classes} classes")]
    NotSquare { row: usize, len: usize, num_classes: usize },
}

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricError> {
        let k = counts.len();
        if let Some((row, r)) = counts.iter().enumerate().find(|(_, r)| r.len() != k) {
            return Err(MetricError::NotSquare {
                row,
                len: r.len(),
                num_classes: k,
            });
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self, MetricError> {
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), MetricError> {
        let k = self.num_classes();
        for label in [truth, predicted] {
            if label >= k {
                return Err(MetricError::Label { label, num_classes: k });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
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

    fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn accuracy(&self) -> Result<f64, MetricError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricError::Empty);
        }
        let trace: u64 = (0..self.num_classes()).map(|c| self.counts[c][c]).sum();
        Ok(trace as f64 / total as f64)
    }

    /// `2·tp / (2·tp + fp + fn)` per class, 0 when the denominator is 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        let k = self.num_classes();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c];
                let fp: u64 = (0..k).map(|r| self.counts[r][c]).sum::<u64>() - tp;
                let fn_ = self.support(c) - tp;
                let denom = 2 * tp + fp + fn_;
                if denom == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / denom as f64
                }
            })
            .collect()
    }

    /// Support-weighted mean of the per-class F1 scores.
    pub fn weighted_f1(&self) -> Result<f64, MetricError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricError::Empty);
        }
        let f1 = self.per_class_f1();
        let weighted: f64 = f1.iter().enumerate().map(|(c, f)| self.support(c) as f64 * f).sum();
        Ok(weighted / total as f64)
    }
}

pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    cm.weighted_f1()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
