//! Accuracy and expected calibration error.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no samples")]
    EmptyInput,
    #[error("{probs} probability rows but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("bin count must be at least 1")]
    ZeroBins,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check(probs: &[Vec<f64>], labels: &[usize]) -> Result<(), MetricsError> {
    if probs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricsError> {
    check(probs, labels)?;
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub empirical_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub accuracy: f64,
    pub ece: f64,
    pub n_bins: usize,
    pub bins: Vec<CalibrationBin>,
}

/// 1-based bin of a confidence: `ceil(c * n_bins)` clamped to `1..=n_bins`,
/// so a value on an edge lands in the lower bin.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    ((confidence * n_bins as f64).ceil() as usize).clamp(1, n_bins)
}

/// Equal-width binned calibration error over `(0, 1]`. Bin contributions
/// are summed from the highest-confidence bin down.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<CalibrationReport, MetricsError> {
    check(probs, labels)?;
    if n_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let k = argmax(p);
        let c = p[k];
        let b = bin_index(c, n_bins) - 1;
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(k == y);
    }
    let n = probs.len() as f64;
    let bins: Vec<CalibrationBin> = (0..n_bins)
        .map(|b| {
            let (mean_confidence, empirical_accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
            };
            CalibrationBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_confidence,
                empirical_accuracy,
            }
        })
        .collect();
    let ece = bins
        .iter()
        .rev()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n) * (b.empirical_accuracy - b.mean_confidence).abs())
        .sum();
    let accuracy = hits.iter().sum::<usize>() as f64 / n;
    Ok(CalibrationReport {
        accuracy,
        ece,
        n_bins,
        bins,
    })
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy {:.4}  ece {:.4}", self.accuracy, self.ece)?;
        writeln!(f, "{:>11} {:>6} {:>8} {:>8}", "bin", "count", "conf", "acc")?;
        for b in self.bins.iter().filter(|b| b.count > 0) {
            writeln!(
                f,
                "({:.2},{:.2}] {:>6} {:>8.4} {:>8.4}",
                b.lower, b.upper, b.count, b.mean_confidence, b.empirical_accuracy
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_class(conf: f64, predict: usize) -> Vec<f64> {
        if predict == 0 {
            vec![conf, 1.0 - conf]
        } else {
            vec![1.0 - conf, conf]
        }
    }

    #[test]
    fn accuracy_cases() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(accuracy(&probs, &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&probs, &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&probs, &[0, 0, 0]).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::EmptyInput));
        assert!(matches!(
            accuracy(&probs, &[0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn bin_edges_go_down() {
        assert_eq!(bin_index(0.0, 10), 1);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.5, 10), 5);
        assert_eq!(bin_index(0.55, 10), 6);
        assert_eq!(bin_index(1.0, 10), 10);
    }

    #[test]
    fn certain_predictions() {
        let probs = vec![vec![1.0, 0.0]; 5];
        assert_eq!(ece(&probs, &[0; 5], 10).unwrap().ece, 0.0);
        assert_eq!(ece(&probs, &[1; 5], 10).unwrap().ece, 1.0);
    }

    #[test]
    fn four_sample_hand_case() {
        let probs = vec![
            two_class(0.95, 0),
            two_class(0.95, 0),
            two_class(0.65, 0),
            two_class(0.55, 0),
        ];
        let r = ece(&probs, &[0, 1, 0, 0], 10).unwrap();
        assert_eq!(r.ece, 0.425);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(r.bins[9].count, 2);
        assert_eq!(r.bins[6].count, 1);
        assert_eq!(r.bins[5].count, 1);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn zero_bins_rejected() {
        assert_eq!(ece(&[vec![1.0]], &[0], 0), Err(MetricsError::ZeroBins));
    }

    proptest! {
        #[test]
        fn ece_bounded_and_permutation_invariant(
            rows in proptest::collection::vec((0.5f64..=1.0, 0usize..2, 0usize..2), 1..60),
            rot in 0usize..60,
        ) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|&(c, k, _)| two_class(c, k)).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.2).collect();
            let r = ece(&probs, &labels, 10).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.ece));
            prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), probs.len());
            let k = rot % probs.len();
            let mut p2 = probs.clone();
            let mut l2 = labels.clone();
            p2.rotate_left(k);
            l2.rotate_left(k);
            let r2 = ece(&p2, &l2, 10).unwrap();
            prop_assert!((r.ece - r2.ece).abs() < 1e-12);
        }

        #[test]
        fn accuracy_invariant_under_monotone_rescaling(
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..30),
            labels_seed in 0usize..3,
        ) {
            let labels: Vec<usize> = (0..rows.len()).map(|i| (i + labels_seed) % 3).collect();
            let squared: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * v * 2.0).collect()).collect();
            prop_assert_eq!(accuracy(&rows, &labels).unwrap(), accuracy(&squared, &labels).unwrap());
        }
    }

    #[test]
    fn perfectly_calibrated_bins_give_zero() {
        // bin 8: confidences 0.75 with 3 of 4 correct
        let probs = vec![two_class(0.75, 0); 4];
        assert_eq!(ece(&probs, &[0, 0, 0, 1], 10).unwrap().ece, 0.0);
    }
}
