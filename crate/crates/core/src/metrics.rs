//! Accuracy, generalization error and parameter-distribution statistics.

use crate::data::Dataset;
use crate::network::{Network, NetworkError};
use crate::tensor::{Scalar, Tensor};

pub const HISTOGRAM_BINS: usize = 50;

/// Percentage of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy_from_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

pub fn accuracy(net: &Network<f32>, data: &Dataset) -> Result<f64, NetworkError> {
    Ok(accuracy_from_logits(&net.predict(&data.images)?, &data.labels))
}

/// `R_train - R_test`, in percentage points.
pub fn generalization_error(train: f64, test: f64) -> f64 {
    train - test
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Histogram,
}

/// Statistics over `values` with a histogram spanning the observed range.
pub fn value_stats(values: &[f64]) -> ParamStats {
    let n = values.len();
    if n == 0 {
        return ParamStats {
            count: 0,
            mean: 0.0,
            std: 0.0,
            histogram: Histogram {
                min: 0.0,
                max: 0.0,
                counts: vec![0; HISTOGRAM_BINS],
            },
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let width = max - min;
    for &v in values {
        let bin = if width > 0.0 {
            (((v - min) / width) * HISTOGRAM_BINS as f64) as usize
        } else {
            0
        };
        counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    ParamStats {
        count: n,
        mean,
        std: var.sqrt(),
        histogram: Histogram { min, max, counts },
    }
}

/// Statistics over every weight and filter entry; biases are left out.
pub fn param_distribution_stats<T: Scalar>(net: &Network<T>) -> ParamStats {
    let values: Vec<f64> = net
        .weight_names()
        .iter()
        .filter_map(|n| net.param(n))
        .flat_map(|t| t.data().iter().map(|v| v.to_f64_lossy()))
        .collect();
    value_stats(&values)
}

/// One trained model's summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub method: String,
    pub arch: String,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub generalization_error: f64,
    pub param_mean: f64,
    pub param_std: f64,
}

impl MetricsRecord {
    pub fn new(
        method: impl Into<String>,
        arch: impl Into<String>,
        seed: u64,
        train_accuracy: f64,
        test_accuracy: f64,
        stats: &ParamStats,
    ) -> Self {
        Self {
            method: method.into(),
            arch: arch.into(),
            seed,
            train_accuracy,
            test_accuracy,
            generalization_error: generalization_error(train_accuracy, test_accuracy),
            param_mean: stats.mean,
            param_std: stats.std,
        }
    }

    pub fn evaluate(
        net: &Network<f32>,
        method: impl Into<String>,
        seed: u64,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<Self, NetworkError> {
        let stats = param_distribution_stats(net);
        Ok(Self::new(
            method,
            net.arch(),
            seed,
            accuracy(net, train)?,
            accuracy(net, test)?,
            &stats,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_goes_to_lowest_class() {
        let logits = Tensor::<f32>::full([1, 4], 0.5);
        assert_eq!(accuracy_from_logits(&logits, &[0]), 100.0);
        assert_eq!(accuracy_from_logits(&logits, &[3]), 0.0);
    }

    #[test]
    fn half_correct() {
        let logits = Tensor::<f32>::new([4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy_from_logits(&logits, &[0, 1, 1, 0]), 50.0);
    }

    #[test]
    fn generalization_error_table_rows() {
        assert!((generalization_error(98.60, 88.90) - 9.70).abs() < 1e-9);
        assert!((generalization_error(96.77, 89.53) - 7.24).abs() < 1e-9);
        assert_eq!(generalization_error(91.0, 91.0), 0.0);
    }

    #[test]
    fn population_std() {
        let s = value_stats(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!((s.mean, s.std), (0.5, 0.5));
        assert_eq!(s.histogram.counts[0], 2);
        assert_eq!(s.histogram.counts[HISTOGRAM_BINS - 1], 2);
        let c = value_stats(&[3.0; 7]);
        assert_eq!(c.std, 0.0);
        assert_eq!(c.histogram.counts.iter().sum::<u64>(), 7);
    }
}
