//! Forecast error metrics.
//!
//! All metrics are computed on de-normalized values so the numbers carry the
//! dataset's original units. MAPE divides by the true value and therefore
//! excludes targets whose magnitude is below [`MAPE_EPS`]; when every target
//! is excluded the MAPE is reported as undefined rather than zero.

use serde::{Deserialize, Serialize};

/// Targets with `|y| <= MAPE_EPS` are excluded from MAPE.
pub const MAPE_EPS: f64 = 1e-4;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no values to score")]
    Empty,
    #[error("{predicted} predictions for {actual} targets")]
    LengthMismatch { predicted: usize, actual: usize },
}

/// One scored comparison. `mape` is in percent and `None` when every target
/// fell below [`MAPE_EPS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

impl Metrics {
    /// MAPE as a report cell: the percentage, or the undefined marker.
    pub fn mape_cell(&self) -> String {
        match self.mape {
            Some(v) => format!("{v}"),
            None => "undefined".to_string(),
        }
    }
}

/// Streaming accumulator so metrics can be gathered across batches without
/// materializing the full prediction tensor.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    abs_sum: f64,
    sq_sum: f64,
    count: usize,
    pct_sum: f64,
    pct_count: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, predicted: f64, actual: f64) {
        let e = predicted - actual;
        self.abs_sum += e.abs();
        self.sq_sum += e * e;
        self.count += 1;
        if actual.abs() > MAPE_EPS {
            self.pct_sum += (e / actual).abs();
            self.pct_count += 1;
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.abs_sum += other.abs_sum;
        self.sq_sum += other.sq_sum;
        self.count += other.count;
        self.pct_sum += other.pct_sum;
        self.pct_count += other.pct_count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Finalize, or `None` when nothing was observed.
    pub fn metrics(&self) -> Option<Metrics> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(Metrics {
            mae: self.abs_sum / n,
            rmse: (self.sq_sum / n).sqrt(),
            mape: (self.pct_count > 0).then(|| 100.0 * self.pct_sum / self.pct_count as f64),
        })
    }
}

/// Score a flat prediction array against targets of the same length.
pub fn compute_metrics(predicted: &[f64], actual: &[f64]) -> Result<Metrics, MetricsError> {
    if predicted.len() != actual.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            actual: actual.len(),
        });
    }
    let mut acc = MetricAccumulator::new();
    for (&p, &a) in predicted.iter().zip(actual) {
        acc.observe(p, a);
    }
    acc.metrics().ok_or(MetricsError::Empty)
}

/// Average per-horizon metrics into one headline row: arithmetic mean of
/// each metric over the horizons, with MAPE averaged over the horizons where
/// it is defined.
pub fn horizon_mean(per_horizon: &[Metrics]) -> Option<Metrics> {
    if per_horizon.is_empty() {
        return None;
    }
    let n = per_horizon.len() as f64;
    let defined: Vec<f64> = per_horizon.iter().filter_map(|m| m.mape).collect();
    Some(Metrics {
        mae: per_horizon.iter().map(|m| m.mae).sum::<f64>() / n,
        rmse: per_horizon.iter().map(|m| m.rmse).sum::<f64>() / n,
        mape: (!defined.is_empty())
            .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_zero() {
        let m = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mape, Some(0.0));
    }

    #[test]
    fn hand_arithmetic_example() {
        let m = compute_metrics(&[1.0, 5.0], &[2.0, 4.0]).unwrap();
        assert!((m.mae - 1.0).abs() < 1e-12);
        assert!((m.rmse - 1.0).abs() < 1e-12);
        assert!((m.mape.unwrap() - 37.5).abs() < 1e-12);
    }

    #[test]
    fn mape_excludes_targets_below_epsilon() {
        let m = compute_metrics(&[1.0, 2.0], &[0.0, 2.0]).unwrap();
        assert_eq!(m.mape, Some(0.0));
        assert!((m.mae - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_targets_below_epsilon_makes_mape_undefined() {
        let m = compute_metrics(&[1.0, -1.0], &[0.0, 5e-5]).unwrap();
        assert_eq!(m.mape, None);
        assert_eq!(m.mape_cell(), "undefined");
    }

    #[test]
    fn rmse_exceeds_mae_for_uneven_errors() {
        let m = compute_metrics(&[3.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((m.mae - 1.5).abs() < 1e-12);
        assert!((m.rmse - (4.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert_eq!(
            compute_metrics(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch {
                predicted: 1,
                actual: 2
            })
        );
        assert_eq!(compute_metrics(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn accumulator_matches_batch_computation() {
        let predicted = [1.0, 5.0, 2.5, -0.5, 0.0];
        let actual = [2.0, 4.0, 2.5, 0.0, 1.0];
        let direct = compute_metrics(&predicted, &actual).unwrap();

        let mut left = MetricAccumulator::new();
        let mut right = MetricAccumulator::new();
        for (i, (&p, &a)) in predicted.iter().zip(&actual).enumerate() {
            if i < 2 {
                left.observe(p, a);
            } else {
                right.observe(p, a);
            }
        }
        left.merge(&right);
        assert_eq!(left.count(), 5);
        let merged = left.metrics().unwrap();
        assert!((merged.mae - direct.mae).abs() < 1e-12);
        assert!((merged.rmse - direct.rmse).abs() < 1e-12);
        assert!((merged.mape.unwrap() - direct.mape.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn horizon_mean_averages_defined_mapes_only() {
        let rows = [
            Metrics {
                mae: 1.0,
                rmse: 2.0,
                mape: Some(10.0),
            },
            Metrics {
                mae: 3.0,
                rmse: 4.0,
                mape: None,
            },
        ];
        let mean = horizon_mean(&rows).unwrap();
        assert!((mean.mae - 2.0).abs() < 1e-12);
        assert!((mean.rmse - 3.0).abs() < 1e-12);
        assert_eq!(mean.mape, Some(10.0));
        assert!(horizon_mean(&[]).is_none());
    }
}
