//! Prediction intervals from a pair of quantile models.
//!
//! For miscoverage `t` the lower model targets level `t/2` and the upper
//! `1 - t/2`, giving nominal coverage `1 - t`.
//!
//! [`fit_interval_calibrated`] additionally holds out a calibration split
//! and widens both ends by the `ceil((n+1)(1-t))`-th smallest conformity
//! score `max(lo(x) - y, y - hi(x))`, which restores the nominal coverage
//! when the quantile models overfit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbdt::{fit, holdout_split, FeatureMatrix, GbdtConfig, GbdtError, GbdtModel, Loss};
use crate::scalar::{sort_scalars, Scalar};
use crate::schema::TrainingSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntervalError {
    #[error("miscoverage level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("held-out set is empty")]
    EmptyHoldout,
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct IntervalModel<T: Scalar = f64> {
    pub lo: GbdtModel<T>,
    pub hi: GbdtModel<T>,
    /// Miscoverage level.
    pub t: f64,
    /// Added below `lo` and above `hi`; zero when uncalibrated.
    #[serde(default = "zero")]
    pub margin: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval<T> {
    pub low: T,
    pub high: T,
    pub nominal_coverage: f64,
    /// The lower model predicted above the upper one and the ends were swapped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub crossed: bool,
}

impl<T: Scalar> PredictionInterval<T> {
    pub fn contains(&self, y: T) -> bool {
        self.low <= y && y <= self.high
    }

    pub fn width(&self) -> T {
        self.high - self.low
    }
}

/// Quantile levels `(t/2, 1 - t/2)` for miscoverage `t`.
pub fn levels(t: f64) -> Result<(f64, f64), IntervalError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(IntervalError::InvalidLevel(t));
    }
    Ok((t / 2.0, 1.0 - t / 2.0))
}

pub fn fit_interval<T: Scalar>(
    x: &FeatureMatrix<T>,
    y: &[T],
    t: f64,
    cfg: &GbdtConfig,
) -> Result<IntervalModel<T>, IntervalError> {
    let (lo_level, hi_level) = levels(t)?;
    let lo = fit(x, y, cfg, Loss::pinball(lo_level)?)?;
    let hi = fit(x, y, cfg, Loss::pinball(hi_level)?)?;
    Ok(IntervalModel {
        lo,
        hi,
        t,
        margin: T::zero(),
    })
}

fn zero<T: Scalar>() -> T {
    T::zero()
}

/// Fits on `1 - calibration_fraction` of the rows (chosen by content hash)
/// and sets the margin from the rest. The margin is never negative.
pub fn fit_interval_calibrated<T: Scalar>(
    x: &FeatureMatrix<T>,
    y: &[T],
    t: f64,
    cfg: &GbdtConfig,
    calibration_fraction: f64,
) -> Result<IntervalModel<T>, IntervalError> {
    levels(t)?;
    let (fit_idx, cal_idx) = holdout_split(x, y, calibration_fraction, 2 * cfg.min_samples_leaf);
    if cal_idx.is_empty() {
        return fit_interval(x, y, t, cfg);
    }
    let xf = x.select_rows(&fit_idx);
    let yf: Vec<T> = fit_idx.iter().map(|&i| y[i]).collect();
    let mut model = fit_interval(&xf, &yf, t, cfg)?;
    let mut scores: Vec<T> = Vec::with_capacity(cal_idx.len());
    for &i in &cal_idx {
        let iv = model.interval(x.row(i))?;
        scores.push((iv.low - y[i]).max(y[i] - iv.high));
    }
    sort_scalars(&mut scores);
    let n = scores.len();
    let rank = ((n + 1) as f64 * (1.0 - t)).ceil() as usize;
    let margin = if rank > n { scores[n - 1] } else { scores[rank - 1] };
    model.margin = margin.max(T::zero());
    Ok(model)
}

/// [`fit_interval`] on a training set's meta-vectors and answers.
pub fn fit_interval_set(train: &TrainingSet, t: f64, cfg: &GbdtConfig) -> Result<IntervalModel<f64>, IntervalError> {
    levels(t)?;
    let (x, y) = train.to_matrix::<f64>();
    fit_interval(&x, &y, t, cfg)
}

impl<T: Scalar> IntervalModel<T> {
    pub fn nominal_coverage(&self) -> f64 {
        1.0 - self.t
    }

    /// `[min, max]` of the two quantile predictions.
    pub fn interval(&self, m: &[T]) -> Result<PredictionInterval<T>, IntervalError> {
        let a = self.lo.predict(m)?;
        let b = self.hi.predict(m)?;
        Ok(PredictionInterval {
            low: a.min(b) - self.margin,
            high: a.max(b) + self.margin,
            nominal_coverage: self.nominal_coverage(),
            crossed: a > b,
        })
    }

    /// Fraction of held-out answers inside their intervals.
    pub fn coverage_ratio(&self, x: &FeatureMatrix<T>, y: &[T]) -> Result<f64, IntervalError> {
        if y.is_empty() {
            return Err(IntervalError::EmptyHoldout);
        }
        let mut inside = 0usize;
        for (i, &truth) in y.iter().enumerate() {
            if self.interval(x.row(i))?.contains(truth) {
                inside += 1;
            }
        }
        Ok(inside as f64 / y.len() as f64)
    }

    pub fn mean_width(&self, x: &FeatureMatrix<T>) -> Result<T, IntervalError> {
        let mut total = T::zero();
        for i in 0..x.rows() {
            total = total + self.interval(x.row(i))?.width();
        }
        Ok(total / T::from_usize_lossy(x.rows().max(1)))
    }
}

/// Coverage on a held-out training set.
pub fn coverage_ratio(model: &IntervalModel<f64>, heldout: &TrainingSet) -> Result<f64, IntervalError> {
    if heldout.is_empty() {
        return Err(IntervalError::EmptyHoldout);
    }
    let (x, y) = heldout.to_matrix::<f64>();
    model.coverage_ratio(&x, &y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_pair(lo: f64, hi: f64) -> IntervalModel<f64> {
        IntervalModel {
            lo: GbdtModel::constant(lo, Loss::Pinball { level: 0.05 }, 1),
            hi: GbdtModel::constant(hi, Loss::Pinball { level: 0.95 }, 1),
            t: 0.1,
            margin: 0.0,
        }
    }

    #[test]
    fn levels_for_ten_percent() {
        let (a, b) = levels(0.1).unwrap();
        assert!((a - 0.05).abs() < 1e-15 && (b - 0.95).abs() < 1e-15);
        assert!((constant_pair(0.0, 1.0).nominal_coverage() - 0.9).abs() < 1e-15);
        assert_eq!(levels(1.0), Err(IntervalError::InvalidLevel(1.0)));
        assert_eq!(levels(0.0), Err(IntervalError::InvalidLevel(0.0)));
    }

    #[test]
    fn ordered_interval() {
        let iv = constant_pair(5.0, 9.0).interval(&[0.0]).unwrap();
        assert_eq!((iv.low, iv.high, iv.crossed), (5.0, 9.0, false));
    }

    #[test]
    fn crossing_is_swapped_and_flagged() {
        let iv = constant_pair(9.0, 5.0).interval(&[0.0]).unwrap();
        assert_eq!((iv.low, iv.high, iv.crossed), (5.0, 9.0, true));
    }

    #[test]
    fn constant_target_zero_width() {
        let x = FeatureMatrix::new(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = fit_interval(&x, &[4.0; 6], 0.1, &GbdtConfig::quantile_default()).unwrap();
        let iv = m.interval(&[2.5]).unwrap();
        assert_eq!((iv.low, iv.high), (4.0, 4.0));
    }

    #[test]
    fn margin_widens_both_ends() {
        let mut m = constant_pair(5.0, 9.0);
        m.margin = 1.5;
        let iv = m.interval(&[0.0]).unwrap();
        assert_eq!((iv.low, iv.high), (3.5, 10.5));
    }

    #[test]
    fn calibrated_margin_is_conformal_quantile() {
        // constant models from a constant target, spread only in calibration rows
        let n = 40;
        let x = FeatureMatrix::new(n, 1, (0..n).map(|i| i as f64).collect());
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.0 } else { i as f64 }).collect();
        let cfg = GbdtConfig {
            rounds: 1,
            ..GbdtConfig::quantile_default()
        };
        let m = fit_interval_calibrated(&x, &y, 0.5, &cfg, 0.25).unwrap();
        assert!(m.margin >= 0.0);
        let (fit_idx, cal_idx) = holdout_split(&x, &y, 0.25, 6);
        assert_eq!(cal_idx.len(), 10);
        assert_eq!(fit_idx.len(), 30);
        let raw = IntervalModel { margin: 0.0, ..m.clone() };
        let mut scores: Vec<f64> = cal_idx
            .iter()
            .map(|&i| {
                let iv = raw.interval(&[i as f64]).unwrap();
                (iv.low - y[i]).max(y[i] - iv.high)
            })
            .collect();
        scores.sort_by(f64::total_cmp);
        // ceil(11 * 0.5) = 6th smallest
        assert_eq!(m.margin, scores[5].max(0.0));
    }

    #[test]
    fn coverage_extremes() {
        let m = constant_pair(0.0, 10.0);
        let x = FeatureMatrix::new(3, 1, vec![0.0; 3]);
        assert_eq!(m.coverage_ratio(&x, &[1.0, 5.0, 10.0]).unwrap(), 1.0);
        assert_eq!(m.coverage_ratio(&x, &[-1.0, 11.0, 50.0]).unwrap(), 0.0);
        let empty = FeatureMatrix::new(0, 1, vec![]);
        assert_eq!(m.coverage_ratio(&empty, &[]), Err(IntervalError::EmptyHoldout));
    }
}
