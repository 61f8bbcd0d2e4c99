//! Floating-point scalar abstraction shared by the numeric modules.
//!
//! Model fitting, interval estimation, clustering and drift statistics are
//! written once against [`Scalar`] and instantiated for `f32` and `f64`. The
//! crate root re-exports `f64` aliases for the common case.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`; the value is rounded to nearest.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).unwrap_or_else(Self::infinity)
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Total order usable with `sort_by`; NaN sorts last.
    fn total_cmp_scalar(&self, other: &Self) -> std::cmp::Ordering;
}

impl Scalar for f32 {
    fn total_cmp_scalar(&self, other: &Self) -> std::cmp::Ordering {
        self.total_cmp(other)
    }
}

impl Scalar for f64 {
    fn total_cmp_scalar(&self, other: &Self) -> std::cmp::Ordering {
        self.total_cmp(other)
    }
}

/// Sorts ascending with NaN last.
pub(crate) fn sort_scalars<T: Scalar>(values: &mut [T]) {
    values.sort_by(|a, b| a.total_cmp_scalar(b));
}

/// Exact median order statistic. Even lengths average the two middle values.
pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    sort_scalars(&mut v);
    let n = v.len();
    if n % 2 == 1 {
        Some(v[n / 2])
    } else {
        let two = T::one() + T::one();
        Some((v[n / 2 - 1] + v[n / 2]) / two)
    }
}

/// Empirical t-quantile `inf { y : F(y) > t }` of an already sorted sample.
pub fn sorted_quantile<T: Scalar>(sorted: &[T], t: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    // smallest k (1-indexed) with k/n > t
    let k = ((n as f64) * t).floor() as usize + 1;
    Some(sorted[k.min(n) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0f32, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median::<f64>(&[]), None);
    }

    #[test]
    fn quantile_matches_infimum_definition() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        // F(y) = k/10; smallest y with F(y) > 0.9 is 10
        assert_eq!(sorted_quantile(&s, 0.9), Some(10.0));
        assert_eq!(sorted_quantile(&s, 0.5), Some(6.0));
        assert_eq!(sorted_quantile(&s, 0.05), Some(1.0));
    }
}
