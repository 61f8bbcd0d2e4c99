//! Data-shift and workload-shift detection.
//!
//! Data shift compares the empirical CDF of recent answers against the
//! training answers with a two-sample Kolmogorov-Smirnov test. Workload
//! shift compares recent meta-vectors against the training mean and
//! covariance through the multivariate Chebyshev bound
//! `Pr(dist_M >= k) <= N / k^2`.

use std::collections::{HashMap, VecDeque};
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{sort_scalars, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriftError {
    #[error("sample is empty")]
    EmptySample,
    #[error("significance level {0} is outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("covariance is singular")]
    SingularCovariance,
    #[error("k = {k} gives a vacuous bound (need k > sqrt(N) = {min})")]
    VacuousBound { k: f64, min: f64 },
    #[error("vector width {got} does not match {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("non-finite answer")]
    NonFinite,
}

/// Sorted sample of answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "Vec<T>", into = "Vec<T>")]
pub struct AnswerEcdf<T: Scalar = f64> {
    sorted: Vec<T>,
}

impl<T: Scalar> TryFrom<Vec<T>> for AnswerEcdf<T> {
    type Error = DriftError;
    fn try_from(v: Vec<T>) -> Result<Self, DriftError> {
        AnswerEcdf::new(v)
    }
}

impl<T: Scalar> From<AnswerEcdf<T>> for Vec<T> {
    fn from(e: AnswerEcdf<T>) -> Vec<T> {
        e.sorted
    }
}

impl<T: Scalar> AnswerEcdf<T> {
    pub fn new(mut sample: Vec<T>) -> Result<Self, DriftError> {
        if sample.is_empty() {
            return Err(DriftError::EmptySample);
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(DriftError::NonFinite);
        }
        sort_scalars(&mut sample);
        Ok(AnswerEcdf { sorted: sample })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted(&self) -> &[T] {
        &self.sorted
    }

    pub fn insert(&mut self, y: T) -> Result<(), DriftError> {
        if !y.is_finite() {
            return Err(DriftError::NonFinite);
        }
        let at = self.sorted.partition_point(|v| *v <= y);
        self.sorted.insert(at, y);
        Ok(())
    }

    /// `F(y)`: fraction of the sample `<= y`.
    pub fn cdf(&self, y: T) -> f64 {
        self.sorted.partition_point(|v| *v <= y) as f64 / self.sorted.len() as f64
    }
}

/// `sup_y |F1(y) - F2(y)|`, evaluated at every merged sample point.
pub fn ks_statistic<T: Scalar>(f1: &AnswerEcdf<T>, f2: &AnswerEcdf<T>) -> Result<f64, DriftError> {
    if f1.is_empty() || f2.is_empty() {
        return Err(DriftError::EmptySample);
    }
    let (a, b) = (f1.sorted(), f2.sorted());
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() || j < b.len() {
        let y = match (a.get(i), b.get(j)) {
            (Some(x), Some(z)) => x.min(*z),
            (Some(x), None) => *x,
            (None, Some(z)) => *z,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= y {
            i += 1;
        }
        while j < b.len() && b[j] <= y {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// `c(alpha) * sqrt((n + m) / (n m))` with `c(alpha) = sqrt(-ln(alpha/2) / 2)`.
pub fn ks_threshold(alpha: f64, n: usize, m: usize) -> Result<f64, DriftError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DriftError::InvalidAlpha(alpha));
    }
    if n == 0 || m == 0 {
        return Err(DriftError::EmptySample);
    }
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let (n, m) = (n as f64, m as f64);
    Ok(c * ((n + m) / (n * m)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataShiftCheck {
    pub shifted: bool,
    #[serde(rename = "D")]
    pub d: f64,
    pub threshold: f64,
}

pub fn check_data_shift<T: Scalar>(
    train: &AnswerEcdf<T>,
    monitored: &AnswerEcdf<T>,
    alpha: f64,
) -> Result<DataShiftCheck, DriftError> {
    let threshold = ks_threshold(alpha, train.len(), monitored.len())?;
    let d = ks_statistic(train, monitored)?;
    Ok(DataShiftCheck {
        shifted: d > threshold,
        d,
        threshold,
    })
}

/// Streaming moments of meta-vectors. Missing slots (NaN) are replaced by
/// the running mean of that slot's present values before accumulating.
#[derive(Debug, Clone)]
pub struct WorkloadAccumulator<T: Scalar = f64> {
    n: usize,
    mean: Vec<T>,
    comoment: Vec<T>,
    slot_mean: Vec<T>,
    slot_seen: Vec<usize>,
}

impl<T: Scalar> WorkloadAccumulator<T> {
    pub fn new(d: usize) -> Self {
        WorkloadAccumulator {
            n: 0,
            mean: vec![T::zero(); d],
            comoment: vec![T::zero(); d * d],
            slot_mean: vec![T::zero(); d],
            slot_seen: vec![0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, m: &[T]) -> Result<(), DriftError> {
        let d = self.dim();
        if m.len() != d {
            return Err(DriftError::WidthMismatch { expected: d, got: m.len() });
        }
        for (s, v) in m.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            self.slot_seen[s] += 1;
            let k = T::from_usize_lossy(self.slot_seen[s]);
            self.slot_mean[s] = self.slot_mean[s] + (*v - self.slot_mean[s]) / k;
        }
        let x: Vec<T> = m
            .iter()
            .zip(&self.slot_mean)
            .map(|(v, mu)| if v.is_nan() { *mu } else { *v })
            .collect();
        self.n += 1;
        let n = T::from_usize_lossy(self.n);
        let delta: Vec<T> = x.iter().zip(&self.mean).map(|(a, b)| *a - *b).collect();
        for (mu, dl) in self.mean.iter_mut().zip(&delta) {
            *mu = *mu + *dl / n;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.comoment[i * d + j] = self.comoment[i * d + j] + after * delta[j];
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<WorkloadStats<T>, DriftError> {
        if self.n < 2 {
            return Err(DriftError::EmptySample);
        }
        let denom = T::from_usize_lossy(self.n - 1);
        let cov = self.comoment.iter().map(|c| *c / denom).collect();
        WorkloadStats::from_moments(self.mean.clone(), cov, self.slot_mean.clone(), self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct WorkloadStatsRepr<T> {
    d: usize,
    samples: usize,
    mean: Vec<T>,
    /// Row-major, before regularization.
    covariance: Vec<T>,
    impute: Vec<T>,
}

/// Mean and ridge-regularized covariance of training meta-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "WorkloadStatsRepr<T>", into = "WorkloadStatsRepr<T>")]
pub struct WorkloadStats<T: Scalar = f64> {
    d: usize,
    samples: usize,
    mean: Vec<T>,
    covariance: Vec<T>,
    impute: Vec<T>,
    ridge: T,
    /// `1/sqrt(diag)` of the regularized covariance.
    scale: Vec<T>,
    /// Cholesky factor of the regularized correlation matrix, row-major.
    chol: Vec<T>,
}

impl<T: Scalar> TryFrom<WorkloadStatsRepr<T>> for WorkloadStats<T> {
    type Error = DriftError;
    fn try_from(r: WorkloadStatsRepr<T>) -> Result<Self, DriftError> {
        if r.mean.len() != r.d || r.impute.len() != r.d || r.covariance.len() != r.d * r.d {
            return Err(DriftError::WidthMismatch {
                expected: r.d,
                got: r.mean.len(),
            });
        }
        WorkloadStats::from_moments(r.mean, r.covariance, r.impute, r.samples)
    }
}

impl<T: Scalar> From<WorkloadStats<T>> for WorkloadStatsRepr<T> {
    fn from(s: WorkloadStats<T>) -> Self {
        WorkloadStatsRepr {
            d: s.d,
            samples: s.samples,
            mean: s.mean,
            covariance: s.covariance,
            impute: s.impute,
        }
    }
}

/// Lower-triangular `L` with `L L^T = a`, or `None` if `a` is not positive
/// definite.
fn cholesky<T: Scalar>(a: &[T], d: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s = s - l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

impl<T: Scalar> WorkloadStats<T> {
    /// Regularizes with `eps = 1e-6 * mean(diag)` and factorizes.
    pub fn from_moments(mean: Vec<T>, covariance: Vec<T>, impute: Vec<T>, samples: usize) -> Result<Self, DriftError> {
        let d = mean.len();
        if d == 0 {
            return Err(DriftError::EmptySample);
        }
        let diag_mean = (0..d).map(|i| covariance[i * d + i]).sum::<T>() / T::from_usize_lossy(d);
        if !(diag_mean > T::zero()) || !diag_mean.is_finite() {
            return Err(DriftError::SingularCovariance);
        }
        let ridge = diag_mean * T::from_f64_lossy(1e-6);
        let scale: Vec<T> = (0..d)
            .map(|i| T::one() / (covariance[i * d + i] + ridge).sqrt())
            .collect();
        let mut corr = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                let mut c = covariance[i * d + j];
                if i == j {
                    c = c + ridge;
                }
                corr[i * d + j] = c * scale[i] * scale[j];
            }
        }
        let chol = cholesky(&corr, d).ok_or(DriftError::SingularCovariance)?;
        Ok(WorkloadStats {
            d,
            samples,
            mean,
            covariance,
            impute,
            ridge,
            scale,
            chol,
        })
    }

    pub fn fit<'a, I>(vectors: I, d: usize) -> Result<Self, DriftError>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut acc = WorkloadAccumulator::new(d);
        for v in vectors {
            acc.push(v)?;
        }
        acc.finish()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Unregularized sample covariance, row-major.
    pub fn covariance(&self) -> &[T] {
        &self.covariance
    }

    pub fn ridge(&self) -> T {
        self.ridge
    }

    /// `Tr[Σ⁻¹Σ]`, which is `d`.
    pub fn trace_term(&self) -> f64 {
        self.d as f64
    }

    /// `k` such that `N / k^2 = bound`.
    pub fn k_for_bound(&self, bound: f64) -> f64 {
        (self.trace_term() / bound).sqrt()
    }

    /// `sqrt((m - mu)^T Σ^-1 (m - mu))`, missing slots imputed.
    pub fn mahalanobis(&self, m: &[T]) -> Result<f64, DriftError> {
        if m.len() != self.d {
            return Err(DriftError::WidthMismatch {
                expected: self.d,
                got: m.len(),
            });
        }
        let d = self.d;
        // forward substitution L z = scaled (m - mu)
        let mut z = vec![T::zero(); d];
        for i in 0..d {
            let v = if m[i].is_nan() { self.impute[i] } else { m[i] };
            let mut s = (v - self.mean[i]) * self.scale[i];
            for k in 0..i {
                s = s - self.chol[i * d + k] * z[k];
            }
            z[i] = s / self.chol[i * d + i];
        }
        Ok(z.iter().map(|v| v.to_f64_lossy() * v.to_f64_lossy()).sum::<f64>().sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadShiftCheck {
    pub shifted: bool,
    pub exceedance: f64,
    pub bound: f64,
}

pub fn check_workload_shift<T: Scalar>(
    stats: &WorkloadStats<T>,
    monitored: &[&[T]],
    k: f64,
) -> Result<WorkloadShiftCheck, DriftError> {
    let n_term = stats.trace_term();
    if !(k > n_term.sqrt()) {
        return Err(DriftError::VacuousBound { k, min: n_term.sqrt() });
    }
    if monitored.is_empty() {
        return Err(DriftError::EmptySample);
    }
    let mut over = 0usize;
    for m in monitored {
        if stats.mahalanobis(m)? >= k {
            over += 1;
        }
    }
    let exceedance = over as f64 / monitored.len() as f64;
    let bound = n_term / (k * k);
    Ok(WorkloadShiftCheck {
        shifted: exceedance >= bound,
        exceedance,
        bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    Data,
    Workload,
}

/// One line of the drift event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub ts: String,
    pub kind: DriftKind,
    pub statistic: f64,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub af: Option<String>,
    pub retrain_recommended: bool,
}

impl DriftEvent {
    pub fn new(kind: DriftKind, statistic: f64, threshold: f64) -> Self {
        DriftEvent {
            ts: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            kind,
            statistic,
            threshold,
            af: None,
            retrain_recommended: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Significance level per window length of stream.
    pub alpha: f64,
    pub window: usize,
    /// Queries between checks once the window is full.
    pub check_every: usize,
    /// Chebyshev bound `N / k^2`.
    pub workload_bound: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            alpha: 0.05,
            window: 500,
            check_every: 100,
            workload_bound: 0.05,
        }
    }
}

impl MonitorConfig {
    /// Checks made while one window length of answers streams past.
    pub fn checks_per_window(&self) -> usize {
        self.window.div_ceil(self.check_every.max(1)).max(1)
    }
}

/// Simulated no-shift streams behind [`stream_threshold`].
pub const CALIBRATION_STREAMS: usize = 2000;

/// KS threshold for a sliding-window monitor against `n_ref` reference
/// answers: the `1 - alpha` quantile of the largest statistic among the
/// checks of one window length of stream, simulated without shift. For
/// continuous answers the statistic is distribution-free, so uniform draws
/// stand in for any reference. Seeded by the shape, hence deterministic;
/// results are cached per process.
pub fn stream_threshold(n_ref: usize, cfg: &MonitorConfig) -> Result<f64, DriftError> {
    ks_threshold(cfg.alpha, n_ref, cfg.window.max(1))?;
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize, u64), f64>>> = OnceLock::new();
    let key = (n_ref, cfg.window, cfg.check_every, cfg.alpha.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(t) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
        return Ok(*t);
    }
    let t = simulate_stream_threshold(n_ref, cfg)?;
    cache.lock().unwrap_or_else(|e| e.into_inner()).insert(key, t);
    Ok(t)
}

fn simulate_stream_threshold(n_ref: usize, cfg: &MonitorConfig) -> Result<f64, DriftError> {
    let (w, every, checks) = (cfg.window.max(1), cfg.check_every.max(1), cfg.checks_per_window());
    let seed = (n_ref as u64) ^ ((w as u64) << 21) ^ ((every as u64) << 42);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = w + (checks - 1) * every;
    let mut maxima = Vec::with_capacity(CALIBRATION_STREAMS);
    for _ in 0..CALIBRATION_STREAMS {
        let reference = AnswerEcdf::new((0..n_ref).map(|_| rng.random::<f64>()).collect())?;
        let stream: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let mut worst = 0.0f64;
        for c in 0..checks {
            let end = w + c * every;
            let window = AnswerEcdf::new(stream[end - w..end].to_vec())?;
            worst = worst.max(ks_statistic(&reference, &window)?);
        }
        maxima.push(worst);
    }
    maxima.sort_by(f64::total_cmp);
    let k = ((1.0 - cfg.alpha) * CALIBRATION_STREAMS as f64).ceil() as usize;
    Ok(maxima[k.clamp(1, CALIBRATION_STREAMS) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorStatus {
    pub seen: usize,
    pub window_len: usize,
    pub last_statistic: Option<f64>,
    pub threshold: Option<f64>,
    pub events: usize,
}

/// KS test of a sliding answer window against the training answers.
#[derive(Debug, Clone)]
pub struct DataShiftMonitor<T: Scalar = f64> {
    reference: AnswerEcdf<T>,
    cfg: MonitorConfig,
    threshold: f64,
    window: VecDeque<T>,
    since_check: usize,
    status: MonitorStatus,
}

impl<T: Scalar> DataShiftMonitor<T> {
    pub fn new(reference: AnswerEcdf<T>, cfg: MonitorConfig) -> Result<Self, DriftError> {
        let threshold = stream_threshold(reference.len(), &cfg)?;
        Ok(DataShiftMonitor {
            reference,
            cfg,
            threshold,
            window: VecDeque::with_capacity(cfg.window),
            since_check: 0,
            status: MonitorStatus {
                seen: 0,
                window_len: 0,
                last_statistic: None,
                threshold: None,
                events: 0,
            },
        })
    }

    pub fn status(&self) -> MonitorStatus {
        self.status
    }

    /// See [`stream_threshold`].
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn push(&mut self, y: T) -> Result<Option<DriftEvent>, DriftError> {
        if !y.is_finite() {
            return Err(DriftError::NonFinite);
        }
        if self.window.len() == self.cfg.window {
            self.window.pop_front();
        }
        self.window.push_back(y);
        self.status.seen += 1;
        self.status.window_len = self.window.len();
        self.since_check += 1;
        if self.window.len() < self.cfg.window || self.since_check < self.cfg.check_every {
            return Ok(None);
        }
        self.since_check = 0;
        let current = AnswerEcdf::new(self.window.iter().copied().collect())?;
        let d = ks_statistic(&self.reference, &current)?;
        self.status.last_statistic = Some(d);
        self.status.threshold = Some(self.threshold);
        if d > self.threshold {
            self.status.events += 1;
            return Ok(Some(DriftEvent::new(DriftKind::Data, d, self.threshold)));
        }
        Ok(None)
    }
}

/// Chebyshev test of a sliding meta-vector window against training moments.
#[derive(Debug, Clone)]
pub struct WorkloadShiftMonitor<T: Scalar = f64> {
    stats: WorkloadStats<T>,
    cfg: MonitorConfig,
    k: f64,
    window: VecDeque<bool>,
    over: usize,
    since_check: usize,
    status: MonitorStatus,
}

impl<T: Scalar> WorkloadShiftMonitor<T> {
    pub fn new(stats: WorkloadStats<T>, cfg: MonitorConfig) -> Result<Self, DriftError> {
        let k = stats.k_for_bound(cfg.workload_bound);
        if !(k > stats.trace_term().sqrt()) {
            return Err(DriftError::VacuousBound {
                k,
                min: stats.trace_term().sqrt(),
            });
        }
        Ok(WorkloadShiftMonitor {
            stats,
            cfg,
            k,
            window: VecDeque::with_capacity(cfg.window),
            over: 0,
            since_check: 0,
            status: MonitorStatus {
                seen: 0,
                window_len: 0,
                last_statistic: None,
                threshold: None,
                events: 0,
            },
        })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn status(&self) -> MonitorStatus {
        self.status
    }

    pub fn push(&mut self, m: &[T]) -> Result<Option<DriftEvent>, DriftError> {
        let exceeds = self.stats.mahalanobis(m)? >= self.k;
        if self.window.len() == self.cfg.window && self.window.pop_front() == Some(true) {
            self.over -= 1;
        }
        self.window.push_back(exceeds);
        self.over += usize::from(exceeds);
        self.status.seen += 1;
        self.status.window_len = self.window.len();
        self.since_check += 1;
        if self.window.len() < self.cfg.window || self.since_check < self.cfg.check_every {
            return Ok(None);
        }
        self.since_check = 0;
        let exceedance = self.over as f64 / self.window.len() as f64;
        let bound = self.cfg.workload_bound;
        self.status.last_statistic = Some(exceedance);
        self.status.threshold = Some(bound);
        if exceedance >= bound {
            self.status.events += 1;
            return Ok(Some(DriftEvent::new(DriftKind::Workload, exceedance, bound)));
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ecdf(v: &[f64]) -> AnswerEcdf<f64> {
        AnswerEcdf::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ks_examples() {
        let a = ecdf(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_statistic(&a, &ecdf(&[5.0, 6.0, 7.0, 8.0])).unwrap(), 1.0);
        assert_eq!(ks_statistic(&ecdf(&[1.0, 2.0]), &ecdf(&[1.0, 3.0])).unwrap(), 0.5);
    }

    #[test]
    fn ks_handles_ties() {
        let a = ecdf(&[1.0, 1.0, 2.0]);
        let b = ecdf(&[1.0, 2.0, 2.0]);
        assert!((ks_statistic(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_values() {
        let t = ks_threshold(0.05, 100, 100).unwrap();
        assert!((t - 0.19206).abs() < 1e-4, "{t}");
        let n = 50;
        let c = (-(0.025f64).ln() / 2.0).sqrt();
        assert!((ks_threshold(0.05, n, n).unwrap() - c * (2.0 / n as f64).sqrt()).abs() < 1e-15);
        assert!(ks_threshold(0.5, 10, 10).unwrap() < ks_threshold(0.05, 10, 10).unwrap());
        assert_eq!(ks_threshold(1.0, 1, 1), Err(DriftError::InvalidAlpha(1.0)));
        assert_eq!(ks_threshold(0.05, 0, 1), Err(DriftError::EmptySample));
    }

    #[test]
    fn empty_sample_rejected() {
        assert_eq!(AnswerEcdf::<f64>::new(vec![]), Err(DriftError::EmptySample));
    }

    #[test]
    fn ecdf_insert_keeps_order() {
        let mut e = ecdf(&[3.0, 1.0]);
        e.insert(2.0).unwrap();
        assert_eq!(e.sorted(), &[1.0, 2.0, 3.0]);
        assert_eq!(e.cdf(2.0), 2.0 / 3.0);
    }

    #[test]
    fn mahalanobis_identity_is_euclidean() {
        let s = WorkloadStats::from_moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 10).unwrap();
        let d = s.mahalanobis(&[3.0, 4.0]).unwrap();
        // ridge 1e-6 on unit variances
        assert!((d - 5.0).abs() < 1e-5, "{d}");
    }

    #[test]
    fn singular_guard() {
        assert_eq!(
            WorkloadStats::from_moments(vec![0.0], vec![0.0], vec![0.0], 3),
            Err(DriftError::SingularCovariance)
        );
    }

    #[test]
    fn vacuous_k_rejected() {
        let s = WorkloadStats::from_moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 10).unwrap();
        let v: &[f64] = &[0.0, 0.0];
        assert!(matches!(check_workload_shift(&s, &[v], 1.0), Err(DriftError::VacuousBound { .. })));
    }

    #[test]
    fn accumulator_matches_two_pass() {
        let rows = [[1.0, 2.0], [2.0, 1.0], [4.0, 9.0], [0.5, -3.0]];
        let s = WorkloadStats::fit(rows.iter().map(|r| &r[..]), 2).unwrap();
        let n = rows.len() as f64;
        let mx = rows.iter().map(|r| r[0]).sum::<f64>() / n;
        let my = rows.iter().map(|r| r[1]).sum::<f64>() / n;
        let cxy = rows.iter().map(|r| (r[0] - mx) * (r[1] - my)).sum::<f64>() / (n - 1.0);
        assert!((s.mean()[0] - mx).abs() < 1e-12);
        assert!((s.covariance()[1] - cxy).abs() < 1e-12);
        assert!((s.covariance()[2] - cxy).abs() < 1e-12);
    }

    #[test]
    fn stats_serde_round_trip() {
        let rows = [[1.0, 2.0], [2.0, 1.0], [4.0, 9.0]];
        let s = WorkloadStats::fit(rows.iter().map(|r| &r[..]), 2).unwrap();
        let back: WorkloadStats<f64> = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn event_json_shape() {
        let e = DriftEvent::new(DriftKind::Data, 0.3, 0.1);
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["kind"], "data");
        assert!(v["ts"].is_string());
    }
}
