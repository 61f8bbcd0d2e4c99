//! Online partitioning of query vectors with one local model per cluster.
//!
//! Clusters grow by threshold: a query farther than `growth_threshold` from
//! every representative becomes a new representative; otherwise the nearest
//! representative moves to the streaming mean of its members. Prediction
//! uses only the nearest cluster's model.
//!
//! Distances over meta-vectors with missing slots: missing/missing adds 0,
//! missing/present adds the present value's squared deviation from the
//! running mean of that slot, present/present is the usual squared
//! difference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbdt::{fit, FeatureMatrix, GbdtConfig, GbdtError, GbdtModel, Loss};
use crate::scalar::{median, Scalar};

/// Queries buffered before the default growth threshold is fixed.
pub const WARMUP_QUERIES: usize = 100;
pub const CV_FOLDS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cluster set is empty")]
    EmptyClusterSet,
    #[error("vector width {got} does not match cluster width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("growth threshold must be positive")]
    InvalidThreshold,
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet<T: Scalar = f64> {
    width: usize,
    representatives: Vec<Vec<T>>,
    /// Per cluster, per slot: members with that slot present.
    slot_counts: Vec<Vec<u64>>,
    counts: Vec<u64>,
    growth_threshold: Option<T>,
    slot_mean: Vec<T>,
    slot_seen: Vec<u64>,
    warmup: Vec<Vec<T>>,
}

impl<T: Scalar> ClusterSet<T> {
    /// Fixed growth threshold.
    pub fn with_threshold(width: usize, threshold: T) -> Result<Self, ClusterError> {
        if !(threshold > T::zero()) {
            return Err(ClusterError::InvalidThreshold);
        }
        let mut cs = Self::adaptive(width);
        cs.growth_threshold = Some(threshold);
        Ok(cs)
    }

    /// Threshold fixed after [`WARMUP_QUERIES`] observations as twice the
    /// median pairwise distance among them; the warm-up stream is then
    /// replayed.
    pub fn adaptive(width: usize) -> Self {
        ClusterSet {
            width,
            representatives: Vec::new(),
            slot_counts: Vec::new(),
            counts: Vec::new(),
            growth_threshold: None,
            slot_mean: vec![T::nan(); width],
            slot_seen: vec![0; width],
            warmup: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representatives.is_empty()
    }

    pub fn representatives(&self) -> &[Vec<T>] {
        &self.representatives
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn growth_threshold(&self) -> Option<T> {
        self.growth_threshold
    }

    fn slot_gap(&self, slot: usize, a: T, b: T) -> T {
        match (a.is_nan(), b.is_nan()) {
            (true, true) => T::zero(),
            (false, false) => (a - b) * (a - b),
            (true, false) | (false, true) => {
                let v = if a.is_nan() { b } else { a };
                let m = self.slot_mean[slot];
                if m.is_nan() {
                    T::zero()
                } else {
                    (v - m) * (v - m)
                }
            }
        }
    }

    /// Imputed Euclidean distance.
    pub fn distance(&self, a: &[T], b: &[T]) -> T {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(s, (x, y))| self.slot_gap(s, *x, *y))
            .sum::<T>()
            .sqrt()
    }

    fn nearest(&self, q: &[T]) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        for (k, w) in self.representatives.iter().enumerate() {
            let d = self.distance(q, w);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best
    }

    fn check_width(&self, q: &[T]) -> Result<(), ClusterError> {
        if q.len() != self.width {
            return Err(ClusterError::WidthMismatch {
                expected: self.width,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Index of the closest representative; ties go to the lowest index.
    pub fn assign(&self, q: &[T]) -> Result<usize, ClusterError> {
        self.check_width(q)?;
        self.nearest(q).map(|(k, _)| k).ok_or(ClusterError::EmptyClusterSet)
    }

    fn update_slot_means(&mut self, q: &[T]) {
        for (s, v) in q.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            self.slot_seen[s] += 1;
            let n = T::from_usize_lossy(self.slot_seen[s] as usize);
            let m = self.slot_mean[s];
            self.slot_mean[s] = if m.is_nan() { *v } else { m + (*v - m) / n };
        }
    }

    fn insert(&mut self, q: &[T]) {
        self.representatives.push(q.to_vec());
        self.slot_counts
            .push(q.iter().map(|v| u64::from(!v.is_nan())).collect());
        self.counts.push(1);
    }

    fn absorb(&mut self, k: usize, q: &[T]) {
        self.counts[k] += 1;
        for (s, v) in q.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            self.slot_counts[k][s] += 1;
            let n = T::from_usize_lossy(self.slot_counts[k][s] as usize);
            let w = self.representatives[k][s];
            self.representatives[k][s] = if w.is_nan() { *v } else { w + (*v - w) / n };
        }
    }

    fn step(&mut self, q: &[T], threshold: T) {
        self.update_slot_means(q);
        match self.nearest(q) {
            None => self.insert(q),
            Some((_, d)) if d > threshold => self.insert(q),
            Some((k, _)) => self.absorb(k, q),
        }
    }

    /// Streams one query into the set.
    pub fn observe(&mut self, q: &[T]) -> Result<(), ClusterError> {
        self.check_width(q)?;
        match self.growth_threshold {
            Some(thr) => self.step(q, thr),
            None => {
                self.step(q, T::infinity());
                self.warmup.push(q.to_vec());
                if self.warmup.len() >= WARMUP_QUERIES {
                    self.finish_warmup();
                }
            }
        }
        Ok(())
    }

    /// Fixes the adaptive threshold from whatever has been buffered and
    /// replays the buffer. No-op once a threshold is set.
    pub fn finish_warmup(&mut self) {
        if self.growth_threshold.is_some() {
            return;
        }
        let buffered = std::mem::take(&mut self.warmup);
        let mut dists = Vec::with_capacity(buffered.len() * buffered.len() / 2);
        for i in 0..buffered.len() {
            for j in i + 1..buffered.len() {
                dists.push(self.distance(&buffered[i], &buffered[j]));
            }
        }
        let two = T::one() + T::one();
        let thr = median(&dists)
            .map(|m| m * two)
            .filter(|t| *t > T::zero())
            .unwrap_or_else(T::infinity);
        *self = ClusterSet::adaptive(self.width);
        self.growth_threshold = Some(thr);
        for q in &buffered {
            self.step(q, thr);
        }
    }

    /// Mean squared distance to the nearest representative.
    pub fn quantization_error(&self, stream: &[Vec<T>]) -> Result<T, ClusterError> {
        if self.is_empty() {
            return Err(ClusterError::EmptyClusterSet);
        }
        let total: T = stream
            .iter()
            .map(|q| {
                let (_, d) = self.nearest(q).expect("non-empty");
                d * d
            })
            .sum();
        Ok(total / T::from_usize_lossy(stream.len().max(1)))
    }

    /// Drops cluster `k`.
    fn remove(&mut self, k: usize) {
        self.representatives.remove(k);
        self.slot_counts.remove(k);
        self.counts.remove(k);
    }
}

#[derive(Serialize, Deserialize)]
struct ClusterSetRepr<T> {
    width: usize,
    representatives: Vec<Vec<Option<T>>>,
    slot_counts: Vec<Vec<u64>>,
    counts: Vec<u64>,
    growth_threshold: Option<T>,
    slot_mean: Vec<Option<T>>,
    slot_seen: Vec<u64>,
}

fn to_opt<T: Scalar>(v: &[T]) -> Vec<Option<T>> {
    v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }).collect()
}

fn from_opt<T: Scalar>(v: Vec<Option<T>>) -> Vec<T> {
    v.into_iter().map(|x| x.unwrap_or_else(T::nan)).collect()
}

impl<T: Scalar> Serialize for ClusterSet<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ClusterSetRepr {
            width: self.width,
            representatives: self.representatives.iter().map(|r| to_opt(r)).collect(),
            slot_counts: self.slot_counts.clone(),
            counts: self.counts.clone(),
            growth_threshold: self.growth_threshold.filter(|t| t.is_finite()),
            slot_mean: to_opt(&self.slot_mean),
            slot_seen: self.slot_seen.clone(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for ClusterSet<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = ClusterSetRepr::<T>::deserialize(d)?;
        let k = r.representatives.len();
        if r.slot_counts.len() != k
            || r.counts.len() != k
            || r.slot_mean.len() != r.width
            || r.slot_seen.len() != r.width
            || r.representatives.iter().any(|w| w.len() != r.width)
        {
            return Err(D::Error::custom("inconsistent cluster set dimensions"));
        }
        Ok(ClusterSet {
            width: r.width,
            representatives: r.representatives.into_iter().map(from_opt).collect(),
            slot_counts: r.slot_counts,
            counts: r.counts,
            growth_threshold: Some(r.growth_threshold.unwrap_or_else(T::infinity)),
            slot_mean: from_opt(r.slot_mean),
            slot_seen: r.slot_seen,
            warmup: Vec::new(),
        })
    }
}

/// Representatives plus one model per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClusterEnsemble<T: Scalar = f64> {
    pub clusters: ClusterSet<T>,
    pub local_models: Vec<GbdtModel<T>>,
    /// 5-fold cross-validated MSE of each local model.
    pub cv_mse: Vec<T>,
    /// Training rows per cluster.
    pub sizes: Vec<usize>,
}

/// Cluster index of every row.
pub fn partition<T: Scalar>(cs: &ClusterSet<T>, x: &FeatureMatrix<T>) -> Result<Vec<usize>, ClusterError> {
    (0..x.rows()).map(|i| cs.assign(x.row(i))).collect()
}

/// Cross-validated MSE with `folds` interleaved folds. Folds whose training
/// part is too small are skipped; if all are, the in-sample MSE is returned.
pub fn cv_mse<T: Scalar>(
    x: &FeatureMatrix<T>,
    y: &[T],
    cfg: &GbdtConfig,
    folds: usize,
) -> Result<T, ClusterError> {
    let n = y.len();
    let folds = folds.min(n).max(1);
    let mut sq = T::zero();
    let mut scored = 0usize;
    if folds >= 2 {
        for f in 0..folds {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % folds == f);
            if train.len() < 2 * cfg.min_samples_leaf || test.is_empty() {
                continue;
            }
            let xt = sub_matrix(x, &train);
            let yt: Vec<T> = train.iter().map(|&i| y[i]).collect();
            let model = fit(&xt, &yt, cfg, Loss::Squared)?;
            for &i in &test {
                let e = model.predict_unchecked(x.row(i)) - y[i];
                sq = sq + e * e;
                scored += 1;
            }
        }
    }
    if scored == 0 {
        let model = fit(x, y, cfg, Loss::Squared)?;
        for i in 0..n {
            let e = model.predict_unchecked(x.row(i)) - y[i];
            sq = sq + e * e;
        }
        scored = n;
    }
    Ok(sq / T::from_usize_lossy(scored))
}

fn sub_matrix<T: Scalar>(x: &FeatureMatrix<T>, rows: &[usize]) -> FeatureMatrix<T> {
    let mut data = Vec::with_capacity(rows.len() * x.cols());
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    FeatureMatrix::new(rows.len(), x.cols(), data)
}

/// Partitions the pairs by nearest representative and fits one model per
/// cluster. Clusters with fewer than `min_samples_leaf` rows are merged into
/// their nearest neighbour first.
pub fn fit_local_models<T: Scalar>(
    cs: &ClusterSet<T>,
    x: &FeatureMatrix<T>,
    y: &[T],
    cfg: &GbdtConfig,
) -> Result<ClusterEnsemble<T>, ClusterError> {
    let mut clusters = cs.clone();
    clusters.finish_warmup();
    if clusters.is_empty() {
        return Err(ClusterError::EmptyClusterSet);
    }
    let min_rows = cfg.min_samples_leaf.max(1);
    let assignment = loop {
        let assignment = partition(&clusters, x)?;
        let mut sizes = vec![0usize; clusters.len()];
        for &k in &assignment {
            sizes[k] += 1;
        }
        let smallest = (0..sizes.len())
            .filter(|&k| sizes[k] < min_rows)
            .min_by_key(|&k| (sizes[k], k));
        match smallest {
            Some(k) if clusters.len() > 1 => clusters.remove(k),
            _ => break assignment,
        }
    };
    let k_total = clusters.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k_total];
    for (i, &k) in assignment.iter().enumerate() {
        members[k].push(i);
    }
    let mut local_models = Vec::with_capacity(k_total);
    let mut errors = Vec::with_capacity(k_total);
    for rows in &members {
        let xk = sub_matrix(x, rows);
        let yk: Vec<T> = rows.iter().map(|&i| y[i]).collect();
        local_models.push(fit(&xk, &yk, cfg, Loss::Squared)?);
        errors.push(cv_mse(&xk, &yk, cfg, CV_FOLDS)?);
    }
    Ok(ClusterEnsemble {
        clusters,
        local_models,
        cv_mse: errors,
        sizes: members.iter().map(Vec::len).collect(),
    })
}

impl<T: Scalar> ClusterEnsemble<T> {
    /// Indicator vector: 1 for the assigned cluster, 0 elsewhere.
    pub fn indicators(&self, q: &[T]) -> Result<Vec<u8>, ClusterError> {
        let k = self.clusters.assign(q)?;
        Ok((0..self.local_models.len()).map(|i| u8::from(i == k)).collect())
    }

    /// `Σ_k I_k f_k(q)`: only the nearest cluster's model answers.
    pub fn predict(&self, q: &[T]) -> Result<T, ClusterError> {
        let k = self.clusters.assign(q)?;
        Ok(self.local_models[k].predict(q)?)
    }

    /// Size-weighted mean of the per-cluster CV errors.
    pub fn weighted_cv_mse(&self) -> T {
        let total: usize = self.sizes.iter().sum();
        let acc: T = self
            .cv_mse
            .iter()
            .zip(&self.sizes)
            .map(|(e, n)| *e * T::from_usize_lossy(*n))
            .sum();
        acc / T::from_usize_lossy(total.max(1))
    }
}

/// See [`ClusterEnsemble::predict`].
pub fn ensemble_predict<T: Scalar>(e: &ClusterEnsemble<T>, q: &[T]) -> Result<T, ClusterError> {
    e.predict(q)
}
