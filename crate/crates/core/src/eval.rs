//! Error metrics and the train/test evaluation protocol.
//!
//! The workload is shuffled with a seeded ChaCha8 Fisher-Yates shuffle; the
//! first `round(split * n)` queries train, the rest are held out. Models
//! are trained through [`engine::train_catalogue`] and queried through
//! [`Engine`], the same path the service uses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalogue::{disk_size, CatalogueError};
use crate::engine::{self, Engine, EngineError, TrainOptions};
use crate::scalar::median;
use crate::schema::{DatasetSchema, QueryLogRecord};
use crate::vectorize::group_vector;
use crate::workload::{self, default_afs, WorkloadError, WorkloadSpec};

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum MetricError {
    #[error("true answer is zero")]
    ZeroTruth,
    #[error("mean response is zero")]
    ZeroMean,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("workload has too few queries: {0}")]
    InsufficientWorkload(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Catalogue(#[from] CatalogueError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `|y - yhat| / |y|`.
pub fn relative_error(y: f64, yhat: f64) -> Result<f64, MetricError> {
    if y == 0.0 {
        return Err(MetricError::ZeroTruth);
    }
    Ok((y - yhat).abs() / y.abs())
}

/// `|y - yhat| / |ybar|`.
pub fn normalized_error(y: f64, yhat: f64, ybar: f64) -> Result<f64, MetricError> {
    if ybar == 0.0 {
        return Err(MetricError::ZeroMean);
    }
    Ok((y - yhat).abs() / ybar.abs())
}

/// Median of `|y - yhat|`.
pub fn median_absolute_error(y: &[f64], yhat: &[f64]) -> Option<f64> {
    let abs: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).collect();
    median(&abs)
}

/// Fraction of `y` inside `[low, high]`.
pub fn coverage(y: &[f64], intervals: &[(f64, f64)]) -> Option<f64> {
    if y.is_empty() {
        return None;
    }
    let inside = y
        .iter()
        .zip(intervals)
        .filter(|(v, (lo, hi))| lo <= *v && *v <= hi)
        .count();
    Some(inside as f64 / y.len() as f64)
}

/// Seeded split into `(train, test)` index lists.
pub fn split_indices(n: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * split).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub split: f64,
    pub seed: u64,
    pub train: TrainOptions,
    /// Training-set sizes for the error-vs-queries curve.
    pub curve: Vec<usize>,
    pub latency_samples: usize,
    /// Where to write the catalogue; a temporary directory when `None`.
    pub catalogue_dir: Option<PathBuf>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            split: 0.7,
            seed: 0,
            train: TrainOptions::default(),
            curve: Vec::new(),
            latency_samples: 10_000,
            catalogue_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfReport {
    pub af: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Over held-out answers with a non-zero truth.
    pub median_relative_error: Option<f64>,
    pub zero_truth: usize,
    pub median_normalized_error: Option<f64>,
    pub median_absolute_error: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_interval_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub af: String,
    pub n_train: usize,
    pub median_relative_error: Option<f64>,
}

/// Microseconds. `inference` is the model call on a prepared meta-vector;
/// `end_to_end` adds parsing and vectorization of the SQL text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub inference_mean_us: f64,
    pub inference_p95_us: f64,
    pub end_to_end_mean_us: f64,
    pub end_to_end_p95_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub afs: Vec<AfReport>,
    pub curve: Vec<CurvePoint>,
    pub latency: Option<LatencyReport>,
    pub catalogue_bytes: u64,
}

impl EvalReport {
    pub fn af(&self, key: &str) -> Option<&AfReport> {
        self.afs.iter().find(|a| a.af == key)
    }

    pub fn curve_for(&self, key: &str) -> Vec<&CurvePoint> {
        self.curve.iter().filter(|c| c.af == key).collect()
    }

    pub fn to_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
        }
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>7} {:>7} {:>10} {:>10} {:>14} {:>9}",
            "af", "train", "test", "med_rel", "med_norm", "med_abs", "coverage"
        );
        for a in &self.afs {
            let _ = writeln!(
                s,
                "{:<14} {:>7} {:>7} {:>10} {:>10} {:>14} {:>9}",
                a.af,
                a.n_train,
                a.n_test,
                cell(a.median_relative_error),
                cell(a.median_normalized_error),
                a.median_absolute_error.map_or_else(|| "-".into(), |x| format!("{x:.4e}")),
                cell(a.coverage)
            );
        }
        if !self.curve.is_empty() {
            let _ = writeln!(s, "\nerror vs training queries");
            for c in &self.curve {
                let _ = writeln!(s, "{:<14} {:>7} {:>10}", c.af, c.n_train, cell(c.median_relative_error));
            }
        }
        if let Some(l) = &self.latency {
            let _ = writeln!(
                s,
                "\nlatency over {} predictions (us): inference mean {:.1} p95 {:.1}; end-to-end mean {:.1} p95 {:.1}",
                l.samples, l.inference_mean_us, l.inference_p95_us, l.end_to_end_mean_us, l.end_to_end_p95_us
            );
        }
        let _ = writeln!(s, "catalogue bytes: {}", self.catalogue_bytes);
        s
    }
}

/// Held-out (truth, prediction, interval) triples per AF key, one per query
/// or per group.
type Predictions = BTreeMap<String, Vec<(f64, f64, Option<(f64, f64)>)>>;

fn predict_records(engine: &Engine, records: &[&QueryLogRecord]) -> Result<Predictions, EvalError> {
    let cat = engine.catalogue();
    let mut out: Predictions = BTreeMap::new();
    for r in records {
        let q = engine.parse(&r.sql)?;
        let base = engine.vectorize(&q)?;
        let mut score = |meta: &[f64], answers: &BTreeMap<String, f64>| -> Result<(), EvalError> {
            for (key, &y) in answers {
                if cat.entry(key).is_none() {
                    continue;
                }
                let e = engine.predict_meta(key, meta)?;
                out.entry(key.clone())
                    .or_default()
                    .push((y, e.estimate, e.interval.map(|iv| (iv.low, iv.high))));
            }
            Ok(())
        };
        score(base.as_raw(), &r.answers)?;
        for g in r.groups.iter().flatten() {
            let meta = group_vector(&base, &q.group_by, &g.key, &cat.schema, &cat.encoder)
                .map_err(EngineError::from)?;
            score(meta.as_raw(), &g.answers)?;
        }
    }
    Ok(out)
}

fn median_relative(rows: &[(f64, f64, Option<(f64, f64)>)]) -> (Option<f64>, usize) {
    let mut errs = Vec::with_capacity(rows.len());
    let mut zero = 0;
    for &(y, yhat, _) in rows {
        match relative_error(y, yhat) {
            Ok(e) => errs.push(e),
            Err(_) => zero += 1,
        }
    }
    (median(&errs), zero)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn measure_latency(engine: &Engine, records: &[&QueryLogRecord], samples: usize) -> Result<LatencyReport, EvalError> {
    let mut prepared = Vec::new();
    for r in records {
        let q = engine.parse(&r.sql)?;
        let meta = engine.vectorize(&q)?;
        for k in r.answers.keys() {
            if engine.catalogue().entry(k).is_some() {
                prepared.push((k.clone(), meta.clone()));
            }
        }
    }
    if prepared.is_empty() {
        return Err(EvalError::InsufficientWorkload("no held-out queries to time".into()));
    }
    let mut inference = Vec::with_capacity(samples);
    for i in 0..samples {
        let (k, meta) = &prepared[i % prepared.len()];
        let t = Instant::now();
        let e = engine.predict_meta(k, meta.as_raw())?;
        inference.push(t.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(e);
    }
    let mut end_to_end = Vec::with_capacity(samples);
    for i in 0..samples {
        let r = records[i % records.len()];
        let t = Instant::now();
        let e = engine.predict_sql(&r.sql)?;
        end_to_end.push(t.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(e);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (im, em) = (mean(&inference), mean(&end_to_end));
    inference.sort_by(f64::total_cmp);
    end_to_end.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        samples,
        inference_mean_us: im,
        inference_p95_us: percentile(&inference, 0.95),
        end_to_end_mean_us: em,
        end_to_end_p95_us: percentile(&end_to_end, 0.95),
    })
}

/// Trains on the seeded 70% and measures everything on the rest.
pub fn run_protocol(
    records: &[QueryLogRecord],
    schema: &DatasetSchema,
    opts: &ProtocolOptions,
) -> Result<EvalReport, EvalError> {
    if records.len() < 10 {
        return Err(EvalError::InsufficientWorkload(format!("{} queries", records.len())));
    }
    let (train_idx, test_idx) = split_indices(records.len(), opts.split, opts.seed);
    if test_idx.is_empty() {
        return Err(EvalError::InsufficientWorkload("empty test split".into()));
    }
    let numbered = |idx: &[usize]| -> Vec<(usize, Result<QueryLogRecord, String>)> {
        idx.iter().map(|&i| (i + 1, Ok(records[i].clone()))).collect()
    };
    let test: Vec<&QueryLogRecord> = test_idx.iter().map(|&i| &records[i]).collect();

    let prep = engine::prepare_log(&numbered(&train_idx), schema, opts.train.cardinality_threshold)?;
    let cat = engine::train_catalogue(&prep, &opts.train)?;

    let (dir, _guard) = match &opts.catalogue_dir {
        Some(d) => (d.clone(), None),
        None => {
            static NEXT: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
            let n = NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            let d = std::env::temp_dir().join(format!("mlaqp-eval-{}-{n}", std::process::id()));
            (d.clone(), Some(RemoveOnDrop(d)))
        }
    };
    cat.save(&dir)?;
    let catalogue_bytes = disk_size(&dir)?;
    let engine = Engine::load(&dir)?;

    let preds = predict_records(&engine, &test)?;
    let mut afs = Vec::new();
    for (key, rows) in &preds {
        let n_train = prep
            .sets
            .iter()
            .find(|(af, _)| af.key() == *key)
            .map_or(0, |(_, s)| s.len());
        let (med_rel, zero_truth) = median_relative(rows);
        let ys: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let yh: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
        let norm: Vec<f64> = rows
            .iter()
            .filter_map(|&(y, yhat, _)| normalized_error(y, yhat, ybar).ok())
            .collect();
        let ivs: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.2).collect();
        let (cov, width) = if ivs.len() == rows.len() && !ivs.is_empty() {
            let w = ivs.iter().map(|(a, b)| b - a).sum::<f64>() / ivs.len() as f64;
            (coverage(&ys, &ivs), Some(w))
        } else {
            (None, None)
        };
        afs.push(AfReport {
            af: key.clone(),
            n_train,
            n_test: rows.len(),
            median_relative_error: med_rel,
            zero_truth,
            median_normalized_error: median(&norm),
            median_absolute_error: median_absolute_error(&ys, &yh),
            coverage: cov,
            mean_interval_width: width,
        });
    }

    let mut curve = Vec::new();
    for &n in &opts.curve {
        let n = n.min(train_idx.len());
        let prep_n = engine::prepare_log(&numbered(&train_idx[..n]), schema, opts.train.cardinality_threshold)?;
        let train_n = TrainOptions {
            quantile: None,
            ..opts.train.clone()
        };
        let engine_n = Engine::new(engine::train_catalogue(&prep_n, &train_n)?);
        for (key, rows) in predict_records(&engine_n, &test)? {
            curve.push(CurvePoint {
                af: key,
                n_train: n,
                median_relative_error: median_relative(&rows).0,
            });
        }
    }

    let latency = if opts.latency_samples > 0 {
        Some(measure_latency(&engine, &test, opts.latency_samples)?)
    } else {
        None
    };
    Ok(EvalReport {
        seed: opts.seed,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        afs,
        curve,
        latency,
        catalogue_bytes,
    })
}

struct RemoveOnDrop(PathBuf);

impl Drop for RemoveOnDrop {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

/// One cell of the synthetic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSetup {
    pub dims: usize,
    pub predicates: usize,
    pub rows: usize,
    pub queries: usize,
    pub selectivity: f64,
    pub seed: u64,
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        SyntheticSetup {
            dims: 10,
            predicates: 2,
            rows: workload::DEFAULT_ROWS,
            queries: 1000,
            selectivity: workload::DEFAULT_SELECTIVITY,
            seed: 0,
        }
    }
}

/// Uniform dataset plus labeled workload for one grid cell.
pub fn synthetic_workload(setup: &SyntheticSetup) -> Result<(DatasetSchema, Vec<QueryLogRecord>), EvalError> {
    let ds = workload::gen_dataset(setup.dims, setup.rows, setup.seed)?;
    let spec = WorkloadSpec {
        n_queries: setup.queries,
        dims: setup.dims,
        predicates: setup.predicates,
        range_size: workload::range_for_selectivity(&ds, setup.predicates, setup.selectivity)?,
        seed: setup.seed.wrapping_add(1),
        afs: default_afs("a1"),
    };
    let queries = workload::gen_queries(&spec, &ds)?;
    Ok((
        ds.schema().clone(),
        queries.iter().map(|q| q.to_record()).collect(),
    ))
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, serde_json::to_vec_pretty(report).map_err(std::io::Error::other)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert!((relative_error(10.0, 9.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(relative_error(3.0, 3.0).unwrap(), 0.0);
        assert_eq!(relative_error(0.0, 1.0), Err(MetricError::ZeroTruth));
        assert_eq!(normalized_error(2.0, 1.0, 9.0).unwrap(), 1.0 / 9.0);
        assert_eq!(normalized_error(1.0, 1.0, 9.0).unwrap(), 0.0);
        assert_eq!(normalized_error(1.0, 2.0, 0.0), Err(MetricError::ZeroMean));
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split_indices(100, 0.7, 42);
        assert_eq!((tr.len(), te.len()), (70, 30));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.7, 42), (tr, te));
    }

    #[test]
    fn coverage_and_mae() {
        assert_eq!(coverage(&[1.0, 5.0], &[(0.0, 2.0), (0.0, 2.0)]), Some(0.5));
        assert_eq!(median_absolute_error(&[1.0, 2.0, 3.0], &[1.0, 0.0, 6.0]), Some(2.0));
    }

    #[test]
    fn p95_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
    }
}
