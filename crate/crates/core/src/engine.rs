//! Training from a query log and prediction against a loaded catalogue.
//! The REPL, the HTTP service and the evaluation harness all go through
//! [`Engine`], so identical queries get bit-identical answers.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalogue::{CatalogueEntry, DriftSnapshot, ModelCatalogue};
use crate::cluster::{fit_local_models, ClusterError, ClusterSet};
use crate::drift::{AnswerEcdf, WorkloadStats};
use crate::gbdt::{fit, GbdtConfig, GbdtError, Loss};
use crate::quantile::{fit_interval, fit_interval_calibrated, IntervalError};
use crate::schema::{
    AggregateSpec, AttributeKind, DatasetSchema, GroupValue, MetaVector, QueryAnswerPair, QueryLogRecord, TrainingSet,
};
use crate::sql::{parse, ParseError, ParsedQuery};
use crate::vectorize::{
    expand_group_by, group_vector, vectorize_spa, CategoricalEncoder, GroupByCatalogue, VectorizeError,
    DEFAULT_CARDINALITY_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Vectorize(#[from] VectorizeError),
    #[error("no model for {af}; known: {}", known.join(", "))]
    UnknownAggregate { af: String, known: Vec<String> },
    #[error("meta-vector width {got} does not match the catalogue width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("log has no usable query-answer pairs")]
    InsufficientWorkload,
    #[error("{bad} of {total} log lines could not be used")]
    TooManyBadLines { bad: usize, total: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A log line that could not be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Reads a JSON-lines query log; blank lines are skipped.
pub fn read_log(path: &Path) -> Result<Vec<(usize, Result<QueryLogRecord, String>)>, EngineError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, serde_json::from_str(&line).map_err(|e| e.to_string())));
    }
    Ok(out)
}

/// Training pairs extracted from a log.
#[derive(Debug, Clone)]
pub struct PreparedLog {
    pub schema: DatasetSchema,
    pub encoder: CategoricalEncoder,
    pub groupby: GroupByCatalogue,
    pub sets: BTreeMap<AggregateSpec, TrainingSet>,
    /// Every distinct vectorized query (one per group for GROUP-BY lines).
    pub vectors: Vec<MetaVector<f64>>,
    pub errors: Vec<LineError>,
    pub lines: usize,
}

fn answer_pairs(
    meta: &MetaVector<f64>,
    answers: &BTreeMap<String, f64>,
    sets: &mut BTreeMap<AggregateSpec, TrainingSet>,
    schema: &DatasetSchema,
) -> Result<(), String> {
    for (key, y) in answers {
        let af = AggregateSpec::parse_key(key).map_err(|e| e.to_string())?;
        af.validate(schema).map_err(|e| e.to_string())?;
        if !y.is_finite() {
            return Err(format!("answer for {key} is not finite"));
        }
        sets.entry(af.clone())
            .or_insert_with(|| TrainingSet::new(af.clone()))
            .push(QueryAnswerPair {
                meta: meta.clone(),
                af,
                answer: *y,
            })
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Parses and vectorizes every record. Categorical values seen in the log
/// form the dummy dictionaries.
pub fn prepare_log(
    records: &[(usize, Result<QueryLogRecord, String>)],
    schema: &DatasetSchema,
    cardinality_threshold: usize,
) -> Result<PreparedLog, EngineError> {
    let mut errors = Vec::new();
    let mut parsed: Vec<(usize, &QueryLogRecord, ParsedQuery)> = Vec::new();
    for (line, rec) in records {
        match rec {
            Err(msg) => errors.push(LineError {
                line: *line,
                message: msg.clone(),
            }),
            Ok(r) => match parse(&r.sql, schema) {
                Ok(q) => parsed.push((*line, r, q)),
                Err(e) => errors.push(LineError {
                    line: *line,
                    message: e.to_string(),
                }),
            },
        }
    }

    let mut dictionaries: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (_, r, q) in &parsed {
        for (attr, v) in &q.categorical_equalities {
            dictionaries.entry(attr.clone()).or_default().insert(v.clone());
        }
        for g in r.groups.iter().flatten() {
            for (attr, v) in q.group_by.iter().zip(&g.key) {
                if schema.attribute(attr).map(|a| a.kind) == Some(AttributeKind::Categorical) {
                    dictionaries.entry(attr.clone()).or_default().insert(v.to_string());
                }
            }
        }
    }
    let dictionaries = dictionaries
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect();
    let encoder = CategoricalEncoder::new(schema, &dictionaries, cardinality_threshold);

    let mut groupby = GroupByCatalogue::default();
    let mut sets = BTreeMap::new();
    let mut vectors = Vec::new();
    for (line, r, q) in &parsed {
        let result = (|| -> Result<(), String> {
            let base = vectorize_spa(&q.without_group_by(), schema, &encoder).map_err(|e| e.to_string())?;
            if !r.answers.is_empty() {
                answer_pairs(&base, &r.answers, &mut sets, schema)?;
                vectors.push(base.clone());
            }
            if !q.group_by.is_empty() {
                for g in r.groups.iter().flatten() {
                    if g.key.len() != q.group_by.len() {
                        return Err("group key width differs from GROUP BY".into());
                    }
                    groupby.observe(&q.group_by, g.key.clone());
                    let meta = group_vector(&base, &q.group_by, &g.key, schema, &encoder).map_err(|e| e.to_string())?;
                    answer_pairs(&meta, &g.answers, &mut sets, schema)?;
                    vectors.push(meta);
                }
            }
            Ok(())
        })();
        if let Err(message) = result {
            errors.push(LineError { line: *line, message });
        }
    }
    errors.sort_by_key(|e| e.line);
    Ok(PreparedLog {
        schema: schema.clone(),
        encoder,
        groupby,
        sets,
        vectors,
        errors,
        lines: records.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub point: GbdtConfig,
    /// `None` skips interval models.
    pub quantile: Option<GbdtConfig>,
    /// Miscoverage of the prediction interval; 0.1 gives 90% intervals.
    pub miscoverage: f64,
    /// Fraction of pairs held out to widen the interval; `None` uses the raw quantile models.
    pub interval_calibration: Option<f64>,
    /// `Some` also fits a cluster ensemble per aggregate.
    pub ensemble: Option<EnsembleOptions>,
    pub cardinality_threshold: usize,
    /// Runs abort when more than this fraction of lines is unusable.
    pub max_bad_fraction: f64,
    pub min_pairs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    /// `None` picks the threshold from the first queries.
    pub growth_threshold: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            point: GbdtConfig::point_default(),
            quantile: Some(GbdtConfig::quantile_default()),
            miscoverage: 0.1,
            interval_calibration: Some(0.2),
            ensemble: None,
            cardinality_threshold: DEFAULT_CARDINALITY_THRESHOLD,
            max_bad_fraction: 0.1,
            min_pairs: 10,
        }
    }
}

/// Models for one training set.
pub fn train_entry(set: &TrainingSet, opts: &TrainOptions) -> Result<CatalogueEntry, EngineError> {
    let (x, y) = set.to_matrix::<f64>();
    let point = fit(&x, &y, &opts.point, Loss::Squared)?;
    let interval = match &opts.quantile {
        Some(cfg) => Some(match opts.interval_calibration {
            Some(frac) => fit_interval_calibrated(&x, &y, opts.miscoverage, cfg, frac)?,
            None => fit_interval(&x, &y, opts.miscoverage, cfg)?,
        }),
        None => None,
    };
    let ensemble = match &opts.ensemble {
        Some(eo) => {
            let mut cs = match eo.growth_threshold {
                Some(t) => ClusterSet::with_threshold(x.cols(), t)?,
                None => ClusterSet::adaptive(x.cols()),
            };
            for i in 0..x.rows() {
                cs.observe(x.row(i))?;
            }
            cs.finish_warmup();
            Some(fit_local_models(&cs, &x, &y, &opts.point)?)
        }
        None => None,
    };
    Ok(CatalogueEntry {
        point,
        interval,
        ensemble,
    })
}

/// Trains every aggregate of a prepared log into a catalogue.
pub fn train_catalogue(prep: &PreparedLog, opts: &TrainOptions) -> Result<ModelCatalogue, EngineError> {
    let bad = prep.errors.len();
    if prep.lines > 0 && bad as f64 > opts.max_bad_fraction * prep.lines as f64 {
        return Err(EngineError::TooManyBadLines { bad, total: prep.lines });
    }
    let usable: Vec<&TrainingSet> = prep.sets.values().filter(|s| s.len() >= opts.min_pairs).collect();
    if usable.is_empty() {
        return Err(EngineError::InsufficientWorkload);
    }
    let mut cat = ModelCatalogue::new(prep.schema.clone(), prep.encoder.clone());
    cat.groupby = prep.groupby.clone();
    let mut answers = BTreeMap::new();
    for (af, set) in &prep.sets {
        if set.len() < opts.min_pairs {
            warn!("skipping {}: {} pairs is below the minimum {}", af.key(), set.len(), opts.min_pairs);
            continue;
        }
        info!("training {} on {} pairs", af.key(), set.len());
        cat.entries.insert(af.key(), train_entry(set, opts)?);
        let ys: Vec<f64> = set.pairs().iter().map(|p| p.answer).collect();
        if let Ok(e) = AnswerEcdf::new(ys) {
            answers.insert(af.key(), e);
        }
    }
    let width = prep.encoder.width();
    let workload = match WorkloadStats::fit(prep.vectors.iter().map(|v| v.as_raw()), width) {
        Ok(s) => Some(s),
        Err(e) => {
            warn!("no workload statistics: {e}");
            None
        }
    };
    cat.drift = Some(DriftSnapshot { answers, workload });
    Ok(cat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalOut {
    pub low: f64,
    pub high: f64,
    pub nominal_coverage: f64,
}

/// Prediction for one aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub af: String,
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval: Option<IntervalOut>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub key: Vec<GroupValue>,
    pub estimates: Vec<Estimate>,
}

/// Answer to one SQL query. For GROUP-BY queries `estimates` answers the
/// query with the grouping dropped and `groups` holds one row per cached
/// group tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEstimate {
    pub estimates: Vec<Estimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupEstimate>>,
}

/// Read-only predictor over a loaded catalogue.
#[derive(Debug, Clone)]
pub struct Engine {
    catalogue: ModelCatalogue,
}

impl Engine {
    pub fn new(catalogue: ModelCatalogue) -> Self {
        Engine { catalogue }
    }

    pub fn load(dir: &Path) -> Result<Self, crate::catalogue::CatalogueError> {
        Ok(Engine::new(ModelCatalogue::load(dir)?))
    }

    pub fn catalogue(&self) -> &ModelCatalogue {
        &self.catalogue
    }

    pub fn width(&self) -> usize {
        self.catalogue.feature_width()
    }

    pub fn parse(&self, sql: &str) -> Result<ParsedQuery, EngineError> {
        Ok(parse(sql, &self.catalogue.schema)?)
    }

    /// Meta-vector of the query with any GROUP BY dropped.
    pub fn vectorize(&self, q: &ParsedQuery) -> Result<MetaVector<f64>, EngineError> {
        Ok(vectorize_spa(
            &q.without_group_by(),
            &self.catalogue.schema,
            &self.catalogue.encoder,
        )?)
    }

    /// Per-group meta-vectors of a GROUP-BY query.
    pub fn expand(&self, q: &ParsedQuery) -> Result<Vec<(MetaVector<f64>, Vec<GroupValue>)>, EngineError> {
        Ok(expand_group_by(
            q,
            &self.catalogue.groupby,
            &self.catalogue.schema,
            &self.catalogue.encoder,
        )?)
    }

    fn entry(&self, key: &str) -> Result<&CatalogueEntry, EngineError> {
        self.catalogue
            .entry(key)
            .ok_or_else(|| EngineError::UnknownAggregate {
                af: key.to_string(),
                known: self.catalogue.keys(),
            })
    }

    /// Point estimate (ensemble if one was trained) and interval.
    pub fn predict_meta(&self, af_key: &str, meta: &[f64]) -> Result<Estimate, EngineError> {
        let entry = self.entry(af_key)?;
        if meta.len() != self.width() {
            return Err(EngineError::WidthMismatch {
                expected: self.width(),
                got: meta.len(),
            });
        }
        let (estimate, model_id) = match &entry.ensemble {
            Some(e) => {
                let k = e.clusters.assign(meta)?;
                (e.local_models[k].predict(meta)?, format!("{af_key}/ensemble/{k}"))
            }
            None => (entry.point.predict(meta)?, format!("{af_key}/point")),
        };
        let interval = match &entry.interval {
            Some(iv) => {
                let p = iv.interval(meta)?;
                Some(IntervalOut {
                    low: p.low,
                    high: p.high,
                    nominal_coverage: p.nominal_coverage,
                })
            }
            None => None,
        };
        Ok(Estimate {
            af: af_key.to_string(),
            estimate,
            interval,
            model_id,
        })
    }

    /// Every aggregate of the query, and every cached group for GROUP BY.
    pub fn predict_query(&self, q: &ParsedQuery) -> Result<QueryEstimate, EngineError> {
        let keys: Vec<String> = q.aggregates.iter().map(AggregateSpec::key).collect();
        for k in &keys {
            self.entry(k)?;
        }
        let base = self.vectorize(q)?;
        let estimates = keys
            .iter()
            .map(|k| self.predict_meta(k, base.as_raw()))
            .collect::<Result<_, _>>()?;
        let groups = if q.group_by.is_empty() {
            None
        } else {
            let mut rows = Vec::new();
            for (meta, key) in self.expand(q)? {
                let estimates = keys
                    .iter()
                    .map(|k| self.predict_meta(k, meta.as_raw()))
                    .collect::<Result<_, _>>()?;
                rows.push(GroupEstimate { key, estimates });
            }
            Some(rows)
        };
        Ok(QueryEstimate { estimates, groups })
    }

    pub fn predict_sql(&self, sql: &str) -> Result<QueryEstimate, EngineError> {
        let q = self.parse(sql)?;
        self.predict_query(&q)
    }

    /// Meta-vector from a sparse `slot -> value` map.
    pub fn sparse_meta(&self, slots: &BTreeMap<usize, f64>) -> Result<MetaVector<f64>, EngineError> {
        let width = self.width();
        let mut meta = MetaVector::missing(width);
        for (&slot, &v) in slots {
            if slot >= width {
                return Err(EngineError::WidthMismatch {
                    expected: width,
                    got: slot + 1,
                });
            }
            meta.set(slot, v);
        }
        Ok(meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(sql: &str, answers: &[(&str, f64)]) -> (usize, Result<QueryLogRecord, String>) {
        (
            0,
            Ok(QueryLogRecord {
                sql: sql.into(),
                answers: answers.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                groups: None,
            }),
        )
    }

    fn quick_opts() -> TrainOptions {
        let mut point = GbdtConfig::point_default();
        point.rounds = 50;
        let mut q = GbdtConfig::quantile_default();
        q.rounds = 20;
        TrainOptions {
            point,
            quantile: Some(q),
            min_pairs: 5,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn two_afs_two_entries() {
        let schema = DatasetSchema::numeric("t", 2).unwrap();
        let records: Vec<_> = (0..20)
            .map(|i| {
                let lb = i as f64;
                record(
                    &format!("SELECT COUNT(*), AVG(a2) FROM t WHERE a1 >= {lb} AND a1 <= {}", lb + 5.0),
                    &[("COUNT(*)", 10.0 + lb), ("AVG(a2)", 2.0 * lb)],
                )
            })
            .collect();
        let prep = prepare_log(&records, &schema, 1000).unwrap();
        let cat = train_catalogue(&prep, &quick_opts()).unwrap();
        assert_eq!(cat.keys(), vec!["AVG(a2)".to_string(), "COUNT(*)".to_string()]);
        let engine = Engine::new(cat);
        let est = engine
            .predict_sql("SELECT COUNT(*) FROM t WHERE a1 >= 3 AND a1 <= 8")
            .unwrap();
        assert_eq!(est.estimates.len(), 1);
        assert!(est.estimates[0].interval.is_some());
        let err = engine.predict_sql("SELECT SUM(a1) FROM t").unwrap_err();
        assert!(matches!(err, EngineError::UnknownAggregate { .. }));
    }

    #[test]
    fn empty_log_is_insufficient() {
        let schema = DatasetSchema::numeric("t", 2).unwrap();
        let prep = prepare_log(&[], &schema, 1000).unwrap();
        assert!(matches!(
            train_catalogue(&prep, &quick_opts()),
            Err(EngineError::InsufficientWorkload)
        ));
    }

    #[test]
    fn bad_lines_abort_past_ten_percent() {
        let schema = DatasetSchema::numeric("t", 1).unwrap();
        let mut records: Vec<_> = (0..8)
            .map(|i| record(&format!("SELECT COUNT(*) FROM t WHERE a1 >= {i}"), &[("COUNT(*)", i as f64)]))
            .collect();
        records.push(record("SELEKT", &[]));
        records.push((10, Err("bad json".into())));
        let prep = prepare_log(&records, &schema, 1000).unwrap();
        assert_eq!(prep.errors.len(), 2);
        let opts = TrainOptions {
            min_pairs: 2,
            ..quick_opts()
        };
        assert!(matches!(
            train_catalogue(&prep, &opts),
            Err(EngineError::TooManyBadLines { bad: 2, total: 10 })
        ));
    }
}
