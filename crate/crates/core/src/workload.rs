//! Synthetic datasets and query workloads.
//!
//! Queries follow a fixed recipe: pick `p` distinct columns, draw a center
//! per column, and restrict each column to `[center - r/2, center + r/2]`
//! (shifted back inside the column's range when it sticks out). Every
//! query is executed exactly to label it.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{execute_aggregate, Column, ColumnarDataset, ExecError, ExecOutput};
use crate::schema::{
    AggregateFunction, AggregateSpec, DatasetSchema, MetaVector, Predicate, QueryAnswerPair, QueryLogRecord,
    SchemaError, TrainingSet,
};
use crate::sql::ParsedQuery;
use crate::vectorize::{vectorize_spa, CategoricalEncoder, VectorizeError};

pub const DOMAIN_LOW: f64 = 1e-8;
pub const DOMAIN_HIGH: f64 = 1e8;
pub const DEFAULT_ROWS: usize = 100_000;
pub const DEFAULT_BINS: usize = 100;
/// Expected fraction of rows selected by a generated query.
pub const DEFAULT_SELECTIVITY: f64 = 0.01;
pub const MAX_RESAMPLES: usize = 20;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("range size is zero or every resample selected no rows")]
    DegenerateRange,
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Vectorize(#[from] VectorizeError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_queries: usize,
    pub dims: usize,
    pub predicates: usize,
    pub range_size: f64,
    pub seed: u64,
    pub afs: Vec<AggregateSpec>,
}

impl WorkloadSpec {
    pub fn validate(&self, ds: &ColumnarDataset) -> Result<(), WorkloadError> {
        if self.n_queries == 0 {
            return Err(WorkloadError::InvalidSpec("n_queries must be at least 1".into()));
        }
        if self.predicates == 0 || self.predicates > self.dims {
            return Err(WorkloadError::InvalidSpec(format!(
                "need 1 <= p <= d, got p = {}, d = {}",
                self.predicates, self.dims
            )));
        }
        if self.dims != ds.schema().d() {
            return Err(WorkloadError::InvalidSpec(format!(
                "spec has {} dims, dataset has {}",
                self.dims,
                ds.schema().d()
            )));
        }
        if self.afs.is_empty() {
            return Err(WorkloadError::InvalidSpec("no aggregate functions".into()));
        }
        for af in &self.afs {
            af.validate(ds.schema())?;
        }
        if !(self.range_size > 0.0) || !self.range_size.is_finite() {
            return Err(WorkloadError::DegenerateRange);
        }
        Ok(())
    }
}

/// `COUNT(*)`, `SUM(target)`, `AVG(target)`, `MAX(target)`.
pub fn default_afs(target: &str) -> Vec<AggregateSpec> {
    vec![
        AggregateSpec::count_star(),
        AggregateSpec::new(AggregateFunction::Sum, target),
        AggregateSpec::new(AggregateFunction::Avg, target),
        AggregateSpec::new(AggregateFunction::Max, target),
    ]
}

/// Numeric table `synth` with columns `a1..ad`, i.i.d. uniform on
/// `[1e-8, 1e8]`.
pub fn gen_dataset(d: usize, n_rows: usize, seed: u64) -> Result<ColumnarDataset, WorkloadError> {
    if d == 0 || n_rows == 0 {
        return Err(WorkloadError::InvalidSpec("d and n_rows must be at least 1".into()));
    }
    let schema = DatasetSchema::numeric("synth", d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns = (0..d)
        .map(|_| {
            Column::Numeric(
                (0..n_rows)
                    .map(|_| rng.random_range(DOMAIN_LOW..=DOMAIN_HIGH))
                    .collect(),
            )
        })
        .collect();
    Ok(ColumnarDataset::new(schema, columns)?)
}

fn numeric_bounds(ds: &ColumnarDataset) -> Result<Vec<(f64, f64)>, WorkloadError> {
    ds.columns()
        .iter()
        .zip(ds.schema().attributes())
        .map(|(c, a)| match c {
            Column::Numeric(v) if !v.is_empty() => {
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Ok((lo, hi))
            }
            Column::Numeric(_) => Err(WorkloadError::InvalidSpec("empty dataset".into())),
            Column::Categorical(_) => Err(WorkloadError::InvalidSpec(format!("`{}` is not numeric", a.name))),
        })
        .collect()
}

/// Histogram bin width `(max - min) / n_bins`, averaged over columns.
pub fn derive_range_size(ds: &ColumnarDataset, n_bins: usize) -> Result<f64, WorkloadError> {
    if n_bins == 0 {
        return Err(WorkloadError::InvalidSpec("n_bins must be at least 1".into()));
    }
    let bounds = numeric_bounds(ds)?;
    let mean_width = bounds.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / bounds.len() as f64;
    Ok(mean_width / n_bins as f64)
}

/// Range size giving an expected selectivity of `target` for queries with
/// `p` predicates on uniform columns: `width * target^(1/p)`. This is the
/// bin width of a histogram with `target^(-1/p)` bins.
pub fn range_for_selectivity(ds: &ColumnarDataset, p: usize, target: f64) -> Result<f64, WorkloadError> {
    if !(target > 0.0 && target <= 1.0) || p == 0 {
        return Err(WorkloadError::InvalidSpec(format!("selectivity {target} with p = {p}")));
    }
    let bounds = numeric_bounds(ds)?;
    let mean_width = bounds.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / bounds.len() as f64;
    Ok(mean_width * target.powf(1.0 / p as f64))
}

/// One generated, exactly answered query.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedQuery {
    pub sql: String,
    pub query: ParsedQuery,
    pub meta: MetaVector<f64>,
    pub answers: BTreeMap<AggregateSpec, f64>,
}

impl GeneratedQuery {
    pub fn to_record(&self) -> QueryLogRecord {
        QueryLogRecord {
            sql: self.sql.clone(),
            answers: self.answers.iter().map(|(k, v)| (k.key(), *v)).collect(),
            groups: None,
        }
    }
}

/// Per-AF training sets from generated queries.
pub fn training_sets(queries: &[GeneratedQuery]) -> BTreeMap<AggregateSpec, TrainingSet> {
    let mut out: BTreeMap<AggregateSpec, TrainingSet> = BTreeMap::new();
    for q in queries {
        for (af, y) in &q.answers {
            out.entry(af.clone())
                .or_insert_with(|| TrainingSet::new(af.clone()))
                .push(QueryAnswerPair {
                    meta: q.meta.clone(),
                    af: af.clone(),
                    answer: *y,
                })
                .expect("same AF");
        }
    }
    out
}

/// `SELECT <afs> FROM <table> WHERE a >= lb AND a <= ub AND ...`
pub fn format_sql(table: &str, afs: &[AggregateSpec], predicates: &[Predicate]) -> String {
    let select: Vec<String> = afs.iter().map(AggregateSpec::key).collect();
    let mut sql = format!("SELECT {} FROM {}", select.join(", "), table);
    let mut conds = Vec::new();
    for p in predicates {
        match (p.lb, p.ub) {
            (Some(lb), Some(ub)) if lb == ub => conds.push(format!("{} = {}", p.attribute, lb)),
            (lb, ub) => {
                if let Some(lb) = lb {
                    conds.push(format!("{} >= {}", p.attribute, lb));
                }
                if let Some(ub) = ub {
                    conds.push(format!("{} <= {}", p.attribute, ub));
                }
            }
        }
    }
    if !conds.is_empty() {
        sql.push_str(" WHERE ");
        sql.push_str(&conds.join(" AND "));
    }
    sql
}

/// `[center - r/2, center + r/2]` moved inside `[lo, hi]`.
pub fn clamp_range(center: f64, r: f64, lo: f64, hi: f64) -> (f64, f64) {
    if r >= hi - lo {
        return (lo, hi);
    }
    let mut a = center - r / 2.0;
    let mut b = center + r / 2.0;
    if a < lo {
        a = lo;
        b = lo + r;
    } else if b > hi {
        b = hi;
        a = hi - r;
    }
    (a, b)
}

fn label(
    ds: &ColumnarDataset,
    afs: &[AggregateSpec],
    predicates: Vec<Predicate>,
    enc: &CategoricalEncoder,
) -> Result<Option<GeneratedQuery>, WorkloadError> {
    let schema = ds.schema();
    let query = ParsedQuery {
        table: schema.name.clone(),
        aggregates: afs.to_vec(),
        predicates,
        group_by: Vec::new(),
        categorical_equalities: Vec::new(),
        like_patterns: Vec::new(),
    };
    let ExecOutput::Scalar(values) = execute_aggregate(ds, &query)? else {
        unreachable!("no GROUP BY");
    };
    let mut answers = BTreeMap::new();
    for af in afs {
        match values.value(af) {
            Ok(v) => {
                answers.insert(af.clone(), v);
            }
            Err(ExecError::EmptySelection(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
    }
    let meta = vectorize_spa(&query, schema, enc)?;
    Ok(Some(GeneratedQuery {
        sql: format_sql(&schema.name, afs, &query.predicates),
        query,
        meta,
        answers,
    }))
}

/// Predicates on `cols` (sorted), centers from `center(col, rng)`.
fn predicates_for(
    schema: &DatasetSchema,
    bounds: &[(f64, f64)],
    cols: &[usize],
    r: f64,
    mut center: impl FnMut(usize) -> f64,
) -> Vec<Predicate> {
    cols.iter()
        .map(|&c| {
            let (lo, hi) = bounds[c];
            let (lb, ub) = clamp_range(center(c), r, lo, hi);
            Predicate {
                attribute: schema.attributes()[c].name.clone(),
                lb: Some(lb),
                ub: Some(ub),
            }
        })
        .collect()
}

/// Uniform-center workload. Queries whose selection leaves an AF undefined
/// are redrawn, at most [`MAX_RESAMPLES`] times each.
pub fn gen_queries(spec: &WorkloadSpec, ds: &ColumnarDataset) -> Result<Vec<GeneratedQuery>, WorkloadError> {
    spec.validate(ds)?;
    let bounds = numeric_bounds(ds)?;
    let enc = CategoricalEncoder::hashed_only(ds.schema());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_queries);
    for _ in 0..spec.n_queries {
        let mut generated = None;
        for _ in 0..MAX_RESAMPLES {
            let mut cols = sample(&mut rng, spec.dims, spec.predicates).into_vec();
            cols.sort_unstable();
            let preds = predicates_for(ds.schema(), &bounds, &cols, spec.range_size, |c| {
                let (lo, hi) = bounds[c];
                rng.random_range(lo..=hi)
            });
            if let Some(q) = label(ds, &spec.afs, preds, &enc)? {
                generated = Some(q);
                break;
            }
        }
        out.push(generated.ok_or(WorkloadError::DegenerateRange)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalystSpec {
    pub n_analysts: usize,
    /// Standard deviation of each analyst's centers, as a fraction of the
    /// column range.
    pub sigma: f64,
    pub n_queries: usize,
    pub predicates: usize,
    pub range_size: f64,
    pub seed: u64,
    pub afs: Vec<AggregateSpec>,
}

/// Generated queries plus the analyst that issued each.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalystWorkload {
    pub queries: Vec<GeneratedQuery>,
    pub analyst: Vec<usize>,
    /// Restricted column indices, shared by all analysts.
    pub columns: Vec<usize>,
    /// Per analyst, one mean center per restricted column.
    pub means: Vec<Vec<f64>>,
}

/// Queries whose centers come from one Gaussian per analyst, each with a
/// random mean inside the data's bounding box. All analysts restrict the
/// same `predicates` columns.
pub fn gen_analyst_workload(spec: &AnalystSpec, ds: &ColumnarDataset) -> Result<AnalystWorkload, WorkloadError> {
    let d = ds.schema().d();
    if spec.n_analysts == 0 || spec.n_queries == 0 || spec.predicates == 0 || spec.predicates > d {
        return Err(WorkloadError::InvalidSpec(format!(
            "analysts = {}, queries = {}, p = {}, d = {}",
            spec.n_analysts, spec.n_queries, spec.predicates, d
        )));
    }
    if !(spec.sigma > 0.0) || !(spec.range_size > 0.0) {
        return Err(WorkloadError::DegenerateRange);
    }
    for af in &spec.afs {
        af.validate(ds.schema())?;
    }
    let bounds = numeric_bounds(ds)?;
    let enc = CategoricalEncoder::hashed_only(ds.schema());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut columns = sample(&mut rng, d, spec.predicates).into_vec();
    columns.sort_unstable();
    let means: Vec<Vec<f64>> = (0..spec.n_analysts)
        .map(|_| {
            columns
                .iter()
                .map(|&c| {
                    let (lo, hi) = bounds[c];
                    rng.random_range(lo..=hi)
                })
                .collect()
        })
        .collect();
    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut analyst = Vec::with_capacity(spec.n_queries);
    for _ in 0..spec.n_queries {
        let who = rng.random_range(0..spec.n_analysts);
        let mut generated = None;
        for _ in 0..MAX_RESAMPLES {
            let preds = predicates_for(ds.schema(), &bounds, &columns, spec.range_size, |c| {
                let (lo, hi) = bounds[c];
                let slot = columns.iter().position(|&x| x == c).unwrap();
                let normal = Normal::new(means[who][slot], spec.sigma * (hi - lo)).expect("positive sigma");
                normal.sample(&mut rng).clamp(lo, hi)
            });
            if let Some(q) = label(ds, &spec.afs, preds, &enc)? {
                generated = Some(q);
                break;
            }
        }
        queries.push(generated.ok_or(WorkloadError::DegenerateRange)?);
        analyst.push(who);
    }
    Ok(AnalystWorkload {
        queries,
        analyst,
        columns,
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Attribute;

    #[test]
    fn dataset_is_seeded_and_bounded() {
        let a = gen_dataset(3, 500, 7).unwrap();
        let b = gen_dataset(3, 500, 7).unwrap();
        assert_eq!(a.columns(), b.columns());
        for c in a.columns() {
            let Column::Numeric(v) = c else { panic!() };
            assert!(v.iter().all(|x| (DOMAIN_LOW..=DOMAIN_HIGH).contains(x)));
        }
    }

    fn two_col(w1: f64, w2: f64) -> ColumnarDataset {
        let schema = DatasetSchema::new("t", vec![Attribute::numeric("x"), Attribute::numeric("y")]).unwrap();
        ColumnarDataset::new(
            schema,
            vec![Column::Numeric(vec![0.0, w1]), Column::Numeric(vec![5.0, 5.0 + w2])],
        )
        .unwrap()
    }

    #[test]
    fn range_size_examples() {
        assert!((derive_range_size(&two_col(100.0, 100.0), 100).unwrap() - 1.0).abs() < 1e-12);
        assert!((derive_range_size(&two_col(10.0, 20.0), 10).unwrap() - 1.5).abs() < 1e-12);
        let r = range_for_selectivity(&two_col(100.0, 100.0), 2, 0.01).unwrap();
        assert!((r - 10.0).abs() < 1e-9);
    }

    #[test]
    fn clamping() {
        assert_eq!(clamp_range(5.0, 2.0, 0.0, 10.0), (4.0, 6.0));
        assert_eq!(clamp_range(0.5, 2.0, 0.0, 10.0), (0.0, 2.0));
        assert_eq!(clamp_range(9.5, 2.0, 0.0, 10.0), (8.0, 10.0));
        assert_eq!(clamp_range(3.0, 20.0, 0.0, 10.0), (0.0, 10.0));
    }

    #[test]
    fn queries_restrict_p_columns() {
        let ds = gen_dataset(10, 2000, 1).unwrap();
        let spec = WorkloadSpec {
            n_queries: 2,
            dims: 10,
            predicates: 2,
            range_size: range_for_selectivity(&ds, 2, 0.05).unwrap(),
            seed: 3,
            afs: default_afs("a1"),
        };
        let qs = gen_queries(&spec, &ds).unwrap();
        assert_eq!(qs.len(), 2);
        for q in &qs {
            assert_eq!(q.meta.present_count(), 4);
            let parsed = crate::sql::parse(&q.sql, ds.schema()).unwrap();
            assert_eq!(parsed, q.query);
        }
        let again = gen_queries(&spec, &ds).unwrap();
        let records = |v: &[GeneratedQuery]| v.iter().map(GeneratedQuery::to_record).collect::<Vec<_>>();
        assert_eq!(records(&again), records(&qs));
    }

    #[test]
    fn zero_range_rejected() {
        let ds = gen_dataset(2, 10, 1).unwrap();
        let spec = WorkloadSpec {
            n_queries: 1,
            dims: 2,
            predicates: 1,
            range_size: 0.0,
            seed: 0,
            afs: vec![AggregateSpec::count_star()],
        };
        assert!(matches!(gen_queries(&spec, &ds), Err(WorkloadError::DegenerateRange)));
    }
}
