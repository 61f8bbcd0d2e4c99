//! In-memory exact aggregate executor over columnar data. Produces the
//! ground-truth answers used for training labels and evaluation, and serves
//! DISTINCT queries for the GROUP-BY catalogue.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{AggregateFunction, AggregateSpec, AttributeKind, DatasetSchema, GroupValue};
use crate::sql::ParsedQuery;
use crate::vectorize::{DistinctSource, VectorizeError};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("{0} over an empty selection is undefined")]
    EmptySelection(AggregateSpec),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{0}` has the wrong kind for this operation")]
    KindMismatch(String),
    #[error("column `{name}` has {got} rows, expected {expected}")]
    RaggedColumns { name: String, expected: usize, got: usize },
    #[error("column `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema file: {0}")]
    SchemaFile(#[from] serde_json::Error),
    #[error("csv is missing column `{0}`")]
    MissingCsvColumn(String),
    #[error("row {row}: cannot parse `{value}` as a number for `{column}`")]
    BadNumber { row: usize, column: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, row: usize) -> GroupValue {
        match self {
            Column::Numeric(v) => GroupValue::Number(v[row]),
            Column::Categorical(v) => GroupValue::Text(v[row].clone()),
        }
    }
}

/// Immutable table, one dense column per schema attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnarDataset {
    schema: DatasetSchema,
    columns: Vec<Column>,
    rows: usize,
}

impl ColumnarDataset {
    pub fn new(schema: DatasetSchema, columns: Vec<Column>) -> Result<Self, ExecError> {
        if columns.len() != schema.d() {
            return Err(ExecError::RaggedColumns {
                name: "<schema>".into(),
                expected: schema.d(),
                got: columns.len(),
            });
        }
        let rows = columns.first().map_or(0, Column::len);
        for (attr, col) in schema.attributes().iter().zip(&columns) {
            if col.len() != rows {
                return Err(ExecError::RaggedColumns {
                    name: attr.name.clone(),
                    expected: rows,
                    got: col.len(),
                });
            }
            match (attr.kind, col) {
                (AttributeKind::Numeric, Column::Numeric(v)) => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(ExecError::NonFinite(attr.name.clone()));
                    }
                }
                (AttributeKind::Categorical, Column::Categorical(_)) => {}
                _ => return Err(ExecError::KindMismatch(attr.name.clone())),
            }
        }
        Ok(ColumnarDataset { schema, columns, rows })
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.schema.index_of(name).map(|i| &self.columns[i])
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], ExecError> {
        match self.column(name) {
            Some(Column::Numeric(v)) => Ok(v),
            Some(_) => Err(ExecError::KindMismatch(name.to_string())),
            None => Err(ExecError::UnknownAttribute(name.to_string())),
        }
    }

    /// Reads a headed CSV whose columns include every schema attribute.
    pub fn from_csv(path: &Path, schema: DatasetSchema) -> Result<Self, ExecError> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let positions: Vec<usize> = schema
            .attributes()
            .iter()
            .map(|a| {
                headers
                    .iter()
                    .position(|h| h.trim().eq_ignore_ascii_case(&a.name))
                    .ok_or_else(|| ExecError::MissingCsvColumn(a.name.clone()))
            })
            .collect::<Result<_, _>>()?;
        let mut columns: Vec<Column> = schema
            .attributes()
            .iter()
            .map(|a| match a.kind {
                AttributeKind::Numeric => Column::Numeric(Vec::new()),
                AttributeKind::Categorical => Column::Categorical(Vec::new()),
            })
            .collect();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            for ((col, &pos), attr) in columns.iter_mut().zip(&positions).zip(schema.attributes()) {
                let raw = record.get(pos).unwrap_or("").trim();
                match col {
                    Column::Numeric(v) => v.push(raw.parse().map_err(|_| ExecError::BadNumber {
                        row: row + 1,
                        column: attr.name.clone(),
                        value: raw.to_string(),
                    })?),
                    Column::Categorical(v) => v.push(raw.to_string()),
                }
            }
        }
        ColumnarDataset::new(schema, columns)
    }

    pub fn to_csv(&self, path: &Path) -> Result<(), ExecError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.schema.attributes().iter().map(|a| a.name.as_str()))?;
        let mut buf = Vec::with_capacity(self.columns.len());
        for r in 0..self.rows {
            buf.clear();
            for c in &self.columns {
                buf.push(match c {
                    Column::Numeric(v) => v[r].to_string(),
                    Column::Categorical(v) => v[r].clone(),
                });
            }
            w.write_record(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Row indices passing every predicate of `q` (inclusive bounds).
    pub fn select(&self, q: &ParsedQuery) -> Result<Vec<u32>, ExecError> {
        let mut selected: Option<Vec<u32>> = None;
        let mut narrow = |keep: &dyn Fn(usize) -> bool| {
            selected = Some(match selected.take() {
                None => (0..self.rows as u32).filter(|&r| keep(r as usize)).collect(),
                Some(rows) => rows.into_iter().filter(|&r| keep(r as usize)).collect(),
            });
        };
        for p in &q.predicates {
            let col = self.numeric(&p.attribute)?;
            let lb = p.lb.unwrap_or(f64::NEG_INFINITY);
            let ub = p.ub.unwrap_or(f64::INFINITY);
            narrow(&|r| col[r] >= lb && col[r] <= ub);
        }
        for (attr, value) in &q.categorical_equalities {
            let col = self.categorical(attr)?;
            narrow(&|r| col[r] == *value);
        }
        for (attr, pattern) in &q.like_patterns {
            let col = self.categorical(attr)?;
            narrow(&|r| like_match(pattern, &col[r]));
        }
        Ok(selected.unwrap_or_else(|| (0..self.rows as u32).collect()))
    }

    fn categorical(&self, name: &str) -> Result<&[String], ExecError> {
        match self.column(name) {
            Some(Column::Categorical(v)) => Ok(v),
            Some(_) => Err(ExecError::KindMismatch(name.to_string())),
            None => Err(ExecError::UnknownAttribute(name.to_string())),
        }
    }

    fn fold(&self, spec: &AggregateSpec, rows: &[u32]) -> Result<Option<f64>, ExecError> {
        if spec.function == AggregateFunction::Count {
            return Ok(Some(rows.len() as f64));
        }
        let target = spec.target.as_deref().ok_or_else(|| ExecError::UnknownAttribute("*".into()))?;
        let col = self.numeric(target)?;
        let values = rows.iter().map(|&r| col[r as usize]);
        Ok(match spec.function {
            AggregateFunction::Sum => Some(values.fold(0.0, |a, b| a + b)),
            _ if rows.is_empty() => None,
            AggregateFunction::Avg => Some(values.fold(0.0, |a, b| a + b) / rows.len() as f64),
            AggregateFunction::Min => values.reduce(f64::min),
            AggregateFunction::Max => values.reduce(f64::max),
            AggregateFunction::Count => unreachable!(),
        })
    }
}

/// Per-aggregate results; `None` marks an AF undefined on an empty selection.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateValues(pub BTreeMap<AggregateSpec, Option<f64>>);

impl AggregateValues {
    pub fn value(&self, spec: &AggregateSpec) -> Result<f64, ExecError> {
        match self.0.get(spec) {
            Some(Some(v)) => Ok(*v),
            Some(None) => Err(ExecError::EmptySelection(spec.clone())),
            None => Err(ExecError::UnknownAttribute(spec.key())),
        }
    }

    /// Defined answers keyed by `AF(attr)`.
    pub fn defined(&self) -> BTreeMap<String, f64> {
        self.0
            .iter()
            .filter_map(|(k, v)| v.map(|v| (k.key(), v)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecOutput {
    Scalar(AggregateValues),
    /// One row per observed group, sorted by key.
    Grouped(Vec<(Vec<GroupValue>, AggregateValues)>),
}

/// Filters by the conjunction of inclusive predicates, then folds each AF.
pub fn execute_aggregate(ds: &ColumnarDataset, q: &ParsedQuery) -> Result<ExecOutput, ExecError> {
    let rows = ds.select(q)?;
    if q.group_by.is_empty() {
        let mut out = BTreeMap::new();
        for spec in &q.aggregates {
            out.insert(spec.clone(), ds.fold(spec, &rows)?);
        }
        return Ok(ExecOutput::Scalar(AggregateValues(out)));
    }
    let key_cols: Vec<&Column> = q
        .group_by
        .iter()
        .map(|g| ds.column(g).ok_or_else(|| ExecError::UnknownAttribute(g.clone())))
        .collect::<Result<_, _>>()?;
    let mut groups: BTreeMap<Vec<GroupValue>, Vec<u32>> = BTreeMap::new();
    for &r in &rows {
        let key = key_cols.iter().map(|c| c.value(r as usize)).collect();
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let mut vals = BTreeMap::new();
        for spec in &q.aggregates {
            vals.insert(spec.clone(), ds.fold(spec, &members)?);
        }
        out.push((key, AggregateValues(vals)));
    }
    Ok(ExecOutput::Grouped(out))
}

/// Sorted, deduplicated value tuples of `attrs`.
pub fn select_distinct(ds: &ColumnarDataset, attrs: &[String]) -> Result<Vec<Vec<GroupValue>>, ExecError> {
    let cols: Vec<&Column> = attrs
        .iter()
        .map(|a| ds.column(a).ok_or_else(|| ExecError::UnknownAttribute(a.clone())))
        .collect::<Result<_, _>>()?;
    let mut tuples: Vec<Vec<GroupValue>> = (0..ds.rows())
        .map(|r| cols.iter().map(|c| c.value(r)).collect())
        .collect();
    tuples.sort();
    tuples.dedup();
    Ok(tuples)
}

impl DistinctSource for ColumnarDataset {
    fn distinct(&self, attributes: &[String]) -> Result<Vec<Vec<GroupValue>>, VectorizeError> {
        select_distinct(self, attributes).map_err(|_| VectorizeError::UnknownAttribute(attributes.join(", ")))
    }
}

/// SQL LIKE with `%` (any run) and `_` (one character).
pub fn like_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    // dp[j]: pattern prefix of the current length matches text prefix j
    let mut dp = vec![false; t.len() + 1];
    dp[0] = true;
    for &pc in &p {
        let mut next = vec![false; t.len() + 1];
        if pc == '%' {
            let mut any = false;
            for j in 0..=t.len() {
                any |= dp[j];
                next[j] = any;
            }
        } else {
            for j in 1..=t.len() {
                next[j] = dp[j - 1] && (pc == '_' || pc == t[j - 1]);
            }
        }
        dp = next;
    }
    dp[t.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Attribute;
    use crate::sql::parse;

    fn small() -> ColumnarDataset {
        let schema = DatasetSchema::new(
            "t",
            vec![Attribute::numeric("a1"), Attribute::categorical("c", 3)],
        )
        .unwrap();
        ColumnarDataset::new(
            schema,
            vec![
                Column::Numeric(vec![1.0, 2.0, 3.0, 2.0]),
                Column::Categorical(vec!["B".into(), "A".into(), "A".into(), "C".into()]),
            ],
        )
        .unwrap()
    }

    fn run(ds: &ColumnarDataset, sql: &str) -> ExecOutput {
        execute_aggregate(ds, &parse(sql, ds.schema()).unwrap()).unwrap()
    }

    #[test]
    fn full_scan_count_and_avg() {
        let ds = small();
        let ExecOutput::Scalar(v) = run(&ds, "SELECT COUNT(*), AVG(a1) FROM t") else { panic!() };
        assert_eq!(v.value(&AggregateSpec::count_star()).unwrap(), 4.0);
        assert_eq!(v.value(&AggregateSpec::new(AggregateFunction::Avg, "a1")).unwrap(), 2.0);
    }

    #[test]
    fn empty_selection_semantics() {
        let ds = small();
        let ExecOutput::Scalar(v) = run(&ds, "SELECT COUNT(*), SUM(a1), MAX(a1) FROM t WHERE a1 >= 100") else {
            panic!()
        };
        assert_eq!(v.value(&AggregateSpec::count_star()).unwrap(), 0.0);
        assert_eq!(v.value(&AggregateSpec::new(AggregateFunction::Sum, "a1")).unwrap(), 0.0);
        assert!(matches!(
            v.value(&AggregateSpec::new(AggregateFunction::Max, "a1")),
            Err(ExecError::EmptySelection(_))
        ));
        assert_eq!(v.defined().len(), 2);
    }

    #[test]
    fn inclusive_bounds_and_categoricals() {
        let ds = small();
        let ExecOutput::Scalar(v) = run(&ds, "SELECT COUNT(*) FROM t WHERE a1 >= 2 AND a1 <= 2 AND c = 'A'") else {
            panic!()
        };
        assert_eq!(v.value(&AggregateSpec::count_star()).unwrap(), 1.0);
    }

    #[test]
    fn grouped_execution() {
        let ds = small();
        let ExecOutput::Grouped(rows) = run(&ds, "SELECT c, SUM(a1) FROM t GROUP BY c") else { panic!() };
        let keys: Vec<String> = rows.iter().map(|(k, _)| k[0].to_string()).collect();
        assert_eq!(keys, ["A", "B", "C"]);
        assert_eq!(rows[0].1.value(&AggregateSpec::new(AggregateFunction::Sum, "a1")).unwrap(), 5.0);
    }

    #[test]
    fn distinct_values() {
        let ds = small();
        let d = select_distinct(&ds, &["c".into()]).unwrap();
        assert_eq!(
            d,
            vec![
                vec![GroupValue::Text("A".into())],
                vec![GroupValue::Text("B".into())],
                vec![GroupValue::Text("C".into())]
            ]
        );
        let pairs = select_distinct(&ds, &["a1".into(), "c".into()]).unwrap();
        assert_eq!(pairs.len(), 4);
        let empty = ColumnarDataset::new(
            DatasetSchema::numeric("e", 1).unwrap(),
            vec![Column::Numeric(vec![])],
        )
        .unwrap();
        assert!(select_distinct(&empty, &["a1".into()]).unwrap().is_empty());
    }

    #[test]
    fn like_patterns() {
        assert!(like_match("%product", "dairy product"));
        assert!(!like_match("%product", "products"));
        assert!(like_match("a_c%", "abcdef"));
        assert!(like_match("%", ""));
        assert!(!like_match("_", ""));
    }

    #[test]
    fn rejects_ragged_and_nonfinite() {
        let schema = DatasetSchema::numeric("t", 2).unwrap();
        assert!(ColumnarDataset::new(
            schema.clone(),
            vec![Column::Numeric(vec![1.0]), Column::Numeric(vec![])]
        )
        .is_err());
        assert!(matches!(
            ColumnarDataset::new(schema, vec![Column::Numeric(vec![f64::NAN]), Column::Numeric(vec![1.0])]),
            Err(ExecError::NonFinite(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        ds.to_csv(&path).unwrap();
        let back = ColumnarDataset::from_csv(&path, ds.schema().clone()).unwrap();
        assert_eq!(back, ds);
    }
}
