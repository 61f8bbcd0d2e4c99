//! Dataset schemas, aggregate specs, predicates, meta-vectors and the
//! query-answer pairs the models are trained on.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("schema must declare at least one attribute")]
    EmptySchema,
    #[error("duplicate attribute `{0}`")]
    DuplicateAttribute(String),
    #[error("attribute `{0}`: cardinality must be present (and >= 1) iff the attribute is categorical")]
    InvalidCardinality(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("meta-vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("inverted bounds at attribute slot pair {index}: lb {lb} > ub {ub}")]
    InvertedBounds { index: usize, lb: f64, ub: f64 },
    #[error("answer is not finite")]
    NonFiniteAnswer,
    #[error("COUNT answer {0} is negative or not integral")]
    InvalidCount(f64),
    #[error("predicate on `{0}` has no bounds")]
    UnboundedPredicate(String),
    #[error("pair aggregate {got} does not match training set aggregate {expected}")]
    AggregateMismatch { expected: String, got: String },
    #[error("invalid aggregate key `{0}`")]
    InvalidAggregateKey(String),
    #[error("{function} requires a target attribute")]
    MissingTarget { function: AggregateFunction },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub kind: AttributeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

impl Attribute {
    pub fn numeric(name: impl Into<String>) -> Self {
        Attribute {
            name: name.into(),
            kind: AttributeKind::Numeric,
            cardinality: None,
        }
    }

    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        Attribute {
            name: name.into(),
            kind: AttributeKind::Categorical,
            cardinality: Some(cardinality),
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.kind == AttributeKind::Numeric
    }
}

/// Ordered attribute list of a (pre-joined) table. Attribute order fixes the
/// meta-vector layout: attribute `i` owns slots `2i` and `2i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSchema {
    pub name: String,
    attributes: Vec<Attribute>,
}

impl DatasetSchema {
    pub fn new(name: impl Into<String>, attributes: Vec<Attribute>) -> Result<Self, SchemaError> {
        if attributes.is_empty() {
            return Err(SchemaError::EmptySchema);
        }
        let mut seen = HashSet::new();
        for a in &attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(SchemaError::DuplicateAttribute(a.name.clone()));
            }
            let ok = match a.kind {
                AttributeKind::Numeric => a.cardinality.is_none(),
                AttributeKind::Categorical => matches!(a.cardinality, Some(c) if c >= 1),
            };
            if !ok {
                return Err(SchemaError::InvalidCardinality(a.name.clone()));
            }
        }
        Ok(DatasetSchema {
            name: name.into(),
            attributes,
        })
    }

    /// All-numeric schema with attributes `a1..ad`.
    pub fn numeric(name: impl Into<String>, d: usize) -> Result<Self, SchemaError> {
        let attrs = (1..=d).map(|i| Attribute::numeric(format!("a{i}"))).collect();
        Self::new(name, attrs)
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    /// Number of attributes `d`.
    pub fn d(&self) -> usize {
        self.attributes.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name.eq_ignore_ascii_case(name))
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.index_of(name).map(|i| &self.attributes[i])
    }

    /// Stable 64-bit fingerprint of the schema's canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        format!("{:016x}", crate::vectorize::fnv1a64(json.as_bytes()))
    }
}

impl<'de> Deserialize<'de> for DatasetSchema {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            name: String,
            attributes: Vec<Attribute>,
        }
        let raw = Raw::deserialize(deserializer)?;
        DatasetSchema::new(raw.name, raw.attributes).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggregateFunction {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggregateFunction {
    pub const ALL: [AggregateFunction; 5] = [
        AggregateFunction::Count,
        AggregateFunction::Sum,
        AggregateFunction::Avg,
        AggregateFunction::Min,
        AggregateFunction::Max,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregateFunction::Count => "COUNT",
            AggregateFunction::Sum => "SUM",
            AggregateFunction::Avg => "AVG",
            AggregateFunction::Min => "MIN",
            AggregateFunction::Max => "MAX",
        }
    }
}

impl fmt::Display for AggregateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregateFunction {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_uppercase().as_str() {
            "COUNT" => Ok(AggregateFunction::Count),
            "SUM" => Ok(AggregateFunction::Sum),
            "AVG" | "MEAN" => Ok(AggregateFunction::Avg),
            "MIN" => Ok(AggregateFunction::Min),
            "MAX" => Ok(AggregateFunction::Max),
            _ => Err(()),
        }
    }
}

/// An aggregate function and its target. `COUNT(*)` has no target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AggregateSpec {
    pub function: AggregateFunction,
    pub target: Option<String>,
}

impl AggregateSpec {
    pub fn count_star() -> Self {
        AggregateSpec {
            function: AggregateFunction::Count,
            target: None,
        }
    }

    pub fn new(function: AggregateFunction, target: impl Into<String>) -> Self {
        AggregateSpec {
            function,
            target: Some(target.into()),
        }
    }

    /// Catalogue key, `AF(attr)` or `COUNT(*)`.
    pub fn key(&self) -> String {
        match &self.target {
            Some(t) => format!("{}({})", self.function, t),
            None => format!("{}(*)", self.function),
        }
    }

    pub fn parse_key(key: &str) -> Result<Self, SchemaError> {
        let bad = || SchemaError::InvalidAggregateKey(key.to_string());
        let key = key.trim();
        let open = key.find('(').ok_or_else(bad)?;
        if !key.ends_with(')') {
            return Err(bad());
        }
        let function: AggregateFunction = key[..open].trim().parse().map_err(|_| bad())?;
        let inner = key[open + 1..key.len() - 1].trim();
        if inner.is_empty() {
            return Err(bad());
        }
        let spec = if inner == "*" {
            if function != AggregateFunction::Count {
                return Err(SchemaError::MissingTarget { function });
            }
            AggregateSpec::count_star()
        } else {
            AggregateSpec::new(function, inner)
        };
        Ok(spec)
    }

    pub fn validate(&self, schema: &DatasetSchema) -> Result<(), SchemaError> {
        match &self.target {
            None if self.function != AggregateFunction::Count => Err(SchemaError::MissingTarget {
                function: self.function,
            }),
            None => Ok(()),
            Some(t) => schema
                .attribute(t)
                .map(|_| ())
                .ok_or_else(|| SchemaError::UnknownAttribute(t.clone())),
        }
    }
}

impl fmt::Display for AggregateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl Serialize for AggregateSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for AggregateSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AggregateSpec::parse_key(&s).map_err(serde::de::Error::custom)
    }
}

/// Range restriction on one attribute. Equality is `lb == ub`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub attribute: String,
    pub lb: Option<f64>,
    pub ub: Option<f64>,
}

impl Predicate {
    pub fn new(attribute: impl Into<String>, lb: Option<f64>, ub: Option<f64>) -> Result<Self, SchemaError> {
        let attribute = attribute.into();
        match (lb, ub) {
            (None, None) => Err(SchemaError::UnboundedPredicate(attribute)),
            (Some(l), Some(u)) if l > u => Err(SchemaError::InvertedBounds { index: 0, lb: l, ub: u }),
            _ => Ok(Predicate { attribute, lb, ub }),
        }
    }

    pub fn equality(attribute: impl Into<String>, value: f64) -> Self {
        Predicate {
            attribute: attribute.into(),
            lb: Some(value),
            ub: Some(value),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lb.is_none_or(|l| v >= l) && self.ub.is_none_or(|u| v <= u)
    }
}

/// Fixed-width predicate encoding. Missing slots hold NaN internally and are
/// serialized with an explicit per-slot flag; a present zero is a real bound.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaVector<T: Scalar = f64> {
    values: Vec<T>,
}

impl<T: Scalar> MetaVector<T> {
    /// All slots missing.
    pub fn missing(width: usize) -> Self {
        MetaVector {
            values: vec![T::nan(); width],
        }
    }

    /// Builds from optional slots.
    pub fn from_slots(slots: &[Option<T>]) -> Self {
        MetaVector {
            values: slots.iter().map(|s| s.unwrap_or_else(T::nan)).collect(),
        }
    }

    /// Builds from raw values where NaN marks a missing slot.
    pub fn from_raw(values: Vec<T>) -> Self {
        MetaVector { values }
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, slot: usize) -> Option<T> {
        self.values.get(slot).copied().filter(|v| !v.is_nan())
    }

    pub fn is_missing(&self, slot: usize) -> bool {
        self.get(slot).is_none()
    }

    /// Sets a present value. Non-finite values are stored as missing.
    pub fn set(&mut self, slot: usize, value: T) {
        self.values[slot] = if value.is_finite() { value } else { T::nan() };
    }

    pub fn clear(&mut self, slot: usize) {
        self.values[slot] = T::nan();
    }

    /// Raw slot values, NaN for missing; the layout the models consume.
    pub fn as_raw(&self) -> &[T] {
        &self.values
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn slots(&self) -> impl Iterator<Item = Option<T>> + '_ {
        self.values.iter().map(|v| if v.is_nan() { None } else { Some(*v) })
    }

    pub fn cast<U: Scalar>(&self) -> MetaVector<U> {
        MetaVector {
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Exact equality that treats two missing slots as equal.
    pub fn same_as(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| (a.is_nan() && b.is_nan()) || a == b)
    }
}

#[derive(Serialize, Deserialize)]
struct MetaVectorRepr<T> {
    values: Vec<T>,
    missing: Vec<bool>,
}

impl<T: Scalar> Serialize for MetaVector<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr = MetaVectorRepr {
            values: self
                .values
                .iter()
                .map(|v| if v.is_nan() { T::zero() } else { *v })
                .collect(),
            missing: self.values.iter().map(|v| v.is_nan()).collect(),
        };
        repr.serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for MetaVector<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MetaVectorRepr::<T>::deserialize(d)?;
        if repr.values.len() != repr.missing.len() {
            return Err(serde::de::Error::custom("values and missing flags differ in length"));
        }
        Ok(MetaVector {
            values: repr
                .values
                .into_iter()
                .zip(repr.missing)
                .map(|(v, m)| if m { T::nan() } else { v })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswerPair {
    pub meta: MetaVector<f64>,
    pub af: AggregateSpec,
    pub answer: f64,
}

impl QueryAnswerPair {
    /// Equality with missing-aware meta comparison.
    pub fn same_as(&self, other: &Self) -> bool {
        self.meta.same_as(&other.meta) && self.af == other.af && self.answer == other.answer
    }
}

/// Checks slot-pair ordering and answer sanity for a pair whose meta-vector
/// is expected to be exactly `expected_width` wide.
pub fn validate_pair_width(pair: &QueryAnswerPair, expected_width: usize) -> Result<(), SchemaError> {
    if pair.meta.width() != expected_width {
        return Err(SchemaError::LengthMismatch {
            expected: expected_width,
            got: pair.meta.width(),
        });
    }
    for i in 0..expected_width / 2 {
        if let (Some(lb), Some(ub)) = (pair.meta.get(2 * i), pair.meta.get(2 * i + 1)) {
            if lb > ub {
                return Err(SchemaError::InvertedBounds { index: i, lb, ub });
            }
        }
    }
    if !pair.answer.is_finite() {
        return Err(SchemaError::NonFiniteAnswer);
    }
    if pair.af.function == AggregateFunction::Count && (pair.answer < 0.0 || pair.answer.fract() != 0.0) {
        return Err(SchemaError::InvalidCount(pair.answer));
    }
    Ok(())
}

/// Validates a pair against the base `2d` layout of `schema`.
pub fn validate_pair(pair: &QueryAnswerPair, schema: &DatasetSchema) -> Result<(), SchemaError> {
    validate_pair_width(pair, 2 * schema.d())
}

/// Pairs for a single aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub af: AggregateSpec,
    pairs: Vec<QueryAnswerPair>,
}

impl TrainingSet {
    pub fn new(af: AggregateSpec) -> Self {
        TrainingSet { af, pairs: Vec::new() }
    }

    pub fn from_pairs(af: AggregateSpec, pairs: Vec<QueryAnswerPair>) -> Result<Self, SchemaError> {
        let mut set = TrainingSet::new(af);
        for p in pairs {
            set.push(p)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, pair: QueryAnswerPair) -> Result<(), SchemaError> {
        if pair.af != self.af {
            return Err(SchemaError::AggregateMismatch {
                expected: self.af.key(),
                got: pair.af.key(),
            });
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn pairs(&self) -> &[QueryAnswerPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Subset by pair index.
    pub fn select(&self, indices: &[usize]) -> TrainingSet {
        TrainingSet {
            af: self.af.clone(),
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }

    /// Row-major feature matrix and targets.
    pub fn to_matrix<T: Scalar>(&self) -> (crate::gbdt::FeatureMatrix<T>, Vec<T>) {
        let width = self.pairs.first().map_or(0, |p| p.meta.width());
        let mut data = Vec::with_capacity(width * self.pairs.len());
        for p in &self.pairs {
            data.extend(p.meta.as_raw().iter().map(|v| T::from_f64_lossy(*v)));
        }
        let targets = self.pairs.iter().map(|p| T::from_f64_lossy(p.answer)).collect();
        (crate::gbdt::FeatureMatrix::new(self.pairs.len(), width, data), targets)
    }
}

/// One value of a GROUP-BY key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupValue {
    Number(f64),
    Text(String),
}

impl GroupValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            GroupValue::Number(v) => Some(*v),
            GroupValue::Text(_) => None,
        }
    }
}

impl Eq for GroupValue {}

impl PartialOrd for GroupValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GroupValue {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (GroupValue::Number(a), GroupValue::Number(b)) => a.total_cmp(b),
            (GroupValue::Number(_), GroupValue::Text(_)) => Ordering::Less,
            (GroupValue::Text(_), GroupValue::Number(_)) => Ordering::Greater,
            (GroupValue::Text(a), GroupValue::Text(b)) => a.cmp(b),
        }
    }
}

impl fmt::Display for GroupValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupValue::Number(v) => write!(f, "{v}"),
            GroupValue::Text(s) => f.write_str(s),
        }
    }
}

/// Answers of one group of a GROUP-BY query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAnswers {
    pub key: Vec<GroupValue>,
    pub answers: BTreeMap<String, f64>,
}

/// One line of a query log: `{"sql": ..., "answers": {"AF(attr)": y, ...}}`.
/// GROUP-BY queries carry their per-group answers under `groups`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogRecord {
    pub sql: String,
    #[serde(default)]
    pub answers: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupAnswers>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema3() -> DatasetSchema {
        DatasetSchema::numeric("B", 3).unwrap()
    }

    fn pair(slots: &[Option<f64>], answer: f64) -> QueryAnswerPair {
        QueryAnswerPair {
            meta: MetaVector::from_slots(slots),
            af: AggregateSpec::new(AggregateFunction::Avg, "a3"),
            answer,
        }
    }

    #[test]
    fn valid_pair_ok() {
        let p = pair(&[Some(1.0), Some(2.0), None, None, Some(0.0), Some(0.0)], 5.0);
        assert_eq!(validate_pair(&p, &schema3()), Ok(()));
    }

    #[test]
    fn short_meta_is_length_mismatch() {
        let p = pair(&[None; 5], 5.0);
        assert_eq!(
            validate_pair(&p, &schema3()),
            Err(SchemaError::LengthMismatch { expected: 6, got: 5 })
        );
    }

    #[test]
    fn inverted_slot_pair() {
        let p = pair(&[Some(3.0), Some(1.0), None, None, None, None], 5.0);
        assert!(matches!(
            validate_pair(&p, &schema3()),
            Err(SchemaError::InvertedBounds { index: 0, .. })
        ));
    }

    #[test]
    fn non_finite_answer() {
        let p = pair(&[None; 6], f64::INFINITY);
        assert_eq!(validate_pair(&p, &schema3()), Err(SchemaError::NonFiniteAnswer));
    }

    #[test]
    fn count_must_be_integral() {
        let mut p = pair(&[None; 6], 2.5);
        p.af = AggregateSpec::count_star();
        assert!(matches!(validate_pair(&p, &schema3()), Err(SchemaError::InvalidCount(_))));
    }

    #[test]
    fn zero_is_not_missing() {
        let mut m = MetaVector::<f64>::missing(2);
        m.set(0, 0.0);
        assert_eq!(m.get(0), Some(0.0));
        assert!(m.is_missing(1));
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"values":[0.0,0.0],"missing":[false,true]}"#);
        let back: MetaVector = serde_json::from_str(&json).unwrap();
        assert!(back.same_as(&m));
    }

    #[test]
    fn aggregate_keys() {
        assert_eq!(AggregateSpec::count_star().key(), "COUNT(*)");
        assert_eq!(AggregateSpec::parse_key("avg(a3)").unwrap(), AggregateSpec::new(AggregateFunction::Avg, "a3"));
        assert!(AggregateSpec::parse_key("SUM(*)").is_err());
        assert!(AggregateSpec::parse_key("MEDIAN(a1)").is_err());
    }

    #[test]
    fn schema_rejects_duplicates_and_bad_cardinality() {
        assert!(matches!(
            DatasetSchema::new("t", vec![Attribute::numeric("x"), Attribute::numeric("x")]),
            Err(SchemaError::DuplicateAttribute(_))
        ));
        let mut bad = Attribute::numeric("c");
        bad.kind = AttributeKind::Categorical;
        assert!(matches!(DatasetSchema::new("t", vec![bad]), Err(SchemaError::InvalidCardinality(_))));
        assert_eq!(DatasetSchema::new("t", vec![]), Err(SchemaError::EmptySchema));
    }

    #[test]
    fn training_set_rejects_foreign_af() {
        let mut set = TrainingSet::new(AggregateSpec::count_star());
        assert!(set.push(pair(&[None; 6], 1.0)).is_err());
    }

    #[test]
    fn log_record_format() {
        let line = r#"{"sql":"SELECT COUNT(*) FROM B","answers":{"COUNT(*)":12}}"#;
        let rec: QueryLogRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.answers["COUNT(*)"], 12.0);
        assert!(rec.groups.is_none());
    }
}
