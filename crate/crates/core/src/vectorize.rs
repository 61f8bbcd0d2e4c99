//! Turns parsed queries into meta-vectors.
//!
//! Layout for a schema with `d` attributes: slots `2i`/`2i+1` hold the lower
//! and upper bound of attribute `i`. Categorical attributes encoded with
//! dummy columns append one `(lb, ub)` slot pair per known value after the
//! `2d` base block, in attribute order. Hashed categoricals and LIKE
//! patterns use the attribute's base slots as an equality `(h, h)`.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{AttributeKind, DatasetSchema, GroupValue, MetaVector};
use crate::sql::ParsedQuery;

/// Attributes whose cardinality is below this use dummy columns.
pub const DEFAULT_CARDINALITY_THRESHOLD: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorizeError {
    #[error("query has GROUP BY attributes; expand it with the group-by catalogue")]
    GroupByPresent,
    #[error("query has no GROUP BY attributes")]
    NoGroupBy,
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{0}` is not categorical")]
    NotCategorical(String),
    #[error("no cached distinct values for group key ({0}) and no executor attached")]
    MissingCatalogueEntry(String),
    #[error("group value `{value}` does not fit attribute `{attribute}`")]
    GroupValueType { attribute: String, value: String },
    #[error("encoder was built for a different schema")]
    SchemaMismatch,
}

/// FNV-1a, 64-bit. Stable across platforms and runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// FNV-1a of the UTF-8 bytes, top 53 bits, as an exactly representable real
/// in `[0, 2^53)`.
pub fn stable_hash(value: &str) -> f64 {
    (fnv1a64(value.as_bytes()) >> 11) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CategoricalMode {
    /// One column per value, in the listed order.
    Dummy { values: Vec<String> },
    Hashed,
}

/// Result of encoding one categorical value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CategoricalCode {
    /// First slot of the value's `(lb, ub)` dummy column pair.
    DummyColumn(usize),
    /// Value not in the dummy dictionary: the block stays missing.
    UnseenValue,
    Hashed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEncoder {
    pub cardinality_threshold: usize,
    schema_fingerprint: String,
    base_width: usize,
    modes: BTreeMap<String, CategoricalMode>,
    /// Start slot of each dummy block.
    #[serde(skip)]
    offsets: BTreeMap<String, usize>,
    #[serde(skip)]
    width: usize,
}

impl CategoricalEncoder {
    /// Chooses dummy columns for categorical attributes whose declared
    /// cardinality is under `threshold` and whose dictionary is supplied,
    /// hashing for the rest.
    pub fn new(schema: &DatasetSchema, dictionaries: &BTreeMap<String, Vec<String>>, threshold: usize) -> Self {
        let mut modes = BTreeMap::new();
        for attr in schema.attributes() {
            if attr.kind != AttributeKind::Categorical {
                continue;
            }
            let card = attr.cardinality.unwrap_or(usize::MAX);
            let mode = match dictionaries.get(&attr.name) {
                Some(values) if card < threshold && !values.is_empty() => {
                    let uniq: BTreeSet<&String> = values.iter().collect();
                    CategoricalMode::Dummy {
                        values: uniq.into_iter().cloned().collect(),
                    }
                }
                _ => CategoricalMode::Hashed,
            };
            modes.insert(attr.name.clone(), mode);
        }
        let mut enc = CategoricalEncoder {
            cardinality_threshold: threshold,
            schema_fingerprint: schema.fingerprint(),
            base_width: 2 * schema.d(),
            modes,
            offsets: BTreeMap::new(),
            width: 0,
        };
        enc.rebuild_layout(schema);
        enc
    }

    /// Encoder for a schema with no dummy-encoded attributes.
    pub fn hashed_only(schema: &DatasetSchema) -> Self {
        Self::new(schema, &BTreeMap::new(), DEFAULT_CARDINALITY_THRESHOLD)
    }

    /// Recomputes slot offsets after deserialization.
    pub fn attach(&mut self, schema: &DatasetSchema) -> Result<(), VectorizeError> {
        if schema.fingerprint() != self.schema_fingerprint {
            return Err(VectorizeError::SchemaMismatch);
        }
        self.rebuild_layout(schema);
        Ok(())
    }

    fn rebuild_layout(&mut self, schema: &DatasetSchema) {
        self.base_width = 2 * schema.d();
        self.offsets.clear();
        let mut next = self.base_width;
        for attr in schema.attributes() {
            if let Some(CategoricalMode::Dummy { values }) = self.modes.get(&attr.name) {
                self.offsets.insert(attr.name.clone(), next);
                next += 2 * values.len();
            }
        }
        self.width = next;
    }

    /// Meta-vector width; identical for every query over the schema.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn mode(&self, attribute: &str) -> Option<&CategoricalMode> {
        self.modes.get(attribute)
    }

    pub fn encode(&self, attribute: &str, value: &str) -> Result<CategoricalCode, VectorizeError> {
        match self.modes.get(attribute) {
            None => Err(VectorizeError::NotCategorical(attribute.to_string())),
            Some(CategoricalMode::Hashed) => Ok(CategoricalCode::Hashed(stable_hash(value))),
            Some(CategoricalMode::Dummy { values }) => {
                let offset = self.offsets[attribute];
                Ok(match values.binary_search_by(|v| v.as_str().cmp(value)) {
                    Ok(pos) => CategoricalCode::DummyColumn(offset + 2 * pos),
                    Err(_) => CategoricalCode::UnseenValue,
                })
            }
        }
    }

    fn dummy_block(&self, attribute: &str) -> Option<std::ops::Range<usize>> {
        match self.modes.get(attribute) {
            Some(CategoricalMode::Dummy { values }) => {
                let start = self.offsets[attribute];
                Some(start..start + 2 * values.len())
            }
            _ => None,
        }
    }

    fn apply(
        &self,
        schema: &DatasetSchema,
        meta: &mut MetaVector<f64>,
        attribute: &str,
        value: &str,
    ) -> Result<(), VectorizeError> {
        let idx = schema
            .index_of(attribute)
            .ok_or_else(|| VectorizeError::UnknownAttribute(attribute.to_string()))?;
        match self.encode(attribute, value)? {
            CategoricalCode::Hashed(h) => {
                meta.set(2 * idx, h);
                meta.set(2 * idx + 1, h);
            }
            CategoricalCode::DummyColumn(slot) => {
                for s in self.dummy_block(attribute).expect("dummy mode") {
                    meta.clear(s);
                }
                meta.set(slot, 1.0);
                meta.set(slot + 1, 1.0);
            }
            CategoricalCode::UnseenValue => {
                for s in self.dummy_block(attribute).expect("dummy mode") {
                    meta.clear(s);
                }
                warn!("value `{value}` of `{attribute}` was not seen at training time; encoded as missing");
            }
        }
        Ok(())
    }
}

/// Encodes a single categorical value; see [`CategoricalEncoder::encode`].
pub fn encode_categorical(
    attr: &crate::schema::Attribute,
    value: &str,
    enc: &CategoricalEncoder,
) -> Result<CategoricalCode, VectorizeError> {
    if attr.kind != AttributeKind::Categorical {
        return Err(VectorizeError::NotCategorical(attr.name.clone()));
    }
    enc.encode(&attr.name, value)
}

/// Meta-vector of a query without GROUP BY.
pub fn vectorize_spa(
    q: &ParsedQuery,
    schema: &DatasetSchema,
    enc: &CategoricalEncoder,
) -> Result<MetaVector<f64>, VectorizeError> {
    if !q.group_by.is_empty() {
        return Err(VectorizeError::GroupByPresent);
    }
    vectorize_predicates(q, schema, enc)
}

fn vectorize_predicates(
    q: &ParsedQuery,
    schema: &DatasetSchema,
    enc: &CategoricalEncoder,
) -> Result<MetaVector<f64>, VectorizeError> {
    if enc.base_width() != 2 * schema.d() {
        return Err(VectorizeError::SchemaMismatch);
    }
    let mut meta = MetaVector::missing(enc.width());
    for p in &q.predicates {
        let idx = schema
            .index_of(&p.attribute)
            .ok_or_else(|| VectorizeError::UnknownAttribute(p.attribute.clone()))?;
        if let Some(lb) = p.lb {
            meta.set(2 * idx, lb);
        }
        if let Some(ub) = p.ub {
            meta.set(2 * idx + 1, ub);
        }
    }
    for (attr, pattern) in &q.like_patterns {
        let idx = schema
            .index_of(attr)
            .ok_or_else(|| VectorizeError::UnknownAttribute(attr.clone()))?;
        let h = stable_hash(pattern);
        meta.set(2 * idx, h);
        meta.set(2 * idx + 1, h);
    }
    for (attr, value) in &q.categorical_equalities {
        enc.apply(schema, &mut meta, attr, value)?;
    }
    Ok(meta)
}

/// Cached DISTINCT value tuples per GROUP-BY attribute tuple.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupByCatalogue {
    entries: BTreeMap<Vec<String>, Vec<Vec<GroupValue>>>,
}

#[derive(Serialize, Deserialize)]
struct CatalogueEntryRepr {
    attributes: Vec<String>,
    values: Vec<Vec<GroupValue>>,
}

impl Serialize for GroupByCatalogue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<CatalogueEntryRepr> = self
            .entries
            .iter()
            .map(|(k, v)| CatalogueEntryRepr {
                attributes: k.clone(),
                values: v.clone(),
            })
            .collect();
        serde::Serialize::serialize(&serde_json::json!({ "entries": list }), s)
    }
}

impl<'de> Deserialize<'de> for GroupByCatalogue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            entries: Vec<CatalogueEntryRepr>,
        }
        let repr = Repr::deserialize(d)?;
        let mut cat = GroupByCatalogue::default();
        for e in repr.entries {
            if e.values.is_empty() {
                return Err(serde::de::Error::custom("group-by catalogue entry with no values"));
            }
            if e.values.iter().any(|t| t.len() != e.attributes.len()) {
                return Err(serde::de::Error::custom("group value tuple width differs from its key"));
            }
            cat.insert(e.attributes, e.values);
        }
        Ok(cat)
    }
}

impl GroupByCatalogue {
    /// Caches the distinct tuples for `attributes` (sorted, deduplicated).
    /// Empty value lists are ignored.
    pub fn insert(&mut self, attributes: Vec<String>, mut values: Vec<Vec<GroupValue>>) {
        if values.is_empty() {
            return;
        }
        values.sort();
        values.dedup();
        self.entries.insert(attributes, values);
    }

    /// Adds one observed tuple.
    pub fn observe(&mut self, attributes: &[String], tuple: Vec<GroupValue>) {
        let list = self.entries.entry(attributes.to_vec()).or_default();
        if let Err(pos) = list.binary_search(&tuple) {
            list.insert(pos, tuple);
        }
    }

    pub fn get(&self, attributes: &[String]) -> Option<&[Vec<GroupValue>]> {
        self.entries.get(attributes).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<String>> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Populates a missing entry from a DISTINCT source (training mode).
    pub fn ensure(&mut self, attributes: &[String], source: &dyn DistinctSource) -> Result<(), VectorizeError> {
        if self.entries.contains_key(attributes) {
            return Ok(());
        }
        let values = source.distinct(attributes)?;
        self.insert(attributes.to_vec(), values);
        Ok(())
    }
}

/// Anything that can answer `SELECT DISTINCT attrs`.
pub trait DistinctSource {
    fn distinct(&self, attributes: &[String]) -> Result<Vec<Vec<GroupValue>>, VectorizeError>;
}

/// One meta-vector per cached group tuple. Group attributes become
/// equalities on their encoded value; all other slots match the ungrouped
/// query.
pub fn expand_group_by(
    q: &ParsedQuery,
    cat: &GroupByCatalogue,
    schema: &DatasetSchema,
    enc: &CategoricalEncoder,
) -> Result<Vec<(MetaVector<f64>, Vec<GroupValue>)>, VectorizeError> {
    if q.group_by.is_empty() {
        return Err(VectorizeError::NoGroupBy);
    }
    let tuples = cat
        .get(&q.group_by)
        .ok_or_else(|| VectorizeError::MissingCatalogueEntry(q.group_by.join(", ")))?;
    let base = vectorize_predicates(q, schema, enc)?;
    tuples
        .iter()
        .map(|tuple| {
            let meta = group_vector(&base, &q.group_by, tuple, schema, enc)?;
            Ok((meta, tuple.clone()))
        })
        .collect()
}

/// Applies one group tuple on top of the ungrouped meta-vector.
pub fn group_vector(
    base: &MetaVector<f64>,
    attributes: &[String],
    tuple: &[GroupValue],
    schema: &DatasetSchema,
    enc: &CategoricalEncoder,
) -> Result<MetaVector<f64>, VectorizeError> {
    let mut meta = base.clone();
    for (attr, value) in attributes.iter().zip(tuple) {
        let a = schema
            .attribute(attr)
            .ok_or_else(|| VectorizeError::UnknownAttribute(attr.clone()))?;
        let idx = schema.index_of(attr).unwrap();
        match (a.kind, value) {
            (AttributeKind::Numeric, GroupValue::Number(v)) => {
                meta.set(2 * idx, *v);
                meta.set(2 * idx + 1, *v);
            }
            (AttributeKind::Categorical, GroupValue::Text(s)) => enc.apply(schema, &mut meta, attr, s)?,
            (AttributeKind::Categorical, GroupValue::Number(v)) => {
                enc.apply(schema, &mut meta, attr, &v.to_string())?
            }
            (AttributeKind::Numeric, GroupValue::Text(s)) => {
                return Err(VectorizeError::GroupValueType {
                    attribute: attr.clone(),
                    value: s.clone(),
                })
            }
        }
    }
    Ok(meta)
}
