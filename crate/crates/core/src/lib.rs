//! Approximate answers to SQL aggregate queries, learned from a log of past
//! queries and their exact answers.
//!
//! A query is parsed ([`sql`]), turned into a fixed-width meta-vector
//! ([`vectorize`]) and answered by a gradient-boosted model ([`gbdt`])
//! trained for its aggregate function. Quantile models give prediction
//! intervals ([`quantile`]), [`cluster`] fits local models per workload
//! region, and [`drift`] watches for data and workload shifts.

pub mod catalogue;
pub mod cluster;
pub mod drift;
pub mod engine;
pub mod eval;
pub mod executor;
pub mod gbdt;
pub mod quantile;
pub mod scalar;
pub mod schema;
pub mod sql;
pub mod vectorize;
pub mod workload;

pub use scalar::Scalar;
pub use schema::{
    AggregateFunction, AggregateSpec, Attribute, AttributeKind, DatasetSchema, Predicate, QueryAnswerPair,
    QueryLogRecord, TrainingSet,
};

pub type MetaVector = schema::MetaVector<f64>;
pub type MetaVectorF32 = schema::MetaVector<f32>;
pub type FeatureMatrix = gbdt::FeatureMatrix<f64>;
pub type FeatureMatrixF32 = gbdt::FeatureMatrix<f32>;
pub type GbdtModel = gbdt::GbdtModel<f64>;
pub type GbdtModelF32 = gbdt::GbdtModel<f32>;
pub type IntervalModel = quantile::IntervalModel<f64>;
pub type IntervalModelF32 = quantile::IntervalModel<f32>;
pub type ClusterSet = cluster::ClusterSet<f64>;
pub type ClusterSetF32 = cluster::ClusterSet<f32>;
pub type ClusterEnsemble = cluster::ClusterEnsemble<f64>;
pub type ClusterEnsembleF32 = cluster::ClusterEnsemble<f32>;
pub type AnswerEcdf = drift::AnswerEcdf<f64>;
pub type WorkloadStats = drift::WorkloadStats<f64>;
