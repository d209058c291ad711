//! Interaction records, the synthetic multi-region generator, feature
//! splitting and JSONL persistence.

mod generator;
mod jsonl;
mod records;
mod split;

pub use generator::{generate, FunnelRates, GeneratorConfig};
pub use jsonl::{read_jsonl, read_jsonl_from, write_jsonl, write_jsonl_to, DataHeader};
pub use records::{
    query_fraction, record_count, DataSplit, FunnelLabels, InteractionRecord, Platform, QueryGroup,
    Task,
};
pub use split::{
    ks_statistic_sorted, split_features, wasserstein_sorted, DistanceMetric, FeatureSplit,
    DEFAULT_THRESHOLD, MIN_REGION_SAMPLES,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: candidate {candidate} of {query_id} violates the click >= cart >= purchase funnel")]
    FunnelViolation {
        line: usize,
        query_id: String,
        candidate: usize,
    },
    #[error("data file has no header line")]
    MissingHeader,
    #[error("query group {0} has no candidates")]
    EmptyGroup(String),
    #[error("record {other} does not belong to group {query_id}")]
    InconsistentGroup { query_id: String, other: String },
    #[error("feature split needs at least two regions with enough samples, found {0}")]
    TooFewRegions(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
