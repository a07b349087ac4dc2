use thiserror::Error;

/// Errors produced anywhere in the forecasting and reconciliation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cycle detected in hierarchy at node `{0}`")]
    Cycle(String),

    #[error("orphan node `{0}`: not connected to the rest of the hierarchy")]
    OrphanNode(String),

    #[error("inconsistent level assignment for node `{node}`: {reason}")]
    InconsistentLevel { node: String, reason: String },

    #[error("node `{0}` has more than one parent; only tree hierarchies are supported")]
    MultipleParents(String),

    #[error("duplicate edge {parent} -> {child}")]
    DuplicateEdge { parent: String, child: String },

    #[error("invalid edge sign {0}; expected -1 or 1")]
    InvalidSign(i64),

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("empty hierarchy")]
    EmptyHierarchy,

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("duplicate observation for series `{series}` at `{timestamp}`")]
    DuplicateObservation { series: String, timestamp: String },

    #[error("non-numeric value `{value}` on line {line}")]
    NonNumeric { value: String, line: usize },

    #[error("no timestamp is shared by every series")]
    EmptyIntersection,

    #[error("series `{0}` missing from panel")]
    MissingSeries(String),

    #[error("series too short: length {len}, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quantile level {0} outside (0, 1)")]
    InvalidQuantile(f64),

    #[error("quantile grid must contain the median 0.5")]
    MissingMedian,

    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { loss: f64, epoch: usize },

    #[error("training diverged at epoch {epoch}: loss {loss:e} exceeds {limit:e}")]
    Divergence { epoch: usize, loss: f64, limit: f64 },

    #[error("stage `{stage}` failed at node `{node}`: {source}")]
    Stage {
        node: String,
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("zero ground-truth value at position {0}; MAPE is undefined")]
    ZeroTarget(usize),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("non-stationary AR coefficients after {0} attempts")]
    NonStationary(usize),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn mismatch(expected: usize, actual: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected,
            actual,
            context: context.into(),
        }
    }

    pub(crate) fn at_stage(self, node: &str, stage: &str) -> Self {
        Error::Stage {
            node: node.to_string(),
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
