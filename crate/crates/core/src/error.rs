use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DdpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DdpError {
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(String),
    #[error("non-finite gradient in slot `{0}`")]
    NonFiniteGrad(String),
    #[error("model state contains non-finite values in slot `{0}`")]
    NonFiniteState(String),

    #[error("raw instance names field `{0}` which is not in the schema")]
    UnknownField(String),
    #[error("schema field `{0}` is missing from the raw instance")]
    MissingField(String),
    #[error("multi-hot field `{0}` has no values")]
    EmptyMultiHot(String),
    #[error("index {index} out of range for `{what}` (limit {limit})")]
    IndexOutOfRange { what: String, index: usize, limit: usize },
    #[error("scatter_grad called without an active lookup")]
    NoActiveLookup,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("forward cache is stale (parameters changed since the forward pass)")]
    StaleCache,

    #[error("empty batch")]
    EmptyBatch,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("slot `{0}` has no update group")]
    UntaggedSlot(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stream contains no valid instances")]
    EmptyStream,
    #[error("period {period} outside 1..={periods}")]
    PeriodOutOfRange { period: usize, periods: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("warm-up received no instances")]
    EmptyWarmup,
    #[error("incremental update requires a warmed-up model")]
    NoTeacher,
    #[error("stream has {got} periods, protocol needs {need}")]
    InsufficientPeriods { got: usize, need: usize },
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("schema digest mismatch: checkpoint {checkpoint}, data {data}")]
    SchemaDigestMismatch { checkpoint: String, data: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("{0} test instances were also seen in training")]
    Leakage(usize),

    #[error("AUC needs at least one positive and one negative label")]
    DegenerateLabels,
    #[error("empty scored set")]
    EmptySet,
    #[error("schema has no item field")]
    NoItemField,

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
