//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any weakrank operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// No token survived the frequency threshold.
    #[error("no token appears more than {min_count} times; vocabulary is empty")]
    EmptyVocab { min_count: u64 },

    /// An attribute id is outside the vocabulary.
    #[error("attribute id {id} out of range for {num_classes} classes")]
    InvalidAttributeId { id: usize, num_classes: usize },

    /// An input contained NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFiniteInput { context: &'static str },

    /// Batch/target or tensor shapes disagree.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A forward pass produced NaN or infinity.
    #[error("non-finite activation during forward pass")]
    NonFiniteActivation,

    /// Training loss became non-finite.
    #[error("training diverged at step {step}: loss is non-finite")]
    DivergenceDetected { step: usize },

    /// A row with zero Euclidean norm cannot be normalized.
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),

    /// Covariance needs at least two rows.
    #[error("need at least 2 rows to fit statistics, got {rows}")]
    TooFewRows { rows: usize },

    /// The symmetric eigendecomposition did not converge.
    #[error("eigendecomposition failed to converge")]
    EigenFailure,

    /// Vector or matrix dimensions disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Ensemble members do not share the same id list.
    #[error("embedding id lists differ at row {row}")]
    IdMismatch { row: usize },

    /// An ensemble must have at least one member.
    #[error("empty ensemble")]
    EmptyEnsemble,

    /// Cosine distance is undefined for the zero vector.
    #[error("zero vector in cosine distance")]
    ZeroVector,

    /// More candidates requested than database rows.
    #[error("top_n {top_n} exceeds database size {db_len}")]
    TopNTooLarge { top_n: usize, db_len: usize },

    /// A candidate list is too short to re-rank.
    #[error("query {query_id}: {got} candidates, re-ranking needs at least {needed}")]
    InsufficientCandidates {
        query_id: String,
        needed: usize,
        got: usize,
    },

    /// Ground truth lists must be nonempty.
    #[error("query {0} has an empty relevant set")]
    EmptyRelevantSet(String),

    /// A ranked query has no ground-truth entry.
    #[error("no ground truth for query {0}")]
    MissingGroundTruth(String),

    /// A ranked list names the same database item twice.
    #[error("query {query_id}: duplicate db id {db_id} in ranked list")]
    DuplicateDbId { query_id: String, db_id: String },

    /// A binary file is malformed.
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    /// A binary file has an unsupported version.
    #[error("{path}: unsupported format version {got} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        got: u32,
    },

    /// A text input (TSV, config) is malformed.
    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Configuration values violate an invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A required input file does not exist.
    #[error("missing input file: {0}")]
    MissingInput(PathBuf),

    /// A pipeline stage failed.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 for validation errors, 2 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::MissingInput(_) => 1,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
