use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("softmax row {row} has no unmasked entry")]
    AllMaskedRow { row: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    InvalidTokenId { id: usize, vocab: usize },

    #[error("loss mask selects no position")]
    EmptyMask,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministicFunction { first: f64, second: f64 },

    #[error("text sequence of length {len} exceeds the cap of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("text sequence is empty")]
    EmptySequence,

    #[error("{patches} patches cannot be pooled into {groups} equal groups")]
    IndivisibleGrouping { patches: usize, groups: usize },

    #[error("attention is not causal: entry (head {head}, row {row}, col {col}) is nonzero")]
    NotCausal { head: usize, row: usize, col: usize },

    #[error("vision count {n_vision} does not split a sequence of length {len}")]
    BadPartition { n_vision: usize, len: usize },

    #[error("attention contains a negative entry ({0})")]
    NegativeAttention(f64),

    #[error("top-k needs 1 <= k <= {n}, got k = {k}")]
    BadK { k: usize, n: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),

    #[error("vocabulary mismatch: student {student}, teacher {teacher}")]
    VocabMismatch { student: usize, teacher: usize },

    #[error("loss component `{0}` is not finite or negative")]
    NonFiniteComponent(&'static str),

    #[error("non-finite loss in term `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad schedule: {0}")]
    BadSchedule(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
