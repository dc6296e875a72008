use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty query group (qid {qid:?})")]
    EmptyGroup { qid: String },

    #[error("query {qid}: doc {doc_id:?} has {found} features, expected {expected}")]
    FeatureLength {
        qid: String,
        doc_id: String,
        found: usize,
        expected: usize,
    },

    #[error("query {qid}: duplicate doc id {doc_id:?}")]
    DuplicateDoc { qid: String, doc_id: String },

    #[error("query {qid}: non-finite input in row {row}")]
    NonFinite { qid: String, row: usize },

    #[error("query {qid}: label {label} exceeds grade range 0..={grade_max}")]
    LabelRange { qid: String, label: u32, grade_max: u32 },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("decode exhausted: every candidate is masked")]
    DecodeExhausted,

    #[error("cut position {x} outside 1..={len}")]
    CutOutOfRange { x: usize, len: usize },

    #[error("trace index {index} out of range for a list of {len} docs")]
    TraceIndex { index: usize, len: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
