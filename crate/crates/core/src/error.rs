use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("degenerate transition row {row}: no allowed entries on a non-terminal row")]
    DegenerateRow { row: usize },

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("token id {id} out of vocabulary (V = {vocab})")]
    Vocab { id: u32, vocab: usize },

    #[error("oracle too large: C({l},{n}) = {count} exceeds the enumeration cap {cap}")]
    OracleTooLarge {
        l: usize,
        n: usize,
        count: u128,
        cap: u128,
    },

    #[error("infeasible target: length {n} exceeds decoder length {l}")]
    InfeasibleTarget { n: usize, l: usize },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("ranked sample set is not strictly ascending by reward at index {index}")]
    Ordering { index: usize },

    #[error("degenerate baseline: reward loss needs K >= 2 samples, got {k}")]
    DegenerateBaseline { k: usize },

    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("malformed line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
