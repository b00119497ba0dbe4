use thiserror::Error;

#[derive(Debug, Error)]
pub enum GoceError {
    #[error("dimension mismatch: lhs {lhs:?}, rhs {rhs:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },
    #[error("KL support violation at ({row},{col}): p={p}, q={q}")]
    SupportViolation {
        row: usize,
        col: usize,
        p: f64,
        q: f64,
    },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("graph contains a cycle among nodes {nodes:?}")]
    Cycle { nodes: Vec<usize> },
    #[error("topological order inconsistent with gates: {0}")]
    OrderMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite loss at step {step}; aborting with last good checkpoint")]
    NumericAbort { step: usize },
    #[error("evaluator failed in evolution round {round}: {source}")]
    Evaluator {
        round: usize,
        #[source]
        source: Box<GoceError>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GoceError>;
