use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter width {got} does not match {expected} expected for this map kind")]
    Width { expected: usize, got: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sheaf is not hosted on this hypergraph: {0}")]
    HostMismatch(String),

    #[error("normalizer block for node {node} is singular (smallest eigenvalue {eigenvalue:e})")]
    SingularBlock { node: usize, eigenvalue: f64 },

    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("matrix dimension {0} exceeds the dense eigensolver limit")]
    TooLarge(usize),

    #[error("spectrum has no eigenvalue above the zero tolerance")]
    AllZeroSpectrum,

    #[error("degenerate point: hyperedge {0} has no unique most discrepant pair")]
    DegeneratePoint(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported operation in backward pass: {0}")]
    UnsupportedOp(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
