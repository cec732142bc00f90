use thiserror::Error;

/// Error type shared by the whole crate.
#[derive(Debug, Error)]
pub enum MaceError {
    /// Invalid model or run configuration (bad preset, shape mismatch in a
    /// declared architecture, unknown activation, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Problems with input data: unknown elements, missing labels, atoms
    /// closer than the minimum-distance guard.
    #[error("data error: {0}")]
    Data(String),

    /// Geometric preconditions violated (non-unit directions, non-orthogonal
    /// rotation matrices, out-of-range distances).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Array layout / shape mismatches between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Text formats that fail to parse; carries a 1-based line number when
    /// one is known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Linear algebra failures (rank-deficient systems without
    /// regularization and the like).
    #[error("solver error: {0}")]
    Solver(String),

    /// Training diverged (NaN loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MaceError>;

impl MaceError {
    pub fn config(msg: impl Into<String>) -> Self {
        MaceError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        MaceError::Data(msg.into())
    }
    pub fn geometry(msg: impl Into<String>) -> Self {
        MaceError::Geometry(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        MaceError::Shape(msg.into())
    }
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        MaceError::Parse { line, msg: msg.into() }
    }
    pub fn solver(msg: impl Into<String>) -> Self {
        MaceError::Solver(msg.into())
    }
}
