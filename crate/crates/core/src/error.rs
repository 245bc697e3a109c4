use thiserror::Error;

/// Errors raised by estimation, I/O and simulation routines.
#[derive(Debug, Error)]
pub enum UfmError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("non-numeric cell at row {row}, column {col}: {value:?}")]
    NonNumericCell {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("ragged input: row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("duplicate cell ({row_id}, {col_id})")]
    DuplicateCell { row_id: String, col_id: String },

    #[error("missing cell ({row_id}, {col_id})")]
    MissingCell { row_id: String, col_id: String },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("rank {rank} too large for a {n}x{t} panel (need rank < min(N,T)/2)")]
    RankTooLarge { rank: usize, n: usize, t: usize },

    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),

    #[error("half-panel normalization degenerated: {0}")]
    SubsampleRankDeficient(String),

    #[error("loading Gram matrix is numerically singular (condition number {0:.3e})")]
    SingularPhi(f64),

    #[error("regressors have zero variance")]
    DegenerateRegressors,
}

pub type Result<T> = std::result::Result<T, UfmError>;
