use thiserror::Error;

/// Coarse classification of failures, surfaced by the CLI on exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Format,
    Infeasible,
    Numeric,
    Io,
}

impl std::fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorCategory::Format => "format",
            ErrorCategory::Infeasible => "infeasible",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ClarError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("structural error in sentence ending at line {line}: {msg}")]
    Structure { line: usize, msg: String },

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("frequency table is empty")]
    EmptyTable,

    #[error("infeasible matching: {0}")]
    Infeasible(String),

    #[error("invalid cost entry at ({row}, {col}): {value}")]
    InvalidCost { row: usize, col: usize, value: f64 },

    #[error("instance too large for exhaustive enumeration ({rows}x{cols})")]
    TooLarge { rows: usize, cols: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("failed to converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    #[error("unknown language tag {0:?}")]
    UnknownLanguage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ClarError {
    pub fn category(&self) -> ErrorCategory {
        use ClarError::*;
        match self {
            Parse { .. } | Structure { .. } | Format { .. } | Config(_) | UnknownLanguage(_) => {
                ErrorCategory::Format
            }
            Dimension(_) | EmptyTable | Infeasible(_) | TooLarge { .. } | Degenerate(_)
            | EmptyBatch => ErrorCategory::Infeasible,
            InvalidCost { .. }
            | Singular(_)
            | NoConvergence { .. }
            | UndefinedCorrelation(_)
            | Divergence { .. } => ErrorCategory::Numeric,
            Io(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClarError>;
