use thiserror::Error;

pub type Result<T> = std::result::Result<T, AifError>;

#[derive(Debug, Error)]
pub enum AifError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank-deficient system (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error(
        "degenerate gradient: input gradient is zero{}",
        .sample.map(|s| format!(" at sample {s}")).unwrap_or_default()
    )]
    DegenerateGradient { sample: Option<usize> },

    #[error("empty sum: every sample has a zero input gradient")]
    EmptySum,

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("input row {row} is not unit-normalized (norm {norm})")]
    Normalization { row: usize, norm: f64 },

    #[error("bracket failure: {0}")]
    Bracket(String),

    #[error("division error: {0}")]
    Division(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl AifError {
    /// Process exit code for the CLI: 2 for configuration or input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            AifError::Config(_)
            | AifError::Parse { .. }
            | AifError::Io(_)
            | AifError::Domain(_)
            | AifError::Dimension(_)
            | AifError::Normalization { .. }
            | AifError::Serde(_) => 2,
            AifError::RankDeficient { .. }
            | AifError::DegenerateGradient { .. }
            | AifError::EmptySum
            | AifError::DegenerateCovariance(_)
            | AifError::Bracket(_)
            | AifError::Division(_) => 3,
        }
    }
}
