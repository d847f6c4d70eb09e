use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed container {origin}: {detail}")]
    MalformedContainer { origin: String, detail: String },

    #[error("tensor {name}: {detail}")]
    Tensor { name: String, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("rank underflow: alpha {alpha} leaves rank 0 for a {rows}x{cols} matrix")]
    RankUnderflow { alpha: f64, rows: usize, cols: usize },

    #[error("svd did not converge{}", name.as_deref().map(|n| format!(" for tensor {n}")).unwrap_or_default())]
    SvdNonConvergence { name: Option<String> },

    #[error("hessian not positive definite at damping {damping}; retry with a larger damping fraction")]
    HessianNotPd { damping: f64 },

    #[error("zero pivot in hessian factor at column {col}; increase damping")]
    ZeroPivot { col: usize },

    #[error("target compression ratio {target} unreachable: best achievable {best:.4}")]
    UnreachableCr { target: f64, best: f64 },

    #[error("base digest mismatch: artifact built against {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn tensor(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Tensor { name: name.into(), detail: detail.into() }
    }

    pub fn container(origin: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::MalformedContainer { origin: origin.into(), detail: detail.into() }
    }

    /// Stable process exit code for pipelines: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_)
            | Error::MalformedContainer { .. }
            | Error::Tensor { .. }
            | Error::DigestMismatch { .. } => 3,
            Error::RankUnderflow { .. }
            | Error::SvdNonConvergence { .. }
            | Error::HessianNotPd { .. }
            | Error::ZeroPivot { .. }
            | Error::UnreachableCr { .. } => 4,
        }
    }
}
