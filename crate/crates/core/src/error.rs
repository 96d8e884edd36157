use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unbound placeholder `{0}`")]
    UnboundPlaceholder(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: String, node: usize },

    #[error("scalar expected, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("gradient requested w.r.t. a node without requires_grad")]
    NoGrad,

    #[error("degenerate gradient: norm {norm:.3e} below tolerance {tol:.1e}")]
    DegenerateGradient { norm: f64, tol: f64 },

    #[error("label {label} out of range for {k} classes")]
    LabelRange { label: usize, k: usize },

    #[error("unsupported architecture `{0}`")]
    UnsupportedArch(String),

    #[error("architecture mismatch: file holds `{found}`, expected `{expected}`")]
    ArchMismatch { found: String, expected: String },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("dataset fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
