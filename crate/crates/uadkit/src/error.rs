use std::path::PathBuf;

/// Errors produced by tensor operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {context} (lhs {lhs:?}, rhs {rhs:?})")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// Errors produced reading or writing volume and checkpoint files.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },
    #[error("truncated or inconsistent payload in {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("malformed section in {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Errors from parsing flat key=value configuration files.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing required config key `{0}`")]
    MissingKey(&'static str),
    #[error("invalid value for `{key}`: {detail}")]
    InvalidValue { key: String, detail: String },
    #[error("malformed line {line}: `{text}` (expected key=value)")]
    MalformedLine { line: usize, text: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Top-level error for pipeline and training entry points.
#[derive(Debug, thiserror::Error)]
pub enum UadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = UadError> = std::result::Result<T, E>;
