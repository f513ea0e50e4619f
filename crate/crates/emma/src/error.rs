//! Error taxonomy shared across the toolkit.

use std::fmt;

/// Toolkit-wide error type.
///
/// Variants map onto the distinct failure classes surfaced by the CLI:
/// each is reported with a stable one-line prefix so callers can match on
/// the error kind without parsing free text.
#[derive(Debug)]
pub enum EmmaError {
    /// Tensor extents or channel counts do not line up.
    Dimension(String),
    /// Input data is unusable (empty mask, zero variance, bad labels, ...).
    Data(String),
    /// The caller violated an API contract (non-scalar loss, label out of range, ...).
    Usage(String),
    /// A parameter value is outside its documented domain.
    Parameter(String),
    /// A file is not in the expected container/checkpoint format.
    Format(String),
    /// Stored checksum does not match the payload.
    Crc(String),
    /// Configuration file is invalid.
    Config(String),
    /// Numerical failure during optimization (NaN gradient or loss).
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for EmmaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmmaError::Dimension(m) => write!(f, "dimension: {m}"),
            EmmaError::Data(m) => write!(f, "data: {m}"),
            EmmaError::Usage(m) => write!(f, "usage: {m}"),
            EmmaError::Parameter(m) => write!(f, "parameter: {m}"),
            EmmaError::Format(m) => write!(f, "format: {m}"),
            EmmaError::Crc(m) => write!(f, "crc: {m}"),
            EmmaError::Config(m) => write!(f, "config: {m}"),
            EmmaError::Numeric(m) => write!(f, "numeric: {m}"),
            EmmaError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for EmmaError {}

impl From<std::io::Error> for EmmaError {
    fn from(e: std::io::Error) -> Self {
        EmmaError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, EmmaError>;

/// Short machine-parsable kind tag, used as the CLI error prefix.
impl EmmaError {
    pub fn kind(&self) -> &'static str {
        match self {
            EmmaError::Dimension(_) => "dimension",
            EmmaError::Data(_) => "data",
            EmmaError::Usage(_) => "usage",
            EmmaError::Parameter(_) => "parameter",
            EmmaError::Format(_) => "format",
            EmmaError::Crc(_) => "crc",
            EmmaError::Config(_) => "config",
            EmmaError::Numeric(_) => "numeric",
            EmmaError::Io(_) => "io",
        }
    }
}
