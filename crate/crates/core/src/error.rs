use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants group into the three classes the CLI maps onto exit codes:
/// configuration problems, data problems, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema violation at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("too few usable clusters: need at least {needed}, found {found}")]
    TooFewClusters { needed: usize, found: usize },

    #[error("degenerate ranks: {0}")]
    DegenerateRanks(String),

    #[error("no member has an observed outcome")]
    EmptyResult,

    #[error("invalid category probability {value} for category {category}")]
    InvalidProbability { category: usize, value: f64 },

    #[error("category {category} outside 1..={max}")]
    CategoryRange { category: u8, max: u8 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("cutpoints not identified: {0}")]
    Unidentified(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

/// Broad error class, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::TomlDe(_) | Error::TomlSer(_) => {
                ErrorKind::Config
            }
            Error::Data(_)
            | Error::Schema { .. }
            | Error::TooFewClusters { .. }
            | Error::EmptyResult
            | Error::CategoryRange { .. }
            | Error::Unidentified(_)
            | Error::Dimension(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::DegenerateRanks(_)
            | Error::InvalidProbability { .. }
            | Error::Singular(_)
            | Error::Calibration(_)
            | Error::Sampler(_)
            | Error::Failed(_) => ErrorKind::Numerical,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
