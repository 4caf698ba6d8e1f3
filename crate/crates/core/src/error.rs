//! Error type shared by every module in the crate.
//!
//! Each variant maps to one failure class; messages are prefixed with the
//! module that raised them so CLI diagnostics point at the responsible stage.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of a family, link,
    /// or quasi-likelihood evaluation.
    #[error("expfam: {what} out of domain for {context}: {value}")]
    Domain {
        context: String,
        what: String,
        value: f64,
    },

    /// A correlation parameter or parameter vector is invalid.
    #[error("correlation: {0}")]
    Param(String),

    /// A matrix that must be positive semidefinite is not.
    #[error("{module}: matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    Psd { module: &'static str, min_eig: f64 },

    /// A matrix that must be invertible is numerically singular.
    #[error("{module}: singular {what}")]
    Singular { module: &'static str, what: String },

    /// Invalid configuration: unknown names, malformed formula terms,
    /// incompatible option combinations.
    #[error("config: {0}")]
    Config(String),

    /// The design matrix does not have full column rank.
    #[error("design: rank-deficient design matrix; aliased columns: {}", aliased.join(", "))]
    Rank { aliased: Vec<String> },

    /// The scoring loop exhausted its iteration budget.
    #[error(
        "engine: no convergence after {iterations} iterations (last relative change {last:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        last: f64,
        trace: Vec<f64>,
    },

    /// A structure that needs equal occasion counts saw ragged data.
    #[error("engine: {structure} requires balanced data: {detail}")]
    Balance { structure: String, detail: String },

    /// A variance or dispersion needed as a divisor is zero or negative.
    #[error("{module}: degenerate variance: {what}")]
    DegenerateVariance { module: &'static str, what: String },

    /// Fewer observations than coefficients.
    #[error("engine: {n_obs} observations cannot support {n_params} coefficients")]
    DegreesOfFreedom { n_obs: usize, n_params: usize },

    /// Not enough residual pairs to estimate a correlation parameter.
    #[error("engine: insufficient data: {0}")]
    InsufficientData(String),

    /// Input data violates the expected table schema.
    #[error("data: {0}")]
    Schema(String),

    /// Two rows address the same (subject, period, occasion) cell.
    #[error(
        "data: duplicate observation for subject {subject:?}, period {period}, occasion {occasion}"
    )]
    Duplicate {
        subject: String,
        period: usize,
        occasion: usize,
    },

    /// A CSV field failed to parse.
    #[error("data: row {row}: cannot parse {column} from {value:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    /// Every candidate in a structure comparison failed to fit.
    #[error("selection: all candidate structures failed to converge")]
    AllFailed,

    /// Rejection sampling exhausted its budget.
    #[error("simulation: no positive semidefinite between-period matrix after {attempts} draws")]
    Rejection { attempts: usize },

    /// Filesystem failure while reading or writing artifacts.
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Short class name used in CLI diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "DomainError",
            Error::Param(_) => "ParamError",
            Error::Psd { .. } => "PsdError",
            Error::Singular { .. } => "SingularError",
            Error::Config(_) => "ConfigError",
            Error::Rank { .. } => "RankError",
            Error::NonConvergence { .. } => "NonConvergenceError",
            Error::Balance { .. } => "BalanceError",
            Error::DegenerateVariance { .. } => "DegenerateVarianceError",
            Error::DegreesOfFreedom { .. } => "DegreesOfFreedomError",
            Error::InsufficientData(_) => "InsufficientDataError",
            Error::Schema(_) => "SchemaError",
            Error::Duplicate { .. } => "DuplicateError",
            Error::Parse { .. } => "ParseError",
            Error::AllFailed => "AllFailedError",
            Error::Rejection { .. } => "RejectionError",
            Error::Io(_) => "IoError",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
