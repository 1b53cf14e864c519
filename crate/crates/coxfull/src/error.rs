use thiserror::Error;

/// Errors raised while ingesting or validating survival data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}` as a number")]
    BadNumber {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("subject `{0}`: event flag must be 0 or 1")]
    BadEventFlag(String),
    #[error("subject `{0}`: intervals must be contiguous with strictly increasing times")]
    NonMonotoneTimes(String),
    #[error("subject `{0}`: zero-length interval (start == stop)")]
    EmptyInterval(String),
    #[error("subject `{0}`: first interval starts after 0 (left truncation is not supported)")]
    LeftTruncated(String),
    #[error("subject `{0}`: event flagged before the final interval")]
    EventBeforeEnd(String),
    #[error("subject `{0}`: cluster id changes across rows")]
    InconsistentCluster(String),
    #[error("dataset has no subjects")]
    Empty,
    #[error("dataset has no events")]
    NoEvents,
    #[error("total exposure time is zero")]
    ZeroExposure,
    #[error("unknown covariate column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` must be constant within each subject to carry a time-varying effect")]
    NotSubjectConstant(String),
    #[error("column `{0}` is assigned to more than one model term")]
    DuplicateTerm(String),
    #[error("factor column `{column}`: unknown level `{level}`")]
    UnknownLevel { column: String, level: String },
}

/// Errors raised by invalid model or algorithm configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("basis needs at least degree + 1 functions (got M = {m}, degree = {degree})")]
    BasisTooSmall { m: usize, degree: usize },
    #[error("difference penalty needs at least 3 basis functions (got {0})")]
    PenaltyTooSmall(usize),
    #[error("basis domain end must be positive (got {0})")]
    BadDomain(f64),
    #[error("evaluation point {t} outside the basis domain [0, {t_max}]")]
    OutOfDomain { t: f64, t_max: f64 },
    #[error("quadrature order must be at least 1")]
    BadQuadratureOrder,
    #[error("smoothing parameters must be nonnegative")]
    NegativeZeta,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("penalty weights must be finite and nonnegative")]
    BadWeights,
    #[error("penalty grid needs at least 2 points")]
    GridTooShort,
    #[error("cross-validation needs at least 2 folds and one cluster per fold")]
    BadFolds,
    #[error("model contains no penalized groups")]
    NothingPenalized,
    #[error("empty episode list")]
    NoEpisodes,
    #[error("{0}")]
    Invalid(String),
}

/// Numerical failures during estimation.
#[derive(Debug, Error)]
pub enum NumericError {
    #[error("linear predictor overflow for subject `{0}`")]
    Overflow(String),
    #[error("objective became non-finite")]
    NonFinite,
    #[error("penalized information matrix is singular even after ridge escalation")]
    SingularFisher,
    #[error("unpenalized fit for adaptive weights failed even with ridge fallback")]
    WeightsFitFailed,
    #[error("cross-validation fold without events after re-randomization")]
    FoldWithoutEvents,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
