use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("input contains no data rows")]
    EmptyInput,

    #[error("audiogram has no measured thresholds")]
    EmptyAudiogram,

    #[error("invalid speech measurement: {0}")]
    InvalidSpeech(String),

    #[error("degenerate abscissae: fit points must have distinct levels")]
    DegenerateAbscissae,

    #[error("non-positive slope")]
    NonPositiveSlope,

    #[error("no positive slope in the SII-level curve")]
    NoPositiveSlope,

    #[error("WRS {0}% has no entry in the confidence table")]
    MissingConfidence(f64),

    #[error("upper and lower levels must differ")]
    ZeroLevelSpan,

    #[error("sample must not be empty")]
    EmptySample,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("both samples have zero variance")]
    ZeroVariance,

    #[error("collinear design matrix (condition number {condition:.3e})")]
    Collinear { condition: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid band table: {0}")]
    BandTable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    ///
    /// 2 for configuration problems, 3 for data problems, 4 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::BandTable(_) => 2,
            Error::Row { .. }
            | Error::EmptyInput
            | Error::EmptyAudiogram
            | Error::InvalidSpeech(_)
            | Error::MissingConfidence(_)
            | Error::InsufficientData(_)
            | Error::Csv(_)
            | Error::Json(_) => 3,
            _ => 4,
        }
    }

    /// Stable machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Row { .. } => "row",
            Error::EmptyInput => "empty_input",
            Error::EmptyAudiogram => "empty_audiogram",
            Error::InvalidSpeech(_) => "invalid_speech",
            Error::DegenerateAbscissae => "degenerate_abscissae",
            Error::NonPositiveSlope => "non_positive_slope",
            Error::NoPositiveSlope => "no_positive_slope",
            Error::MissingConfidence(_) => "missing_confidence",
            Error::ZeroLevelSpan => "zero_level_span",
            Error::EmptySample => "empty_sample",
            Error::InsufficientData(_) => "insufficient_data",
            Error::ZeroVariance => "zero_variance",
            Error::Collinear { .. } => "collinear",
            Error::Config(_) => "config",
            Error::BandTable(_) => "band_table",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
