use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty sample set")]
    EmptySamples,

    #[error("non-finite value {0} in sample set")]
    NonFiniteSample(f64),

    #[error("non-finite observation {0}")]
    NonFiniteObservation(f64),

    #[error("probability {0} outside (0, 1]")]
    InvalidProbability(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown scoring rule '{0}'")]
    UnknownRule(String),

    #[error("categorical cardinality exceeds cutoff: column '{column}' has {found} categories, cutoff is {cutoff}")]
    CategoricalCardinality {
        column: String,
        found: usize,
        cutoff: usize,
    },

    #[error("split would leave an empty side")]
    EmptySplitSide,

    #[error("missing value in column '{column}' at row {row}")]
    MissingValue { column: String, row: usize },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("missing response column '{0}'")]
    MissingResponseColumn(String),

    #[error("non-numeric response '{value}' at row {row}")]
    NonNumericResponse { row: usize, value: String },

    #[error("ragged row at line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("column '{column}' forced numeric but cell '{value}' at row {row} is not a number")]
    NonNumericCell {
        column: String,
        row: usize,
        value: String,
    },

    #[error("unknown column '{0}'")]
    UnknownColumn(String),

    #[error("model format version {found} is not supported (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("malformed model: {0}")]
    MalformedModel(String),

    #[error("missing experiment cell: {0}")]
    MissingCell(String),

    #[error("need at least {needed} replicates, found {found}")]
    TooFewReplicates { needed: usize, found: usize },

    #[error("fit failed for replicate {replicate}, build {build}, kappa {kappa}: {source}")]
    Fit {
        replicate: usize,
        build: String,
        kappa: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
