use std::path::PathBuf;
use std::time::Duration;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the stage that raises them; callers that need to
/// branch (the sampler discarding a draw, the CLI choosing an exit code)
/// match on the variant rather than the message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },
    #[error("integrity error in database `{db_id}`: {message}")]
    Integrity { db_id: String, message: String },
    #[error("no foreign-key path connects tables {tables:?} in `{db_id}`")]
    NoJoinPath { db_id: String, tables: Vec<String> },

    #[error("unsupported syntax: {0}")]
    UnsupportedSyntax(String),
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("cannot resolve `{0}`")]
    Resolution(String),
    #[error("invalid slot assignment: {0}")]
    Assignment(String),

    #[error("no parseable examples to fit a template distribution")]
    EmptyDistribution,
    #[error("coverage is undefined for an empty evaluation corpus")]
    UndefinedCoverage,
    #[error("no template in the distribution can be filled in `{db_id}`")]
    Unfillable { db_id: String },
    #[error("domain error: {0}")]
    Domain(String),

    #[error("column {table}.{column} has no non-null values")]
    EmptyColumn { table: String, column: String },
    #[error("sampling exhausted after {attempts} attempts in `{db_id}`: {diagnostics}")]
    SamplingExhausted {
        db_id: String,
        attempts: usize,
        diagnostics: String,
    },

    #[error("execution error: {0}")]
    Execution(String),
    #[error("query exceeded its {0:?} budget")]
    Timeout(Duration),
    #[error("statement is not read-only")]
    RejectedStatement,
    #[error("database generation failed: {0}")]
    Generation(String),

    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("adapter protocol error: {0}")]
    Protocol(String),
    #[error("prediction `{sql}` is not valid SQL: {message}")]
    InvalidPrediction { sql: String, message: String },

    #[error("gold has {gold} examples but predictions have {pred}")]
    Alignment { gold: usize, pred: usize },
    #[error("gold query is unusable: {0}")]
    Gold(String),

    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}
