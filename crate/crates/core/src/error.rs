use std::fmt;

use thiserror::Error;

use crate::data::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset failed validation: {}", ViolationList(.0))]
    Validation(Vec<Violation>),

    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Divergence { epoch: usize, batch: usize, message: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("rank table incomplete: missing cell {0}")]
    IncompleteTable(String),

    #[error("filter produced an empty dataset: {0}")]
    EmptyFilter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl fmt::Display, source: std::io::Error) -> Self {
        Error::Io { path: path.to_string(), source }
    }

    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape { op, shapes: shapes.into() }
    }
}

struct ViolationList<'a>(&'a [Violation]);

impl fmt::Display for ViolationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown = self.0.iter().take(5);
        for (k, v) in shown.enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        if self.0.len() > 5 {
            write!(f, "; ... ({} total)", self.0.len())?;
        }
        Ok(())
    }
}
