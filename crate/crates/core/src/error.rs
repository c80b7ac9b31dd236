use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file. `context` carries the field path and line/column.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    /// A value violates a documented invariant.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// One micro-batch's transfer takes at least as long as its compute.
    #[error("communication not hideable: T_c ({t_c:.3e} s) >= T_f ({t_f:.3e} s)")]
    CommNotHideable { t_c: f64, t_f: f64 },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
