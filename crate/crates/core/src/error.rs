use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("entity {entity} has no image features")]
    MissingFeatures { entity: usize },

    #[error("every {slot} replacement of ({h}, {r}, {t}) is a known true triple")]
    SamplingExhausted {
        h: usize,
        r: usize,
        t: usize,
        slot: &'static str,
    },

    #[error("unknown {kind} name {name:?}")]
    UnknownName { kind: &'static str, name: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("requested {requested} triples for relation {relation} but only {available} are distinct")]
    GenerationShortfall {
        relation: usize,
        requested: usize,
        available: usize,
    },

    #[error("triple ({h}, {r}, {t}) appears in more than one split")]
    OverlappingSplits { h: usize, r: usize, t: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
