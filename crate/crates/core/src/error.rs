use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: row {row}: unknown level {level} for indicator {indicator}")]
    UnknownPolicyLevel {
        path: PathBuf,
        row: usize,
        indicator: String,
        level: String,
    },

    #[error("no rows for region {region} in {path}")]
    EmptyRegion { path: PathBuf, region: String },

    #[error("dynamics error on day {day}: compartment {compartment} = {value:e} (beta too large for a daily step)")]
    Dynamics {
        day: usize,
        compartment: &'static str,
        value: f64,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stringency weights undefined: total NPI effect is zero")]
    UndefinedWeights,

    #[error("ratio undefined: NPI cost over the window is zero")]
    UndefinedRatio,

    #[error("missing artifact {path}; produce it with `npicost {producer}`")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
