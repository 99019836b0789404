use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported geometry in record {index}: shape type {shape_type}")]
    UnsupportedGeometry { index: usize, shape_type: i32 },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("lookup error: unknown id {0}")]
    Lookup(String),

    #[error("state error: {0}")]
    State(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::UnsupportedGeometry { .. } => "unsupported-geometry",
            Error::Geometry(_) => "geometry",
            Error::Coverage(_) => "coverage",
            Error::Capacity(_) => "capacity",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Compatibility(_) => "compatibility",
            Error::Data(_) => "data",
            Error::Lookup(_) => "lookup",
            Error::State(_) => "state",
            Error::Io { .. } => "io",
        }
    }
}
