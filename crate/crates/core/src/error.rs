use std::path::PathBuf;

use crate::backend::AttentionSite;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed pose JSON at byte {offset}: {message}")]
    PoseParse { offset: usize, message: String },

    #[error("pose schema error in frame {frame}: {message}")]
    PoseSchema { frame: usize, message: String },

    #[error("alignment failed{}: {message}", frame.map(|f| format!(" for frame {f}")).unwrap_or_default())]
    Alignment { frame: Option<usize>, message: String },

    #[error("invalid parameter `{name}`: {message}")]
    Parameter { name: &'static str, message: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },

    #[error("timestep order violated: t_prev ({prev}) must precede t ({current})")]
    TimestepOrder { current: String, prev: String },

    #[error("backend contract violated: {0}")]
    Contract(String),

    #[error("backend failure at timestep {timestep}: {source}")]
    BackendAt {
        timestep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("attention bank not populated for {site} ({what})")]
    BankState { site: AttentionSite, what: String },

    #[error("missing mask: {0}")]
    MissingMask(String),

    #[error("optimization diverged at frame {frame:?}, timestep {timestep}: loss {loss}")]
    Divergence {
        frame: Option<usize>,
        timestep: usize,
        loss: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("embedding cache: {0}")]
    Cache(String),

    #[error("stage `{stage}` failed{}: {source}", frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        frame: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, message: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            message: message.into(),
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, frame: Option<usize>) -> Self {
        Error::Stage {
            stage,
            frame,
            source: Box::new(self),
        }
    }

    /// True for errors a user fixes by editing configuration or inputs.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parameter { .. }
                | Error::PoseParse { .. }
                | Error::PoseSchema { .. }
        )
    }
}
