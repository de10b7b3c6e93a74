use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("layer {layer}: {msg}")]
    LayerShape { layer: usize, msg: String },

    #[error("model has no VR-tagged layer (empty slab list)")]
    NoVrLayer,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("activation cache is stale: {0}")]
    StaleCache(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (learning rate {lr}): {msg}")]
    Diverged { epoch: usize, lr: f64, msg: String },

    #[error("{path}: bad magic number {observed} (expected {expected})")]
    BadMagic {
        path: PathBuf,
        observed: u32,
        expected: u32,
    },

    #[error("{path}: truncated file, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("visualization undefined: {0}")]
    Visualization(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
