use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("region width {width} out of range for {kind} (allowed 1..={max})")]
    RegionBounds { kind: &'static str, width: u32, max: u32 },

    #[error("writes are only supported for XLSB regions")]
    UnsupportedRegion,

    #[error("bit string of length {len} does not fit region of width {width}")]
    RegionOverflow { len: usize, width: u32 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("payload of {needed} bits exceeds capacity of {capacity} bits")]
    Capacity { needed: usize, capacity: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in layer {layer}: {what}")]
    Numeric { layer: usize, what: String },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("model with seed {seed} reached accuracy {accuracy:.3}, below floor {floor:.3}")]
    Generation { seed: u64, accuracy: f64, floor: f64 },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
