use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variable is not recorded on this graph")]
    ForeignVar,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 4]),

    /// Non-finite values appeared; `step` is 1-based within `context`.
    #[error("numerical divergence in {context} at step {step}")]
    Divergence { context: &'static str, step: usize },

    #[error("color component {value} outside [0, {c_max}]")]
    OutOfRange { value: f64, c_max: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown ablation suite {0:?} (expected lut, lambda, solver or all)")]
    UnknownSuite(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("image decode/encode failed: {0}")]
    Image(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for failures caused by the numbers themselves rather than the inputs.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
