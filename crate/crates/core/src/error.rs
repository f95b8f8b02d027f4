use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("payload length mismatch: header declares {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("non-finite value at offset {0}")]
    NonFinite(usize),

    #[error("invalid label {label} at offset {offset}")]
    InvalidLabel { label: u8, offset: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("slice index {index} out of range for axis of extent {extent}")]
    SliceIndex { index: usize, extent: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate intensity range")]
    DegenerateRange,

    #[error("empty foreground")]
    EmptyForeground,

    #[error("degenerate deviation")]
    DegenerateDeviation,

    #[error("kernel of size {kernel} does not fit input of size {input}")]
    KernelTooLarge { kernel: usize, input: usize },

    #[error("class {0} is absent from the volume")]
    MissingClass(u8),

    #[error("non-finite loss in batch {0}")]
    NonFiniteLoss(usize),

    #[error("non-finite value at pixel {0}")]
    NonFinitePixel(usize),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("degenerate step")]
    DegenerateStep,

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Error {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

/// Extension for tagging results with a pipeline stage.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
