use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("label {label} is not a class id for {num_classes} classes (and not the ignore value 255)")]
    InvalidLabel { label: u8, num_classes: usize },

    #[error("invalid probability target: {0}")]
    InvalidDistribution(String),

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("iteration {iter} exceeds max_iter {max_iter}")]
    ScheduleOverrun { iter: usize, max_iter: usize },

    #[error("{0} must not be empty")]
    EmptySet(&'static str),

    #[error("sample id {0} already present")]
    IdCollision(u64),

    #[error("requested id ranges overlap: {0}")]
    OverlappingIds(String),

    #[error("class count mismatch: {0} vs {1}")]
    ClassMismatch(usize, usize),

    #[error("no class has a defined IoU")]
    NoDefinedClasses,

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

/// Errors decoding the binary dataset (`DMX1`) and checkpoint (`DMCK`) files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("declared dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("checkpoint does not match the network: {0}")]
    Architecture(String),
}

impl FormatError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::UnsupportedVersion(_) => 2,
            FormatError::Truncated { .. } => 3,
            FormatError::DimensionOverflow(_) => 4,
            FormatError::TrailingBytes(_) => 5,
            FormatError::InvalidField(_) => 6,
            FormatError::Architecture(_) => 7,
        }
    }
}
