use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vocabulary mismatch: expected hash {expected:016x}, found {found:016x}")]
    VocabMismatch { expected: u64, found: u64 },

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("{what}: bad magic {found:?}")]
    BadMagic { what: &'static str, found: [u8; 4] },

    #[error("{what}: unsupported format version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{what}: truncated file")]
    Truncated { what: &'static str },

    #[error("{what}: checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum {
        what: &'static str,
        stored: u64,
        computed: u64,
    },

    #[error("{what}: malformed payload: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("non-finite objective")]
    NonFinite,

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("no supervision at position")]
    NoSupervision,

    #[error("unnormalized supervision: mass {0}")]
    Unnormalized(f64),

    #[error("unknown loss kind {0:?}")]
    UnknownLoss(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by mismatched or damaged artifacts rather
    /// than bad arguments or runtime problems.
    pub fn is_incompatibility(&self) -> bool {
        matches!(
            self,
            Error::VocabMismatch { .. }
                | Error::Incompatible(_)
                | Error::BadMagic { .. }
                | Error::Version { .. }
                | Error::Truncated { .. }
                | Error::Checksum { .. }
                | Error::Malformed { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
