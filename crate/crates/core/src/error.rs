use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at step {step} (alpha = {alpha}): {detail}")]
    Diverged { step: usize, alpha: f64, detail: String },

    #[error("checkpoint format: {0}")]
    Format(#[from] FormatError),

    #[error("caption backend unavailable after {attempts} attempt(s): {detail}")]
    BackendUnavailable { attempts: u32, detail: String },

    #[error("caption backend returned an empty completion")]
    EmptyCompletion,

    #[error("captioning failed for video {video_id}: {source}")]
    CaptionFailed {
        video_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Distinct failure modes when decoding an OVCK1 checkpoint.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: needed {needed} more byte(s) at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype code {found} does not match requested {expected}")]
    DtypeMismatch { expected: u8, found: u8 },
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("malformed content: {0}")]
    Malformed(String),
}
