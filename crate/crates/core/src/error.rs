use std::path::PathBuf;

/// Errors raised by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid block address `{input}`: bad {segment} segment `{found}`")]
    AddressParse {
        input: String,
        segment: &'static str,
        found: String,
    },

    #[error("tap {address} does not resolve against backend `{backend}`: {reason}")]
    UnresolvableTap {
        address: String,
        backend: String,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("provenance mismatch: differing fields {0:?}")]
    ProvenanceMismatch(Vec<&'static str>),

    #[error("degenerate representation: {0}")]
    Degenerate(String),

    #[error("extraction failed for image `{image_id}` (prompt hash {prompt_hash}): {source}")]
    Extraction {
        image_id: String,
        prompt_hash: String,
        #[source]
        source: Box<Error>,
    },

    #[error("model error: {0}")]
    Model(String),

    #[error("image decode failed for {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("duplicate store key {0}")]
    DuplicateKey(String),

    #[error("missing store key {0}")]
    MissingKey(String),

    #[error("checksum mismatch for {path}: manifest {expected}, payload {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("malformed payload {path}: {reason}")]
    MalformedPayload { path: PathBuf, reason: String },

    #[error("dataset validation failed: {}", .0.join("; "))]
    Dataset(Vec<String>),

    #[error("missing benchmark categories: {0:?}")]
    MissingCategories(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("captioner failed: {0}")]
    Captioner(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input (bad flags, data, or
    /// addresses) rather than runtime or backend failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::AddressParse { .. }
            | Error::UnresolvableTap { .. }
            | Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::ProvenanceMismatch(_)
            | Error::DuplicateKey(_)
            | Error::MissingKey(_)
            | Error::Dataset(_)
            | Error::MissingCategories(_)
            | Error::Config(_) => true,
            Error::Extraction { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

impl From<candle_core::Error> for Error {
    fn from(e: candle_core::Error) -> Self {
        // Drop the captured backtrace candle appends when RUST_BACKTRACE is set.
        let msg = e.to_string();
        let msg = msg.split("\n   0: ").next().unwrap_or_default();
        Error::Model(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
