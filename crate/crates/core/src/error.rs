use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("unsupported primitive: {0}")]
    UnsupportedPrimitive(String),

    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("degenerate input: vector norm {norm:e} is below {threshold:e}")]
    DegenerateNorm { norm: f64, threshold: f64 },

    #[error("gradient map does not match the store: {0}")]
    GradientKeys(String),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("prompt has {words} words, limit is {limit}")]
    PromptTooLong { words: usize, limit: usize },

    #[error("invalid token id {0}")]
    InvalidToken(usize),

    #[error("timestep {t} out of range for {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("unknown LoRA branch {0:?}")]
    UnknownBranch(String),

    #[error("unknown LoRA host {0:?}")]
    UnknownHost(String),

    #[error("LoRA host {0:?} is not a matrix")]
    NotMatrix(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("unknown object {0:?}")]
    UnknownObject(String),

    #[error("unknown physics transform {0:?}")]
    UnknownTransform(String),

    #[error("degenerate object spec: {0}")]
    DegenerateObject(String),

    #[error("need at least {needed} objects besides the target, have {have}")]
    InsufficientObjects { needed: usize, have: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path} at byte {offset} (line {line}, column {column}): {message}")]
    Json {
        path: PathBuf,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("path {0:?} escapes the dataset directory")]
    PathEscape(String),

    #[error("PNG error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported version {0}")]
    VersionMismatch(u32),

    #[error("checkpoint: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("checkpoint: truncated file")]
    Truncated,

    #[error("checkpoint: duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("non-finite loss term {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("probe {head} head accuracy {accuracy:.4} below required {required:.2}")]
    ProbeAccuracy {
        head: &'static str,
        accuracy: f64,
        required: f64,
    },

    #[error("probe was trained on dataset {probe}, evaluated against {dataset}")]
    HashMismatch { probe: String, dataset: String },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("missing required flag --{0}")]
    MissingFlag(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
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

    /// Wraps a JSON parse error, locating it as a byte offset in `text`.
    pub fn json(path: impl Into<PathBuf>, text: &str, err: &serde_json::Error) -> Self {
        let (line, column) = (err.line(), err.column());
        let offset = if line == 0 {
            0
        } else {
            text.split_inclusive('\n')
                .take(line - 1)
                .map(str::len)
                .sum::<usize>()
                + column.saturating_sub(1)
        };
        Error::Json {
            path: path.into(),
            offset,
            line,
            column,
            message: err.to_string(),
        }
    }

    /// Short machine-readable identifier, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::UnsupportedPrimitive(_) => "unsupported_primitive",
            Error::NotScalar(_) => "not_scalar",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DegenerateNorm { .. } => "degenerate_norm",
            Error::GradientKeys(_) => "gradient_keys",
            Error::UnknownWord(_) => "unknown_word",
            Error::PromptTooLong { .. } => "prompt_too_long",
            Error::InvalidToken(_) => "invalid_token",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::UnknownBranch(_) => "unknown_branch",
            Error::UnknownHost(_) => "unknown_host",
            Error::NotMatrix(_) => "not_matrix",
            Error::Empty(_) => "empty",
            Error::UnknownObject(_) => "unknown_object",
            Error::UnknownTransform(_) => "unknown_transform",
            Error::DegenerateObject(_) => "degenerate_object",
            Error::InsufficientObjects { .. } => "insufficient_objects",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::PathEscape(_) => "path_escape",
            Error::Png { .. } => "png",
            Error::BadMagic => "bad_magic",
            Error::VersionMismatch(_) => "version_mismatch",
            Error::CrcMismatch { .. } => "crc_mismatch",
            Error::Truncated => "truncated",
            Error::DuplicateName(_) => "duplicate_name",
            Error::MissingTensor(_) => "missing_tensor",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::ProbeAccuracy { .. } => "probe_accuracy",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::MissingFlag(_) => "missing_flag",
            Error::Config(_) => "config",
        }
    }
}
