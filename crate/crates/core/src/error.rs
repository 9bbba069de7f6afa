use std::path::PathBuf;

use mixtts_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("phoneme text parse error: {0}")]
    Parse(String),
    #[error("unknown phoneme {token:?} (not in the vocabulary)")]
    UnknownPhoneme { token: String },
    #[error("token index {index} out of vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },
    #[error("mel file format error: {0}")]
    MelFormat(String),
    #[error("expected {expected} Hz audio, got {got} Hz (resample before extraction)")]
    SampleRate { expected: u32, got: u32 },
    #[error("audio error: {0}")]
    Audio(String),
    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duration error: {0}")]
    Duration(String),
    #[error("non-finite value in post-net step {step} ({stage})")]
    NonFinite { step: usize, stage: &'static str },
    #[error("loss term {term} is not finite")]
    NanLoss { term: &'static str },
    #[error("training diverged at step {step}: total loss {total}; diagnostics written to {dump:?}")]
    Diverged { step: u64, total: f64, dump: Option<PathBuf> },
    #[error("post-net data-dependent init already performed")]
    AlreadyInitialized,
    #[error("checkpoint checksum mismatch (file is corrupted or truncated)")]
    Checksum,
    #[error("checkpoint config fingerprint {found} does not match expected {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("word index {index} out of range for {words} words")]
    WordIndex { index: usize, words: usize },
    #[error("vocoder: {0}")]
    Vocoder(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
