use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate cloud: all points coincide")]
    DegenerateCloud,
    #[error("empty point set")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("requested {requested} of {available} points")]
    TooMany { requested: usize, available: usize },
    #[error("index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("level {0} outside 1..=5")]
    InvalidLevel(u8),
    #[error("label {label} outside codebook of size {size}")]
    LabelOutOfRange { label: u32, size: usize },
    #[error("codebook size {0} outside 1..=64")]
    CodebookSize(usize),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("no candidate prompt for task {0}")]
    NoCandidate(&'static str),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no masked tokens")]
    NoMaskedTokens,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
