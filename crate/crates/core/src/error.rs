use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("parity size k = {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("invalid parity size k = {k} for d = {d} (need 2 <= k <= d)")]
    InvalidSize { d: usize, k: usize },
    #[error("target index {index} outside 1..={d}")]
    IndexOutOfRange { index: usize, d: usize },
    #[error("duplicate target index {0}")]
    DuplicateIndex(usize),
    #[error("expected {expected} target indices, got {got}")]
    WrongTargetCount { expected: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("argument {0} outside [-1, 1]")]
    OutOfDomain(f64),
    #[error("row {0} of the attention matrix is fully masked")]
    FullyMasked(usize),
    #[error("required source column {0} is not set")]
    UnsetColumn(usize),
    #[error("ground-truth label column {0} is missing")]
    MissingLabels(usize),
    #[error("family size C({d},{k}) = {size} exceeds cap {cap}")]
    FamilyTooLarge { d: usize, k: usize, size: u128, cap: u128 },
    #[error("operation requires an exhaustive parity family")]
    NotExhaustive,
    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid link function: {0}")]
    InvalidLink(String),
}

pub type Result<T> = core::result::Result<T, Error>;
