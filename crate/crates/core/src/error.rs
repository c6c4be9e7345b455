use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mode index 0 is the constant mode, which the prior excludes")]
    ConstantModeIndex,

    #[error("mode index {k} out of range for grid of size {n}")]
    ModeOutOfRange { k: usize, n: usize },

    #[error("{k_modes} retained modes alias on a grid of {n} points (need k_modes <= n - 1)")]
    Aliasing { k_modes: usize, n: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("constant-mode coefficient {0:e} is nonzero; field lies outside the prior support")]
    NonzeroConstantMode(f64),

    #[error("field has spatial mean {0:e}; Cameron-Martin norm needs a zero-mean perturbation")]
    NonzeroMean(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("CFL violation: dt = {dt:e} exceeds stable limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("receiver {receiver} recorded no arrival (all-zero signal)")]
    NoArrival { receiver: usize },

    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("parameters changed since the forward pass that produced this tape")]
    StaleTape,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("at most {max} samples allowed, got {got}")]
    TooManySamples { max: usize, got: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("forward model failed {attempts} times for row {row} (row seed {seed}): {reason}")]
    ForwardFailure {
        row: usize,
        seed: u64,
        attempts: usize,
        reason: String,
    },

    #[error("joint reference measure requires an attached reference dataset")]
    MissingReferenceData,

    #[error("normalizing constant underflowed")]
    Underflow,

    #[error("grid mismatch: {0} vs {1}")]
    GridMismatch(usize, usize),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
