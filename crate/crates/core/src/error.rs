use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("degenerate schedule: final alpha_bar {0:e} exceeds 1e-3")]
    DegenerateSchedule(f64),
    #[error("step index {index} out of range for {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("step order: t_to {to} must be below t_from {from}")]
    StepOrder { from: usize, to: usize },
    #[error("condition count mismatch: expected {expected}, got {got}")]
    ConditionCount { expected: usize, got: usize },
    #[error("trajectory leaves the frame: {0}")]
    OutOfFrame(String),
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
}

pub type CoreResult<T> = core::result::Result<T, CoreError>;
