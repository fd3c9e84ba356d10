use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f32 },

    #[error("non-finite gradient in `{tensor}` at step {step}")]
    NonFiniteGradient { step: usize, tensor: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("budget of {budget} parameters cannot fit an adapter with d = 1 (needs at least {minimum})")]
    InfeasibleBudget { budget: usize, minimum: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("snapshot does not match store: {0}")]
    SnapshotMismatch(String),

    #[error("adapters are already attached")]
    AlreadyAttached,

    #[error("selection pool is empty")]
    EmptyPool,

    #[error("selection round requested at step {step}, which is not a scheduled round")]
    OffSchedule { step: usize },

    #[error("mask does not fit the backbone: {0}")]
    MaskMismatch(String),

    #[error("budget violated: {used} trainable backbone-side parameters exceed ceiling {ceiling:.1}")]
    BudgetViolation { used: usize, ceiling: f64 },

    #[error("class id {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("empty validation set")]
    EmptyValidationSet,

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("base checkpoint hash mismatch: delta expects {expected:016x}, base is {found:016x}")]
    BaseHashMismatch { expected: u64, found: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
