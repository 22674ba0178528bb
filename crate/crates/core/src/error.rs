use thiserror::Error;

pub type Result<T> = std::result::Result<T, GifError>;

#[derive(Debug, Error)]
pub enum GifError {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("row subset is empty")]
    EmptySubset,

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("capacity exceeded: {m} identities do not fit in v^l with v={v}, l={l}")]
    Capacity { m: usize, v: usize, l: usize },

    #[error("node at depth {depth} holds {size} identities, above its capacity {cap}")]
    NodeOverCapacity { depth: usize, size: usize, cap: usize },

    #[error("token {token} at position {position} is outside [0, {v})")]
    TokenRange { position: usize, token: u32, v: usize },

    #[error("label {label} out of range for {m} classes")]
    LabelOutOfRange { label: usize, m: usize },

    #[error("no code or code vector for label {0}")]
    MissingLabel(usize),

    #[error("identity {0} has no samples")]
    EmptyClass(usize),

    #[error("identity {0} has a zero-norm mean embedding")]
    DegenerateClass(usize),

    #[error("numeric abort at iteration {iteration}: {detail}")]
    NumericAbort { iteration: usize, detail: String },

    #[error("inconsistent artifacts: {0}")]
    Inconsistent(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GifError {
    pub fn format(msg: impl Into<String>) -> Self {
        GifError::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        GifError::InvalidConfig(msg.into())
    }

    /// True for errors a user fixes by changing the configuration or the
    /// artifacts it points at.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            GifError::InvalidConfig(_) | GifError::Capacity { .. } | GifError::Inconsistent(_)
        )
    }

    /// True for errors caused by non-finite values during optimization.
    pub fn is_numeric(&self) -> bool {
        matches!(self, GifError::NumericAbort { .. })
    }
}
