use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or Inf surfaced during a forward or backward pass.
    #[error("numeric fault in `{op}` (node {node}): {detail}")]
    Numeric {
        op: &'static str,
        node: usize,
        detail: String,
    },

    /// The finite-difference oracle detected a nondeterministic loss function.
    #[error("oracle invalid: {0}")]
    OracleInvalid(String),

    /// Bad or unknown configuration key/value.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset manifest or report failed schema validation.
    #[error("schema error: {0}")]
    Schema(String),

    /// Sealed target labels reached a code path that must not see them.
    #[error("label leakage: {0}")]
    LabelLeakage(String),

    /// Synthetic scene generation could not satisfy its constraints.
    #[error("generation failure: {0}")]
    Generation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn leakage(msg: impl Into<String>) -> Self {
        Error::LabelLeakage(msg.into())
    }

    pub fn generation(msg: impl Into<String>) -> Self {
        Error::Generation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    /// Process exit code for the CLI: config errors 2, numeric faults 3, I/O 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) => 2,
            Error::Numeric { .. } | Error::OracleInvalid(_) => 3,
            Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}
