use dist_core::CoreError;
use dist_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A config file or command line that cannot be turned into a run.
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot encode run record: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn config_at(origin: &str, line: usize, msg: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{origin}:{line}: {msg}"))
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// Process exit code: 1 configuration, 2 contract violation, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Json(_) => 1,
            CliError::Tensor(e) => tensor_code(e),
            CliError::Core(e) => match e {
                CoreError::Contract(_) => 2,
                CoreError::Data(_) | CoreError::Degenerate(_) | CoreError::Io(_) => 3,
                CoreError::Config(_) | CoreError::Convergence(_) => 1,
                CoreError::Tensor(t) => tensor_code(t),
            },
            CliError::Io { .. } => 3,
        }
    }
}

/// Unreadable archives are data errors; parameter and shape mismatches mean
/// the weights do not fit the configured model.
fn tensor_code(e: &TensorError) -> i32 {
    match e {
        TensorError::Contract(_) => 2,
        TensorError::Io(_) | TensorError::Archive(_) => 3,
        _ => 1,
    }
}
