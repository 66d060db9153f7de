use oe_forge_core::Error;

/// A failed command, carrying its process exit code: 2 for configuration,
/// validation and missing files, 3 for shape mismatches, 4 for numerical
/// divergence.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn output(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Output { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Shape(_)) => 3,
            CliError::Core(Error::Divergence { .. }) => 4,
            CliError::Output { .. } => 1,
            _ => 2,
        }
    }
}
