use regime_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_PIPELINE: i32 = 4;
pub const EXIT_IO: i32 = 5;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Toml(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Json(_) | CliError::Csv(_) => EXIT_IO,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Parameter(_)
        | CoreError::Precondition(_)
        | CoreError::Shape { .. }
        | CoreError::InsufficientData(_) => EXIT_USAGE,
        CoreError::Numerical(_) | CoreError::Aborted { .. } => EXIT_NUMERICAL,
        CoreError::Pipeline(_) => EXIT_PIPELINE,
        CoreError::Format(_) | CoreError::Io(_) | CoreError::Csv(_) | CoreError::Json(_) => EXIT_IO,
    }
}

pub fn io_context<T>(r: std::io::Result<T>, context: impl FnOnce() -> String) -> CliResult<T> {
    r.map_err(|source| CliError::Io {
        context: context(),
        source,
    })
}
