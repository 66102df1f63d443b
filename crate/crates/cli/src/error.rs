use std::path::Path;

/// Everything a subcommand can fail with, mapped onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Sim(#[from] vmsim::Error),
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_PARSE: i32 = 5;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Sim(e) => match e {
                vmsim::Error::Config(_) => EXIT_CONFIG,
                vmsim::Error::Io(_) => EXIT_IO,
                vmsim::Error::Parse { .. } => EXIT_PARSE,
                vmsim::Error::Mapping { .. } | vmsim::Error::PageFault { .. } => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
