//! Pipeline orchestration for the chromoforge tool: data synthesis, dataset
//! construction, training, generation, evaluation and report emission. All
//! stages communicate through plain files, embed the config hash and seed of
//! the run that produced them, and are byte-reproducible under a fixed seed.

pub mod config;
pub mod manifest;
pub mod stages;
pub mod svg;
pub mod threads;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical fault: {0}")]
    Numerical(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit code contract: 0 success, 2 config error, 3 numerical
    /// fault, 4 missing input, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

pub(crate) fn read_input(path: &std::path::Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))
}
