use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the harness, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("capacity error: requested {requested} bases but the initializer can supply at most {available}")]
    Capacity { requested: usize, available: usize },

    #[error("refusing to write into non-empty directory {} (pass --force)", .0.display())]
    OutputExists(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] bpl_core::Error),
}

impl CliError {
    /// 2 config, 3 data, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use bpl_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Capacity { .. } | CliError::OutputExists(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::Capacity { .. } => 2,
                E::Shape(_) | E::Schema { .. } | E::Parse { .. } | E::Io { .. } => 3,
                E::Numerical(_) => 4,
                E::State(_) => 1,
            },
        }
    }

    /// Short machine-readable category used in comparison reports.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Capacity { .. } | CliError::Core(bpl_core::Error::Capacity { .. }) => "capacity",
            _ => match self.exit_code() {
                2 => "config",
                3 => "data",
                4 => "numerical",
                _ => "internal",
            },
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Core(bpl_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
