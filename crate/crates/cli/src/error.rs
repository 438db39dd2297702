use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },

    #[error("cannot render plot: {0}")]
    Plot(#[from] image::ImageError),

    #[error(transparent)]
    Core(#[from] tfmixer::Error),
}

impl CliError {
    /// 2 config, 3 data, 4 numerical abort, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use tfmixer::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Write { .. } | CliError::Plot(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Parse { .. }
                | E::DuplicateObservation { .. }
                | E::NonMonotonicQuery { .. }
                | E::EmptyHistory(_)
                | E::EmptyTarget(_)
                | E::EmptyMask
                | E::DimensionMismatch { .. }
                | E::Checkpoint(_)
                | E::Io(_)
                | E::Json(_) => 3,
                E::NumericalAbort { .. } | E::NonFinite { .. } => 4,
                E::Shape(_) | E::StaleGraph | E::Unbound(_) => 1,
            },
        }
    }
}

pub fn write_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Write { path, source }
}
