use thiserror::Error;

/// Failures of the front-end, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or missing configuration; exit 2.
    #[error("config error: {0}")]
    Config(String),
    /// The simulation core refused or failed; exit 3.
    #[error("numerical failure in {stage}: {source}")]
    Numerical {
        stage: &'static str,
        #[source]
        source: echo4_core::Error,
    },
    /// File system or serialization trouble; exit 2.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Numerical { .. } => 3,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    /// Core errors that stem from invalid input rather than numerics.
    pub fn from_core(stage: &'static str, e: echo4_core::Error) -> CliError {
        use echo4_core::Error as E;
        match e {
            E::LevelOutOfRange { .. }
            | E::InvalidSystem(_)
            | E::InvalidDistribution(_)
            | E::Syntax { .. }
            | E::Sequence { .. }
            | E::NoPathway(_)
            | E::UnsupportedSampling(_)
            | E::InvalidEnsemble(_)
            | E::InvalidMedium(_)
            | E::FitInput(_)
            | E::Geometry(_)
            | E::Pump(_)
            | E::Aliasing { .. } => CliError::Config(format!("{stage}: {e}")),
            source => CliError::Numerical { stage, source },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
