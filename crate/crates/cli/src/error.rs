use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] denseshift::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 configuration, 3 data, 4 non-finite numerics, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use denseshift::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::LayerShape { .. }
                | E::ShapeMismatch(_)
                | E::UnsupportedLayer { .. }
                | E::NotShiftWeight { .. }
                | E::CodeOverflow { .. }
                | E::LengthMismatch { .. } => 2,
                E::Data(_) | E::Format(_) | E::Io(_) => 3,
                E::NonFinite { .. } | E::NonFiniteGradient => 4,
                E::StaleCache => 1,
            },
        }
    }
}
