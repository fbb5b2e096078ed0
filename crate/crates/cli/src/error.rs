use sbev_autograd::AutogradError;
use sbev_core::SbevError;

/// Command failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<SbevError> for CliError {
    fn from(e: SbevError) -> Self {
        let msg = e.to_string();
        match e {
            SbevError::Config(_) | SbevError::Geometry(_) | SbevError::Horizon { .. } => CliError::Usage(msg),
            SbevError::Numeric(_) | SbevError::Autograd(AutogradError::NonFinite(_)) => CliError::Numeric(msg),
            SbevError::Autograd(AutogradError::Shape { .. } | AutogradError::InvalidArgument { .. }) => {
                CliError::Usage(msg)
            }
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
