use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Core(ddo_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<ddo_core::Error> for CliError {
    fn from(e: ddo_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Divergence(e.to_string())
        } else {
            CliError::Core(e)
        }
    }
}

impl From<ddo_core::grad::GradError> for CliError {
    fn from(e: ddo_core::grad::GradError) -> Self {
        ddo_core::Error::from(e).into()
    }
}

impl CliError {
    /// 0 success, 1 usage or configuration, 2 failed verification, 3 numeric
    /// divergence.
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Verification(_) => 2,
            CliError::Divergence(_) => 3,
            _ => 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_failure_class() {
        let code = |e: CliError| format!("{:?}", e.exit_code());
        assert_eq!(code(CliError::Usage("x".into())), format!("{:?}", ExitCode::from(1)));
        assert_eq!(code(CliError::Config("x".into())), format!("{:?}", ExitCode::from(1)));
        assert_eq!(code(CliError::Verification("x".into())), format!("{:?}", ExitCode::from(2)));
        assert_eq!(code(ddo_core::Error::NonFinite("loss").into()), format!("{:?}", ExitCode::from(3)));
        assert_eq!(code(ddo_core::Error::invalid("x").into()), format!("{:?}", ExitCode::from(1)));
    }
}
