use ufm::UfmError;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files: exit 1.
    Usage(String),
    /// The estimation itself broke down: exit 2.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<UfmError> for CliError {
    fn from(e: UfmError) -> Self {
        match e {
            UfmError::NonFinite(_)
            | UfmError::EigenFailure(_)
            | UfmError::SubsampleRankDeficient(_)
            | UfmError::SingularPhi(_)
            | UfmError::DegenerateRegressors => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}
