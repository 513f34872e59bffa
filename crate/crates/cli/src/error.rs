use thiserror::Error;

/// Failures of a `lab` subcommand, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] lab_core::error::Error),

    #[error("theory assertions failed: {}", .0.join("; "))]
    TheoryAssertion(Vec<String>),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1 usage or input error, 2 numeric or training failure, 3 theory
    /// assertion failure.
    pub fn exit_code(&self) -> i32 {
        use lab_core::error::Error as E;
        match self {
            CliError::Usage(_) | CliError::Toml(_) | CliError::Csv(_) => 1,
            CliError::Core(E::Config(_) | E::Parse { .. } | E::Checkpoint(_) | E::Io(_) | E::Json(_)) => 1,
            CliError::Core(_) => 2,
            CliError::TheoryAssertion(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lab_core::error::Error as E;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(E::Config("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(E::Training { message: "x".into(), trace: vec![] }).exit_code(), 2);
        assert_eq!(CliError::TheoryAssertion(vec!["x".into()]).exit_code(), 3);
    }
}
