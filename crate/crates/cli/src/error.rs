use std::fmt;

use qme_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    StageOrderViolation(String),
    ConfigDrift { artifact: String, expected: String, found: String },
    Core(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigDrift { .. } => 2,
            CliError::StageOrderViolation(_) => 3,
            CliError::Core(CoreError::NonFiniteLoss | CoreError::NonFiniteGradient) => 4,
            CliError::Core(CoreError::DegenerateConfig(_) | CoreError::Invalid(_)) => 2,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::StageOrderViolation(_) => "StageOrderViolation",
            CliError::ConfigDrift { .. } => "ConfigDrift",
            CliError::Core(CoreError::NonFiniteLoss | CoreError::NonFiniteGradient) => "NumericalFailure",
            CliError::Core(_) => "Error",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::StageOrderViolation(m) => write!(f, "StageOrderViolation: {m}"),
            CliError::ConfigDrift { artifact, expected, found } => {
                write!(f, "ConfigDrift: {artifact} was produced by config {found}, current config is {expected}")
            }
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
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

pub type CliResult<T> = Result<T, CliError>;
