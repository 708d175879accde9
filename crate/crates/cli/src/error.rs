use std::fmt;

/// A failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or unsupported combinations: exit 1.
    Config(String),
    /// Missing, unreadable, corrupt or mismatched input files: exit 2.
    Data(String),
    /// Non-finite losses, divergence or failed gradient checks: exit 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<fpmine_core::Error> for CliError {
    fn from(e: fpmine_core::Error) -> Self {
        use fpmine_core::Error as E;
        match e {
            E::Config(m) | E::Input(m) => CliError::Config(m),
            E::Contract(m) => CliError::Config(format!("contract violation: {m}")),
            E::Numerical(m) => CliError::Numerical(m),
            E::Data(m) => CliError::Data(m),
            E::Dimension(m) => CliError::Data(format!("dimension mismatch: {m}")),
            E::Io(e) => CliError::Data(e.to_string()),
            E::Json(e) => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
