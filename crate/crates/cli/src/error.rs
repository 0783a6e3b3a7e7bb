use std::fmt;

use crate::report::Claim;

/// Exit status classes of the driver.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, bad input file, or a parameter the library refused.
    Config(String),
    /// A size cap would be exceeded; nothing is written.
    Cap(String),
    /// Identity or oracle mismatch, with the failing quantities.
    Assertion(String, Vec<Claim>),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Cap(_) => 3,
            CliError::Assertion(..) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Cap(m) => write!(f, "cap exceeded: {m}"),
            CliError::Assertion(m, _) => write!(f, "assertion failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<blockrg::Error> for CliError {
    fn from(e: blockrg::Error) -> Self {
        use blockrg::Error as E;
        match e {
            E::CapExceeded(_) => CliError::Cap(e.to_string()),
            E::InvalidParameter(_) | E::LatticeMismatch(_) | E::Hypothesis(_) | E::Precondition(_) => {
                CliError::Config(e.to_string())
            }
            E::Singular(_) | E::Domain(_) | E::NoContraction(_) => CliError::Assertion(e.to_string(), Vec::new()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Parse failure with its position in the file.
pub fn parse_error(path: &str, e: &serde_json::Error) -> CliError {
    CliError::Config(format!("{path}: line {}, column {}: {e}", e.line(), e.column()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;
