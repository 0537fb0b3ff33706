use std::fmt;

/// Failure of one command, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config contradictions, a held lock.
    Usage(String),
    /// Missing or malformed files and degenerate data.
    Data(String),
    /// Non-finite values during training or evaluation.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<amips_core::Error> for CliError {
    fn from(e: amips_core::Error) -> Self {
        use amips_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Numeric { .. } => CliError::Numeric(msg),
            E::InvalidArgument(_) => CliError::Usage(msg),
            E::Io { .. } | E::Format { .. } | E::Degenerate { .. } | E::DimMismatch { .. } | E::EmptyCluster(_) => {
                CliError::Data(msg)
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
