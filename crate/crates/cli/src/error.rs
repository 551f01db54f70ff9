use std::fmt;

/// Exit code 1: the request itself is invalid.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code 2: a valid request failed while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => EXIT_VALIDATION,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation(m) => write!(f, "invalid input: {m}"),
            Self::Runtime(m) => write!(f, "failed: {m}"),
        }
    }
}

impl From<colabel::Error> for CliError {
    fn from(e: colabel::Error) -> Self {
        use colabel::Error as E;
        match e {
            E::Config(_)
            | E::OutOfRange { .. }
            | E::Balance(_)
            | E::UnknownKind(_)
            | E::Manifest { .. }
            | E::MissingFile(_)
            | E::NoSource(_)
            | E::NoValidation
            | E::MissingHead(_)
            | E::NoAttention
            | E::EmptyDataset
            | E::EmptyKnowledgeBase
            | E::MismatchedGrids(_) => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<ndgrad::Error> for CliError {
    fn from(e: ndgrad::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
