use std::fmt;

/// A failure reported as one line: `<kind>: <message>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        let message: String = message.into();
        CliError {
            kind,
            message: message.replace(['\n', '\r'], " "),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new("io", message)
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            "usage" | "config" => 2,
            "io" => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<saetune::Error> for CliError {
    fn from(e: saetune::Error) -> Self {
        use saetune::Error as E;
        let kind = match &e {
            E::Config(_) => "config",
            E::Io { .. } => "io",
            E::Load(_) => "load",
            E::Input(_) => "input",
            E::Parse { .. } => "parse",
            E::Fit(_) => "fit",
            E::Splice(_) => "splice",
            E::Training { .. } => "training",
            E::Contract(_) => "contract",
            E::Shape { .. } | E::Numeric { .. } => "numeric",
        };
        CliError::new(kind, e.to_string())
    }
}
