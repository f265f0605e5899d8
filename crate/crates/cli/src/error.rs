use std::fmt;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Validation(_) => 4,
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn in_file(self, path: &std::path::Path) -> Self {
        match self {
            CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Validation(m) => f.write_str(m),
        }
    }
}

/// The command-line flag behind a library parameter name.
fn flag_for(name: &str) -> String {
    match name {
        "gamma" => "--budget".into(),
        "rank_r" => "--rank".into(),
        "noise_sigma" => "--noise".into(),
        "register_norm_scale" => "--register-scale".into(),
        other => format!("--{}", other.replace('_', "-")),
    }
}

impl From<guikv::Error> for CliError {
    fn from(e: guikv::Error) -> Self {
        if e.is_format_error() {
            return CliError::Input(e.to_string());
        }
        match e {
            guikv::Error::InvalidParameter { name, reason } => {
                CliError::Validation(format!("{}: {reason}", flag_for(name)))
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
