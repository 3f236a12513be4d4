use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or an unknown subcommand.
    Usage(String),
    /// Unreadable or invalid config file.
    Config {
        path: String,
        message: String,
        /// Offending key when the parser names one.
        key: Option<String>,
        line: Option<usize>,
        column: Option<usize>,
    },
    /// Input artifacts that `report` needs but cannot find.
    Missing(Vec<String>),
    /// Failure inside the library or while writing artifacts.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Missing(_) | CliError::Runtime(_) => 1,
        }
    }

    pub fn to_json(&self) -> String {
        let body = match self {
            CliError::Usage(m) => json!({ "kind": "usage", "message": m }),
            CliError::Config { path, message, key, line, column } => json!({
                "kind": "config",
                "path": path,
                "message": message,
                "key": key,
                "line": line,
                "column": column,
            }),
            CliError::Missing(files) => json!({
                "kind": "missing_artifacts",
                "message": format!("missing {}", files.join(", ")),
                "missing": files,
            }),
            CliError::Runtime(m) => json!({ "kind": "runtime", "message": m }),
        };
        json!({ "error": body }).to_string()
    }
}

impl From<stochbound::Error> for CliError {
    fn from(e: stochbound::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
