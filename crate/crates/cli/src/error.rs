use gmd_core::GmdError;

/// Failure of a command, carrying its exit code class.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, configuration, inputs or files. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Training or sampling produced non-finite values. Exit code 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<GmdError> for CliError {
    fn from(e: GmdError) -> Self {
        match e {
            GmdError::NumericFailure { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Creates the parent directory of `path` if it has one.
pub fn ensure_parent(path: &std::path::Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

/// `std::fs::write` that creates missing parent directories.
pub fn write_bytes(path: &std::path::Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Attaches a path to an I/O error.
pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}
