use std::path::{Path, PathBuf};

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] spectlv_core::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn csv(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Csv { path: path.to_path_buf(), message: e.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Missing(_) => "missing_input",
            CliError::Io { .. } => "io",
            CliError::Csv { .. } => "csv",
        }
    }

    /// `error: <kind>: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        let kind = self.kind();
        let spoken = format!("{}: ", kind.replace('_', " "));
        let msg = msg.strip_prefix(&spoken).unwrap_or(&msg);
        format!("error: {kind}: {msg}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_names_the_kind_once() {
        let e = CliError::from(spectlv_core::Error::InvalidArgument("k = 3".into()));
        assert_eq!(e.line(), "error: invalid_argument: k = 3");
        assert_eq!(CliError::Usage("no --out".into()).line(), "error: usage: no --out");
    }
}
