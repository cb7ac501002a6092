//! Errors of the file-format and command layer, with their exit codes.

use std::path::{Path, PathBuf};

use kire_core::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// A file whose contents could not be parsed.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::Core(CoreError::Config(message.into()))
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(CoreError::Config(_)) => "config",
            Self::Core(CoreError::Numerical(_)) => "numerical",
            Self::Io { .. } => "io",
            Self::Format { .. } => "format",
            Self::Core(_) => "data",
        }
    }

    /// 2 for configuration errors, 4 for numerical divergence, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "numerical" => 4,
            _ => 3,
        }
    }

    /// The error as one line of JSON.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_category() {
        assert_eq!(Error::config("x").exit_code(), 2);
        assert_eq!(Error::Core(CoreError::Numerical("nan".into())).exit_code(), 4);
        assert_eq!(Error::Core(CoreError::Span("bad".into())).exit_code(), 3);
        assert_eq!(Error::format(Path::new("a.json"), "bad").exit_code(), 3);
        let io = Error::io(Path::new("missing"), std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(io.exit_code(), 3);
    }

    #[test]
    fn json_line_is_single_line_and_parsable() {
        let e = Error::format(Path::new("f.jsonl"), "line 3: missing field `h`\nmore");
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "format");
        assert_eq!(v["exit_code"], 3);
    }
}
