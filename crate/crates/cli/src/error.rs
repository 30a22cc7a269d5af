use std::fmt;

use serde_json::json;
use tokprune_core::trace_io::FormatError;
use tokprune_core::{ConfigError, LoadError, StageError};

/// Exit status: computation errors are 1, usage and I/O errors 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Compute,
    Usage,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Compute => 1,
            Kind::Usage | Kind::Io => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Compute => "compute",
            Kind::Usage => "usage",
            Kind::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub stage: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            stage: None,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Io,
            stage: None,
            message: message.into(),
        }
    }

    pub fn at(mut self, stage: impl fmt::Display) -> Self {
        self.stage.get_or_insert_with(|| stage.to_string());
        self
    }

    pub fn to_json(&self) -> String {
        let mut err = json!({ "kind": self.kind.name(), "message": self.message });
        if let Some(stage) = &self.stage {
            err["stage"] = json!(stage);
        }
        json!({ "error": err }).to_string()
    }
}

impl From<tokprune_core::Error> for CliError {
    fn from(e: tokprune_core::Error) -> Self {
        Self {
            kind: Kind::Compute,
            stage: None,
            message: e.to_string(),
        }
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        Self {
            kind: Kind::Compute,
            stage: Some(e.stage.to_string()),
            message: e.source.to_string(),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Self::io(e.to_string())
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        Self::io(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::io(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
