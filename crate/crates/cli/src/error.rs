//! Error type shared by every subcommand, serializable for the error JSON.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("failed to parse {file}: {message}")]
    Parse { file: String, message: String },
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("GNSS model failed: {0}")]
    Gnss(String),
    #[error("estimator failed after keyframe {last_good:?}: {message}")]
    Estimator { last_good: Option<u64>, message: String },
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("{0}")]
    Bundle(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { path: path.into(), message: message.into() }
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Self::Io { path: path.display().to_string(), message: err.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::Parse { .. } => "parse",
            Self::Io { .. } => "io",
            Self::Simulation(_) => "simulation",
            Self::Gnss(_) => "gnss",
            Self::Estimator { .. } => "estimator",
            Self::Evaluation(_) => "evaluation",
            Self::Bundle(_) => "bundle",
            Self::Usage(_) => "usage",
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            error: &'a str,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            field: Option<&'a str>,
            #[serde(skip_serializing_if = "Option::is_none")]
            last_good_keyframe: Option<u64>,
        }
        let body = Body {
            error: self.kind(),
            message: self.to_string(),
            field: match self {
                Self::Config { path, .. } => Some(path.as_str()),
                _ => None,
            },
            last_good_keyframe: match self {
                Self::Estimator { last_good, .. } => *last_good,
                _ => None,
            },
        };
        serde_json::to_string(&body).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind()))
    }
}

impl From<twinloc::estimator::SessionError> for CliError {
    fn from(e: twinloc::estimator::SessionError) -> Self {
        Self::Estimator { last_good: e.last_good, message: e.source.to_string() }
    }
}

impl From<twinloc::evaluation::EvalError> for CliError {
    fn from(e: twinloc::evaluation::EvalError) -> Self {
        Self::Evaluation(e.to_string())
    }
}

impl From<twinloc::simkit::SimError> for CliError {
    fn from(e: twinloc::simkit::SimError) -> Self {
        Self::Simulation(e.to_string())
    }
}

impl From<twinloc::gnss::GnssError> for CliError {
    fn from(e: twinloc::gnss::GnssError) -> Self {
        Self::Gnss(e.to_string())
    }
}

impl From<twinloc::twin::MeshError> for CliError {
    fn from(e: twinloc::twin::MeshError) -> Self {
        Self::Simulation(e.to_string())
    }
}
