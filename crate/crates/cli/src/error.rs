use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("unsupported device {0:?}; only \"cpu\" is available")]
    Device(String),
    #[error("{0}")]
    Load(String),
    #[error(transparent)]
    Core(#[from] kpinr_core::CoreError),
    #[error(transparent)]
    Nn(#[from] kpinr_nn::NnError),
    #[error(transparent)]
    Baseline(#[from] kpinr_baselines::BaselineError),
    #[error(transparent)]
    Eval(#[from] kpinr_eval::EvalError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Format { path: path.into(), msg: msg.into() }
    }

    /// 1 for usage and configuration errors, 2 for everything that fails
    /// at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Format { .. } => "format",
            Self::Io { .. } => "io",
            Self::Locked(_) => "locked",
            Self::Device(_) => "device",
            Self::Load(_) => "load",
            Self::Core(_) => "core",
            Self::Nn(_) => "training",
            Self::Baseline(_) => "baseline",
            Self::Eval(_) => "evaluation",
        }
    }

    /// Single-line `kpinr: error kind=<kind> msg=<json string>` diagnostic.
    pub fn diagnostic(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).unwrap_or_else(|_| "\"?\"".into());
        format!("kpinr: error kind={} msg={msg}", self.kind())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
