use std::path::PathBuf;

use fedlodrop_core::network::FeasibilityReport;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] fedlodrop_core::Error),
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid TOML")]
    Toml(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("round {round}: no feasible allocation ({detail})")]
    Infeasible {
        round: u64,
        detail: String,
        report: Option<FeasibilityReport>,
    },
}

impl HarnessError {
    /// True for infeasibility, which the CLI reports with its own exit code.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            HarnessError::Infeasible { .. } | HarnessError::Core(fedlodrop_core::Error::Infeasible(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
