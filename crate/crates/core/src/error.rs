//! Top-level error type for orchestration, mapped to process exit codes.

use std::path::PathBuf;

use thiserror::Error;

use crate::gbt::GbtError;
use crate::panel::PanelError;
use crate::portfolio::PortfolioError;
use crate::stats::StatsError;
use crate::synth::GenerationError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("model fit: {0}")]
    Gbt(#[from] GbtError),
    #[error("numerical: {0}")]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for data problems, 4 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Generation(_) => 2,
            Error::Panel(PanelError::UnknownHorizon(_)) => 2,
            Error::Gbt(GbtError::InvalidConfig(_)) => 2,
            Error::Io { .. } | Error::Panel(_) | Error::Portfolio(_) => 3,
            Error::Gbt(_) | Error::Stats(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Panel(PanelError::Schema("x".into())).exit_code(), 3);
        assert_eq!(Error::Stats(StatsError::SingularDesign).exit_code(), 4);
    }
}
