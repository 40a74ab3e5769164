use std::path::PathBuf;

use evonet_core::data::DataError;
use evonet_core::evolution::EvolutionError;
use evonet_core::genome::GenomeError;
use evonet_core::grammar::GrammarError;
use evonet_core::netbuilder::PlanError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    TomlRead(#[from] toml::de::Error),
    #[error("{0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Plan(#[from] PlanError),
    #[error("{0}")]
    Grammar(#[from] GrammarError),
    #[error("{0}")]
    Genome(#[from] GenomeError),
    #[error("{0}")]
    Evolution(#[from] EvolutionError),
    #[error("{0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}
