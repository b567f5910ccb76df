//! Run configuration: one TOML file describing a full pipeline run, with
//! every field overridable by a command-line flag. The fully resolved value
//! is echoed back so a run can be reproduced from its own output.

use std::path::{Path, PathBuf};

use rdae_core::corpus::SceneSpec;
use rdae_core::detector::CalibrationSpec;
use rdae_core::model::ModelConfig;
use rdae_core::trainer::TrainConfig;
use rdae_core::Error;
use serde::{Deserialize, Serialize};

type Result<T> = std::result::Result<T, Error>;

/// File-context wrapper for I/O failures (the core crate keeps its error
/// constructors private).
pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// Parse-context wrapper; exits with the validation status code.
pub(crate) fn parse_err(what: impl Into<String>, detail: impl ToString) -> Error {
    Error::Parse { what: what.into(), detail: detail.to_string() }
}

/// Default artifact locations, all optional; flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub band: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub scores: Option<PathBuf>,
}

/// Model, training, calibration and scene settings plus artifact paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationSpec,
    pub scene: SceneSpec,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Reads a config file, or returns defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                toml::from_str(&text).map_err(|e| parse_err(p.display().to_string(), e))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| parse_err("run configuration", e))
    }

    /// Prints the resolved configuration so the run is reproducible from its
    /// own output.
    pub fn echo(&self) -> Result<()> {
        println!("# resolved configuration");
        print!("{}", self.to_toml()?);
        println!("# end configuration");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_missing_sections_with_defaults() {
        let cfg: RunConfig =
            toml::from_str("[train]\nmax_epochs = 3\n[scene]\nseed = 7\n").unwrap();
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.scene.seed, 7);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[training]\nmax_epochs = 3\n").is_err());
    }
}
