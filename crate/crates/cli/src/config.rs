use std::path::Path;

use jpinn::datio::SplitConfig;
use jpinn::ensemble::EnsembleConfig;
use jpinn::simdata::Scenario;
use jpinn::trainer::{Mode, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Bundled run configuration used when no `--config` is given.
pub const BUNDLED_RUN: &str = include_str!("../configs/plume-small.toml");
/// Bundled scenario (the same one the run configuration embeds).
pub const BUNDLED_SCENARIO: &str = include_str!("../scenarios/plume-small.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub repeats: usize,
    /// Cap on evaluation rows; 0 uses all of them.
    pub max_rows: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig { repeats: 5, max_rows: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceConfig {
    pub seeds: Vec<u64>,
    /// Modes trained on every seed's split.
    pub modes: Vec<Mode>,
    pub ensemble: bool,
    /// Weeks of the scenario used for the ensemble stage; 0 keeps the scenario's own.
    pub ensemble_weeks: usize,
    /// Epochs per ensemble member; 0 keeps `train.epochs`.
    pub ensemble_epochs: usize,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        ReproduceConfig {
            seeds: vec![1, 2, 3, 4, 5],
            modes: vec![Mode::Joint, Mode::Separate, Mode::BaselineNoPhysics],
            ensemble: true,
            ensemble_weeks: 0,
            ensemble_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into the train and split seeds on resolve.
    pub seed: u64,
    pub scenario: Scenario,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub ensemble: EnsembleConfig,
    pub importance: ImportanceConfig,
    pub reproduce: ReproduceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenario: Scenario::plume_small(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            ensemble: EnsembleConfig::default(),
            importance: ImportanceConfig::default(),
            reproduce: ReproduceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED_RUN).expect("bundled config parses")
    }

    /// Read `path`, or the bundled configuration when `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::bundled()),
        }
    }

    /// Apply command-line overrides and propagate the master seed.
    pub fn resolve(mut self, seed: Option<u64>, mode: Option<Mode>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(m) = mode {
            self.train.mode = m;
        }
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        self.train.seed = self.seed;
        self.split.seed = self.seed;
        self.train.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved configuration as `config.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }
}

pub fn scenario_from_toml(text: &str) -> Result<Scenario, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(format!("scenario: {e}")))
}

pub fn load_scenario(path: Option<&Path>) -> Result<Scenario, CliError> {
    match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            scenario_from_toml(&text)
        }
        None => scenario_from_toml(BUNDLED_SCENARIO),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_round_trips() {
        let cfg = RunConfig::bundled();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.scenario, load_scenario(None).unwrap());
    }

    #[test]
    fn resolve_propagates_the_master_seed() {
        let cfg = RunConfig::bundled().resolve(Some(42), Some(Mode::Separate)).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.split.seed), (42, 42, 42));
        assert_eq!(cfg.train.mode, Mode::Separate);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        assert_eq!(RunConfig::from_toml("bogus = 1").unwrap_err().exit_code(), 2);
        assert_eq!(RunConfig::bundled().resolve(Some(u64::MAX), None).unwrap_err().exit_code(), 2);
        let mut cfg = RunConfig::bundled();
        cfg.train.epochs = 0;
        assert_eq!(cfg.resolve(None, None).unwrap_err().exit_code(), 2);
    }
}
