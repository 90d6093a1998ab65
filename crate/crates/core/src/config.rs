//! Run configuration: a single JSON file describing calibration inputs,
//! population, market, environment and trainer settings for a run.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::environment::{EnvConfig, MarketState};
use crate::error::{SimError, SimResult};
use crate::population::PopulationSpec;
use crate::socialgraph::GraphSpec;
use crate::training::TrainerConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Number of independent cohorts rolled out under the frozen policy.
    pub cohorts: u32,
    /// Ticks per cohort.
    pub ticks: u32,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { cohorts: 4, ticks: 600 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Directory holding the calibration CSVs (occupations, income,
    /// unemployment, mortality).
    pub data_dir: PathBuf,
    /// Where metrics, checkpoints and logs are written.
    pub output_dir: PathBuf,
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
    #[serde(default)]
    pub population: PopulationSpec,
    #[serde(default)]
    pub graph: GraphSpec,
    #[serde(default)]
    pub market: MarketState,
    #[serde(default)]
    pub environment: EnvConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

impl RunConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> SimResult<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| SimError::Io { path: path.display().to_string(), source: e })?;
        let config: RunConfig = serde_json::from_reader(file)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> SimResult<()> {
        if !self.data_dir.is_dir() {
            return Err(SimError::Config(format!(
                "data_dir {} is not a directory",
                self.data_dir.display()
            )));
        }
        // population validation needs the occupation count and therefore
        // happens against the loaded tables at bootstrap time
        self.trainer.validate()?;
        if self.simulation.cohorts == 0 || self.simulation.ticks == 0 {
            return Err(SimError::Config("simulation needs at least one cohort and one tick".into()));
        }
        Ok(())
    }

    /// The fully-resolved configuration, defaults included, for echoing at
    /// the start of a run.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
