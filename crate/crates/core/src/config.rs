//! Run configuration and its TOML file form.
//!
//! Unknown keys are rejected at every level, and every section is validated
//! after parsing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, AgentData, PlantedAssignment, PopulationConfig};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::schedule::MetaLawSchedule;
use crate::specialized::LocalSolverConfig;

/// Where participating agents start their local solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalStart {
    /// The GMP of the agent's level-1 group.
    #[default]
    Group,
    /// The agent's own current parameters.
    Personal,
}

/// Vectors clustered when the hierarchy is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureFeatures {
    #[default]
    Params,
    /// The most recent local update (end minus start of the last solve).
    Updates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundOrder {
    #[default]
    AverageThenRestructure,
    RestructureThenAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FedAvgWeighting {
    #[default]
    Uniform,
    ShardSize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub rounds: usize,
    /// Fraction of agents sampled each round.
    pub participation: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    /// Hierarchy snapshot cadence in rounds; 0 disables snapshots.
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub local_start: LocalStart,
    #[serde(default)]
    pub structure_features: StructureFeatures,
    /// Rebuild the whole hierarchy at each restructure instead of adapting it.
    #[serde(default)]
    pub recluster: bool,
    #[serde(default)]
    pub order: RoundOrder,
    #[serde(default)]
    pub fedavg_weighting: FedAvgWeighting,
    /// Agents that pool their data into their level-1 group instead of training.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub limited_agents: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            rounds: 60,
            participation: 1.0,
            seed: 1,
            workers: 1,
            snapshot_every: 10,
            baseline: false,
            local_start: LocalStart::Group,
            structure_features: StructureFeatures::Params,
            recluster: false,
            order: RoundOrder::AverageThenRestructure,
            fedavg_weighting: FedAvgWeighting::Uniform,
            limited_agents: Vec::new(),
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSettings,
    pub model: ModelSpec,
    pub schedule: MetaLawSchedule,
    pub solver: LocalSolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<PopulationConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let population = PopulationConfig::default();
        RunConfig {
            run: RunSettings::default(),
            model: ModelSpec::softmax(population.features, population.classes),
            schedule: MetaLawSchedule::default(),
            solver: LocalSolverConfig::default(),
            population: Some(population),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.rounds == 0 {
            return Err(Error::config("run.rounds", "must be at least 1"));
        }
        if !(r.participation > 0.0 && r.participation <= 1.0) {
            return Err(Error::config("run.participation", "must lie in (0, 1]"));
        }
        if r.workers == 0 {
            return Err(Error::config("run.workers", "must be at least 1"));
        }
        self.model.validate()?;
        self.schedule.validate()?;
        self.solver.validate()?;
        match (&self.population, &r.data_dir) {
            (Some(p), None) => {
                p.validate()?;
                if p.features != self.model.features {
                    return Err(Error::config("model.features", "must equal population.features"));
                }
                if p.classes != self.model.classes {
                    return Err(Error::config("model.classes", "must equal population.classes"));
                }
            }
            (None, Some(_)) => {}
            (Some(_), Some(_)) => return Err(Error::config("run.data_dir", "give either [population] or run.data_dir, not both")),
            (None, None) => return Err(Error::config("population", "need [population] or run.data_dir")),
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Generates or reads the agent data this config points at.
    pub fn load_agents(&self) -> Result<(Vec<AgentData>, Option<PlantedAssignment>)> {
        if let Some(p) = &self.population {
            let (agents, assign) = data::generate_population(p)?;
            return Ok((agents, Some(assign)));
        }
        let dir = self.run.data_dir.as_ref().ok_or_else(|| Error::config("run.data_dir", "missing"))?;
        let (agents, manifest) = data::load_data_dir(dir)?;
        if manifest.features != self.model.features || manifest.classes != self.model.classes {
            return Err(Error::config("model", "feature/class counts disagree with the data manifest"));
        }
        Ok((agents, Some(manifest.assignment)))
    }
}
