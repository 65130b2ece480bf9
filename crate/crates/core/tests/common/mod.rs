#![allow(dead_code)]

use hierfl::config::RunConfig;
use hierfl::data::PopulationConfig;

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// 20 agents, 2 planted clusters, Dirichlet 0.3, 60 rounds.
pub fn benchmark(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.seed = seed;
    cfg.run.rounds = 60;
    cfg.population =
        Some(PopulationConfig { num_agents: 20, num_clusters: 2, label_concentration: 0.3, seed, ..PopulationConfig::default() });
    cfg
}

/// Small and fast, for tests that only care about mechanics.
pub fn smoke(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.seed = seed;
    cfg.run.rounds = 8;
    cfg.schedule.warmup_rounds = 2;
    cfg.schedule.adapt_round = 4;
    cfg.schedule.special_round = 6;
    cfg.population = Some(PopulationConfig { num_agents: 8, samples_min: 40, samples_max: 60, seed, ..PopulationConfig::default() });
    cfg
}
