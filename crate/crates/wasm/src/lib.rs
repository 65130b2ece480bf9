//! Browser bindings for stepping a small simulation next to a flat baseline.
//! Exports take a TOML run config and return JSON.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use hierfl::config::RunConfig;
use hierfl::data::AgentData;
use hierfl::engine::{run_fedavg_baseline, RoundMetrics, Simulation};

#[derive(Serialize)]
struct RoundView {
    round: usize,
    stage: String,
    personal: f64,
    global: f64,
    fedavg_personal: Option<f64>,
    fedavg_global: Option<f64>,
    groups: Vec<Option<usize>>,
    changes: usize,
    eliminations: usize,
}

#[derive(Serialize)]
struct StepView {
    round: RoundView,
    finished: bool,
    dot: Option<String>,
    /// Level-1 group of each agent, `None` before construction.
    groups: Vec<Option<usize>>,
    planted: Vec<usize>,
}

#[derive(Serialize)]
struct SchedulePoint {
    round: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    resistance: f64,
    stage: String,
    restructure: bool,
}

fn parse(config: &str) -> Result<RunConfig, String> {
    let cfg = RunConfig::from_toml(config).map_err(|e| e.to_string())?;
    if cfg.population.is_none() {
        return Err("the browser demo needs a [population] section".into());
    }
    Ok(cfg)
}

/// Simulation plus a precomputed flat baseline on the same data.
pub struct Session {
    sim: Simulation,
    baseline: Vec<RoundMetrics>,
    planted: Vec<usize>,
}

impl Session {
    pub fn from_toml(config: &str) -> Result<Self, String> {
        let mut cfg = parse(config)?;
        cfg.run.workers = 1;
        let (data, planted): (Vec<AgentData>, _) = cfg.load_agents().map_err(|e| e.to_string())?;
        let baseline = run_fedavg_baseline(&cfg, &data).map_err(|e| e.to_string())?.metrics;
        let sim = Simulation::new(cfg, data).map_err(|e| e.to_string())?;
        Ok(Session { sim, baseline, planted: planted.map(|p| p.0).unwrap_or_default() })
    }

    pub fn step_json(&mut self) -> Result<String, String> {
        if self.sim.is_finished() {
            return Err("run already finished".into());
        }
        let m = self.sim.step().map_err(|e| e.to_string())?.clone();
        let base = self.baseline.get(m.round);
        let view = StepView {
            round: RoundView {
                round: m.round,
                stage: m.stage.map(|s| s.to_string()).unwrap_or_default(),
                personal: m.mean_personal_acc,
                global: m.global_acc,
                fedavg_personal: base.map(|b| b.mean_personal_acc),
                fedavg_global: base.map(|b| b.global_acc),
                groups: m.groups_per_level,
                changes: m.group_changes,
                eliminations: m.eliminations,
            },
            finished: self.sim.is_finished(),
            dot: match self.sim.hierarchy() {
                Some(h) => Some(h.snapshot(m.round).to_dot().map_err(|e| e.to_string())?),
                None => None,
            },
            groups: (0..self.sim.agents().len()).map(|a| self.sim.hierarchy().and_then(|h| h.group_of(a))).collect(),
            planted: self.planted.clone(),
        };
        serde_json::to_string(&view).map_err(|e| e.to_string())
    }

    pub fn finished(&self) -> bool {
        self.sim.is_finished()
    }
}

pub fn schedule_json(config: &str, rounds: usize) -> Result<String, String> {
    let cfg = RunConfig::from_toml(config).map_err(|e| e.to_string())?;
    let s = &cfg.schedule;
    let points: Vec<SchedulePoint> = (0..rounds)
        .map(|t| SchedulePoint {
            round: t,
            alpha: s.alpha(t),
            beta: s.beta(t),
            gamma: s.gamma(t),
            resistance: s.resistance(t),
            stage: s.stage(t).to_string(),
            restructure: s.restructure_due(t),
        })
        .collect();
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

pub fn demo_config() -> String {
    let mut cfg = RunConfig::default();
    cfg.run.rounds = 40;
    cfg.run.participation = 0.75;
    cfg.run.snapshot_every = 0;
    cfg.schedule.adapt_round = 8;
    cfg.schedule.special_round = 20;
    if let Some(p) = cfg.population.as_mut() {
        p.num_agents = 12;
    }
    cfg.to_toml()
}

#[wasm_bindgen(js_name = Session)]
pub struct JsSession(Session);

#[wasm_bindgen(js_class = Session)]
impl JsSession {
    #[wasm_bindgen(constructor)]
    pub fn new(config: &str) -> Result<JsSession, JsError> {
        Session::from_toml(config).map(JsSession).map_err(|e| JsError::new(&e))
    }

    /// Runs one round and returns its view as JSON.
    pub fn step(&mut self) -> Result<String, JsError> {
        self.0.step_json().map_err(|e| JsError::new(&e))
    }

    pub fn finished(&self) -> bool {
        self.0.finished()
    }
}

#[wasm_bindgen(js_name = scheduleCurves)]
pub fn schedule_curves(config: &str, rounds: usize) -> Result<String, JsError> {
    schedule_json(config, rounds).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = defaultConfig)]
pub fn default_config() -> String {
    demo_config()
}
