//! The round loop.
//!
//! Per round `t`: sample participants, run local solves in parallel (plain
//! local training during warm-up, proximal training afterwards), build the
//! hierarchy at the construction round, average GMPs bottom-up with
//! `gamma(t)`, restructure when due, then record metrics. All reductions
//! run in ascending agent/node id order, so outputs do not depend on the
//! worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FedAvgWeighting, LocalStart, RoundOrder, RunConfig, StructureFeatures};
use crate::data::AgentData;
use crate::error::{Error, Result};
use crate::generalization::update_all_levels;
use crate::hierarchy::{dist, AgentId, Hierarchy, NodeId, Snapshot};
use crate::model::{self, init_params, DatasetShard, ModelParams, ModelSpec};
use crate::schedule::Stage;
use crate::specialized::{local_update, AncestorContext};

const SAMPLE_STREAM: u64 = 1;
const LOCAL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const ONBOARD_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: AgentId,
    pub train: DatasetShard,
    pub test: DatasetShard,
    pub params: ModelParams,
    /// End minus start of the most recent local solve.
    pub last_update: Option<ModelParams>,
    pub rounds_participated: usize,
    pub last_round: Option<usize>,
    /// First round this agent may be sampled in.
    pub active_from: usize,
    pub limited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub resistance: f64,
    /// `None` for the flat baseline.
    pub stage: Option<Stage>,
    pub participants: usize,
    pub mean_train_loss: f64,
    pub mean_personal_acc: f64,
    /// Mean accuracy of each agent's level-k ancestor GMP on its own test
    /// shard, k = 1..=K+1. Entries are `None` before construction; empty
    /// for the baseline.
    pub level_acc: Vec<Option<f64>>,
    pub global_acc: f64,
    pub groups_per_level: Vec<Option<usize>>,
    pub group_changes: usize,
    pub eliminations: usize,
    pub mean_group_distance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub hierarchy: Option<Hierarchy>,
    pub params: Vec<ModelParams>,
    pub snapshots: Vec<Snapshot>,
}

fn round_err(round: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Round { round, source: Box::new(e) }
}

/// Sorted ids of `ceil(fraction * n)` agents drawn without replacement.
fn sample_participants(eligible: &[AgentId], fraction: f64, seed: u64, t: usize) -> Vec<AgentId> {
    let n = eligible.len();
    if n == 0 {
        return Vec::new();
    }
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(&[seed, SAMPLE_STREAM, t as u64]));
    let mut picked: Vec<AgentId> = rand::seq::index::sample(&mut rng, n, k).into_iter().map(|i| eligible[i]).collect();
    picked.sort_unstable();
    picked
}

/// Order-preserving map, parallel when a pool is available.
struct Workers {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    fn new(count: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let pool = if count > 1 {
                Some(rayon::ThreadPoolBuilder::new().num_threads(count).build().map_err(|e| Error::config("run.workers", e.to_string()))?)
            } else {
                None
            };
            Ok(Workers { pool })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = count;
            Ok(Workers {})
        }
    }

    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}

fn weighted_mean(params: impl IntoIterator<Item = (ModelParams, f64)>, dim: usize) -> ModelParams {
    let items: Vec<_> = params.into_iter().collect();
    let total: f64 = items.iter().map(|i| i.1).sum();
    let mut out = ModelParams::zeros(dim);
    for (p, w) in &items {
        out.axpy(w / total, p);
    }
    out
}

/// A unit of local work for one round.
enum Task {
    Agent(AgentId),
    /// Pooled data of limited members of one level-1 group.
    Group(NodeId, Vec<AgentId>),
}

pub struct Simulation {
    cfg: RunConfig,
    agents: Vec<AgentState>,
    hierarchy: Option<Hierarchy>,
    next_round: usize,
    metrics: Vec<RoundMetrics>,
    snapshots: Vec<Snapshot>,
    workers: Workers,
}

impl Simulation {
    /// `data[i].id` must equal `i`.
    pub fn new(cfg: RunConfig, data: Vec<AgentData>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyAgents);
        }
        let w0 = init_params(&cfg.model, crate::mix_seed(&[cfg.run.seed, INIT_STREAM]));
        let mut agents = Vec::with_capacity(data.len());
        for (i, a) in data.into_iter().enumerate() {
            if a.id != i {
                return Err(Error::config("agents", format!("agent ids must be 0..n in order; found {} at {i}", a.id)));
            }
            if a.train.is_empty() {
                return Err(Error::config("agents", format!("agent {i} has no training data")));
            }
            agents.push(AgentState {
                id: a.id,
                limited: cfg.run.limited_agents.contains(&a.id),
                train: a.train,
                test: a.test,
                params: w0.clone(),
                last_update: None,
                rounds_participated: 0,
                last_round: None,
                active_from: 0,
            });
        }
        let workers = Workers::new(cfg.run.workers)?;
        Ok(Simulation { cfg, agents, hierarchy: None, next_round: 0, metrics: Vec::new(), snapshots: Vec::new(), workers })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn hierarchy(&self) -> Option<&Hierarchy> {
        self.hierarchy.as_ref()
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn next_round(&self) -> usize {
        self.next_round
    }

    pub fn is_finished(&self) -> bool {
        self.next_round >= self.cfg.run.rounds
    }

    fn params(&self) -> Vec<ModelParams> {
        self.agents.iter().map(|a| a.params.clone()).collect()
    }

    fn ancestor_context(&self, h: &Hierarchy, node: NodeId, skip: usize) -> AncestorContext {
        let mut levels = Vec::new();
        let mut cur = Some(node);
        while let Some(id) = cur {
            let n = h.node(id).expect("ancestor");
            levels.push((n.gmp.clone(), n.member_count));
            cur = n.parent;
        }
        AncestorContext::new(levels.into_iter().skip(skip))
    }

    /// Runs one round and returns its metrics.
    pub fn step(&mut self) -> Result<&RoundMetrics> {
        let t = self.next_round;
        self.step_inner(t).map_err(round_err(t))?;
        self.next_round += 1;
        Ok(self.metrics.last().expect("just pushed"))
    }

    fn step_inner(&mut self, t: usize) -> Result<()> {
        let sched = self.cfg.schedule.clone();
        let stage = sched.stage(t);
        let (alpha, beta, gamma) = (sched.alpha(t), sched.beta(t), sched.gamma(t));
        let eligible: Vec<AgentId> = self.agents.iter().filter(|a| a.active_from <= t).map(|a| a.id).collect();
        let participants = sample_participants(&eligible, self.cfg.run.participation, self.cfg.run.seed, t);

        if stage == Stage::Construction && self.hierarchy.is_none() {
            self.hierarchy = Some(self.construct()?);
        }

        self.train_participants(t, &participants, alpha, beta)?;

        let mut group_changes = 0;
        let mut eliminations = 0;
        if self.hierarchy.is_some() {
            let restructure = stage >= Stage::Adaptation && sched.restructure_due(t);
            match self.cfg.run.order {
                RoundOrder::AverageThenRestructure => {
                    self.average(gamma)?;
                    if restructure {
                        (group_changes, eliminations) = self.restructure(t)?;
                    }
                }
                RoundOrder::RestructureThenAverage => {
                    if restructure {
                        (group_changes, eliminations) = self.restructure(t)?;
                    }
                    self.average(gamma)?;
                }
            }
        }

        let m = self.measure(t, participants.len(), group_changes, eliminations)?;
        self.metrics.push(m);
        let every = self.cfg.run.snapshot_every;
        if let Some(h) = &self.hierarchy {
            if every > 0 && t.is_multiple_of(every) {
                self.snapshots.push(h.snapshot(t));
            }
        }
        Ok(())
    }

    fn construct(&self) -> Result<Hierarchy> {
        let params = self.params();
        let features: Vec<ModelParams> = match self.cfg.run.structure_features {
            StructureFeatures::Params => params.clone(),
            StructureFeatures::Updates => {
                self.agents.iter().map(|a| a.last_update.clone().unwrap_or_else(|| ModelParams::zeros(a.params.dim()))).collect()
            }
        };
        Hierarchy::build_with_features(&features, &params, &self.cfg.schedule)
    }

    fn train_participants(&mut self, t: usize, participants: &[AgentId], alpha: f64, beta: f64) -> Result<()> {
        let spec = self.cfg.model;
        let solver = self.cfg.solver.clone();
        let seed = crate::mix_seed(&[self.cfg.run.seed, LOCAL_STREAM, t as u64]);

        let mut tasks = Vec::new();
        let mut pooled: std::collections::BTreeMap<NodeId, Vec<AgentId>> = Default::default();
        for &a in participants {
            match (&self.hierarchy, self.agents[a].limited) {
                (Some(h), true) => pooled.entry(h.group_of(a).expect("member")).or_default().push(a),
                _ => tasks.push(Task::Agent(a)),
            }
        }
        tasks.extend(pooled.into_iter().map(|(g, members)| Task::Group(g, members)));

        // (start, context, shard) per task, gathered before the parallel phase
        let mut jobs: Vec<(ModelParams, AncestorContext, DatasetShard, f64)> = Vec::with_capacity(tasks.len());
        for task in &tasks {
            match (task, &self.hierarchy) {
                (Task::Agent(a), None) => {
                    let ag = &self.agents[*a];
                    jobs.push((ag.params.clone(), AncestorContext::default(), ag.train.clone(), 0.0));
                }
                (Task::Agent(a), Some(h)) => {
                    let ag = &self.agents[*a];
                    let g = h.group_of(*a).expect("member");
                    let start = match self.cfg.run.local_start {
                        LocalStart::Group => h.node(g).expect("group").gmp.clone(),
                        LocalStart::Personal => ag.params.clone(),
                    };
                    jobs.push((start, self.ancestor_context(h, g, 0), ag.train.clone(), beta));
                }
                (Task::Group(g, members), Some(h)) => {
                    let examples = members.iter().flat_map(|&m| self.agents[m].train.examples.iter().cloned()).collect();
                    let gmp = h.node(*g).expect("group").gmp.clone();
                    // the group is the trainee: its own GMP is the start, levels >= 2 the ancestors
                    jobs.push((gmp, self.ancestor_context(h, *g, 1), DatasetShard::new(*g, examples), beta));
                }
                (Task::Group(..), None) => unreachable!("group tasks need a hierarchy"),
            }
        }
        let results = self.workers.map(&jobs, |(start, ctx, shard, beta)| {
            local_update(&spec, start, shard, ctx, alpha, *beta, &solver, seed).map(|w| {
                let mut delta = w.clone();
                delta.axpy(-1.0, start);
                (w, delta)
            })
        });
        for (task, res) in tasks.iter().zip(results) {
            let (w, delta) = res?;
            let members: Vec<AgentId> = match task {
                Task::Agent(a) => vec![*a],
                Task::Group(_, m) => m.clone(),
            };
            for a in members {
                let ag = &mut self.agents[a];
                ag.params = w.clone();
                ag.last_update = Some(delta.clone());
                ag.rounds_participated += 1;
                ag.last_round = Some(t);
            }
        }
        Ok(())
    }

    fn average(&mut self, gamma: f64) -> Result<()> {
        let params = self.params();
        let h = self.hierarchy.as_mut().expect("built");
        update_all_levels(h, &params, gamma)
    }

    fn restructure(&mut self, t: usize) -> Result<(usize, usize)> {
        let params = self.params();
        let sched = &self.cfg.schedule;
        let h = self.hierarchy.as_mut().expect("built");
        if self.cfg.run.recluster {
            let before = h.level1_labels();
            // GMPs restart at member means
            let mut rebuilt = Hierarchy::rebuild(&params, sched)?;
            let changes = count_label_changes(&before, &rebuilt.level1_labels());
            std::mem::swap(h, &mut rebuilt);
            return Ok((changes, 0));
        }
        let moves = h.adapt(&params, t, sched)?;
        let replaced = h.eliminate_outliers(&params, sched)?;
        debug_assert!(h.validate().is_ok(), "{:?}", h.validate());
        let relocated = replaced.iter().filter(|c| c.from != c.to).count();
        Ok((moves.len() + relocated, replaced.len()))
    }

    fn measure(&self, t: usize, participants: usize, group_changes: usize, eliminations: usize) -> Result<RoundMetrics> {
        let spec = &self.cfg.model;
        let sched = &self.cfg.schedule;
        let present: Vec<&AgentState> = self.agents.iter().collect();
        let n = present.len() as f64;
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for a in &present {
            loss_sum += model::loss(spec, &a.params, &a.train)?;
            acc_sum += shard_accuracy(spec, &a.params, &a.test);
        }
        let levels = sched.max_levels + 1;
        let (level_acc, groups_per_level, global_model, mean_group_distance) = match &self.hierarchy {
            Some(h) => {
                let mut sums = vec![0.0; levels];
                for a in &present {
                    for (k, node) in h.ancestors(a.id).into_iter().enumerate() {
                        sums[k] += shard_accuracy(spec, &h.node(node).expect("ancestor").gmp, &a.test);
                    }
                }
                let gmps: Vec<&ModelParams> = h.level_nodes(1).into_iter().map(|id| &h.node(id).unwrap().gmp).collect();
                (
                    sums.into_iter().map(|s| Some(s / n)).collect(),
                    h.groups_per_level().into_iter().map(Some).collect(),
                    h.root().expect("root").gmp.clone(),
                    Some(mean_pairwise(&gmps)),
                )
            }
            None => {
                (vec![None; levels], vec![None; levels], weighted_mean(present.iter().map(|a| (a.params.clone(), 1.0)), spec.dim()), None)
            }
        };
        Ok(RoundMetrics {
            round: t,
            alpha: sched.alpha(t),
            beta: sched.beta(t),
            gamma: sched.gamma(t),
            resistance: sched.resistance(t),
            stage: Some(sched.stage(t)),
            participants,
            mean_train_loss: loss_sum / n,
            mean_personal_acc: acc_sum / n,
            level_acc,
            global_acc: pooled_accuracy(spec, &global_model, present.iter().map(|a| &a.test)),
            groups_per_level,
            group_changes,
            eliminations,
            mean_group_distance,
        })
    }

    /// Adds agents after construction. Each newcomer starts from the root
    /// GMP, runs one local solve on its own data so its parameters reflect
    /// that data, is placed top-down, and then adopts its level-1 group's
    /// GMP. It is sampled from the next round on. Returns the groups joined.
    pub fn onboard_agents(&mut self, newcomers: Vec<AgentData>) -> Result<Vec<NodeId>> {
        let Some(h) = self.hierarchy.as_ref() else {
            return Err(Error::HierarchyNotBuilt);
        };
        let t = self.next_round.saturating_sub(1);
        let spec = self.cfg.model;
        let root = h.root().expect("root").gmp.clone();
        let mut joined = Vec::with_capacity(newcomers.len());
        for data in newcomers {
            if data.id < self.agents.len() {
                return Err(Error::DuplicateAgent(data.id));
            }
            if data.id != self.agents.len() {
                return Err(Error::config("agents", format!("next agent id must be {}, got {}", self.agents.len(), data.id)));
            }
            if data.train.is_empty() {
                return Err(Error::config("agents", format!("agent {} has no training data", data.id)));
            }
            let seed = crate::mix_seed(&[self.cfg.run.seed, ONBOARD_STREAM, t as u64]);
            let probe = local_update(
                &spec,
                &root,
                &data.train,
                &AncestorContext::default(),
                self.cfg.schedule.alpha(t),
                0.0,
                &self.cfg.solver,
                seed,
            )?;
            let h = self.hierarchy.as_mut().expect("built");
            let group = h.place_new_agent(data.id, &probe)?;
            let params = h.node(group).expect("group").gmp.clone();
            debug_assert!(h.validate().is_ok());
            self.agents.push(AgentState {
                id: data.id,
                limited: self.cfg.run.limited_agents.contains(&data.id),
                train: data.train,
                test: data.test,
                params,
                last_update: None,
                rounds_participated: 0,
                last_round: None,
                active_from: self.next_round,
            });
            joined.push(group);
        }
        Ok(joined)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_output(self) -> RunOutput {
        RunOutput {
            params: self.agents.iter().map(|a| a.params.clone()).collect(),
            metrics: self.metrics,
            hierarchy: self.hierarchy,
            snapshots: self.snapshots,
        }
    }
}

fn count_label_changes(before: &std::collections::BTreeMap<AgentId, NodeId>, after: &std::collections::BTreeMap<AgentId, NodeId>) -> usize {
    // agents whose set of co-members differs
    let agents: Vec<AgentId> = before.keys().copied().collect();
    agents.iter().filter(|&&a| agents.iter().any(|&b| (before[&a] == before[&b]) != (after.get(&a) == after.get(&b)))).count()
}

fn mean_pairwise(points: &[&ModelParams]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            sum += dist(points[i], points[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

fn shard_accuracy(spec: &ModelSpec, w: &ModelParams, shard: &DatasetShard) -> f64 {
    let (hit, n) = model::count_correct(spec, w, &shard.examples);
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

fn pooled_accuracy<'a>(spec: &ModelSpec, w: &ModelParams, shards: impl Iterator<Item = &'a DatasetShard>) -> f64 {
    let (mut hit, mut n) = (0, 0);
    for s in shards {
        let (h, m) = model::count_correct(spec, w, &s.examples);
        hit += h;
        n += m;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Runs the full schedule.
pub fn run(cfg: RunConfig, data: Vec<AgentData>) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg, data)?;
    sim.run_to_end()?;
    Ok(sim.into_output())
}

/// Output of the flat baseline.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub metrics: Vec<RoundMetrics>,
    /// Global model after each round.
    pub global_trajectory: Vec<ModelParams>,
    pub params: Vec<ModelParams>,
}

/// Flat federated averaging on the same data, sampling and seeds: sampled
/// agents run plain local SGD from the global model, which is replaced by
/// the mean of their results.
pub fn run_fedavg_baseline(cfg: &RunConfig, data: &[AgentData]) -> Result<BaselineOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyAgents);
    }
    let spec = cfg.model;
    let workers = Workers::new(cfg.run.workers)?;
    let mut global = init_params(&spec, crate::mix_seed(&[cfg.run.seed, INIT_STREAM]));
    let mut personal: Vec<ModelParams> = vec![global.clone(); data.len()];
    let all: Vec<AgentId> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.run.rounds);
    let mut trajectory = Vec::with_capacity(cfg.run.rounds);
    for t in 0..cfg.run.rounds {
        let participants = sample_participants(&all, cfg.run.participation, cfg.run.seed, t);
        let seed = crate::mix_seed(&[cfg.run.seed, LOCAL_STREAM, t as u64]);
        let start = global.clone();
        let results = workers
            .map(&participants, |&a| local_update(&spec, &start, &data[a].train, &AncestorContext::default(), 1.0, 0.0, &cfg.solver, seed));
        let mut returned = Vec::with_capacity(participants.len());
        for (&a, r) in participants.iter().zip(results) {
            let w = r.map_err(round_err(t))?;
            personal[a] = w.clone();
            let weight = match cfg.run.fedavg_weighting {
                FedAvgWeighting::Uniform => 1.0,
                FedAvgWeighting::ShardSize => data[a].train.len() as f64,
            };
            returned.push((w, weight));
        }
        global = weighted_mean(returned, spec.dim());
        trajectory.push(global.clone());

        let n = data.len() as f64;
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for (a, w) in data.iter().zip(&personal) {
            loss_sum += model::loss(&spec, w, &a.train).map_err(round_err(t))?;
            acc_sum += shard_accuracy(&spec, w, &a.test);
        }
        metrics.push(RoundMetrics {
            round: t,
            alpha: 1.0,
            beta: 0.0,
            gamma: 1.0,
            resistance: 0.0,
            stage: None,
            participants: participants.len(),
            mean_train_loss: loss_sum / n,
            mean_personal_acc: acc_sum / n,
            level_acc: Vec::new(),
            global_acc: pooled_accuracy(&spec, &global, data.iter().map(|a| &a.test)),
            groups_per_level: Vec::new(),
            group_changes: 0,
            eliminations: 0,
            mean_group_distance: None,
        });
    }
    Ok(BaselineOutput { metrics, global_trajectory: trajectory, params: personal })
}
