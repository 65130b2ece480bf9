//! The tree of specialized groups.
//!
//! Levels `1..=K` come from cutting an average-linkage dendrogram of agent
//! parameters at the per-level thresholds; level `K + 1` is a single root
//! holding the globally shared model. Level-1 groups list agent ids as
//! children, higher levels list group node ids. Children are kept sorted.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkage;
use crate::model::ModelParams;
use crate::schedule::{MetaLawSchedule, Stage};

pub type NodeId = usize;
pub type AgentId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNode {
    pub id: NodeId,
    pub level: usize,
    pub gmp: ModelParams,
    pub member_count: usize,
    /// Agent ids at level 1, child node ids above.
    pub children: Vec<usize>,
    pub parent: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    /// Number of cut levels; the root sits one above.
    max_levels: usize,
    dim: usize,
    nodes: BTreeMap<NodeId, GroupNode>,
    root: Option<NodeId>,
    agent_group: BTreeMap<AgentId, NodeId>,
    next_id: NodeId,
}

/// An agent moving between level-1 groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupChange {
    pub agent: AgentId,
    pub from: NodeId,
    pub to: NodeId,
}

/// First broken invariant found by [`Hierarchy::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub nodes: Vec<NodeId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (nodes {:?})", self.message, self.nodes)
    }
}

impl std::error::Error for Violation {}

/// Euclidean distance between two parameter vectors.
pub fn distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    b.check_dim(a.dim())?;
    Ok(dist(a, b))
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn weighted_mean<'a>(dim: usize, parts: impl IntoIterator<Item = (&'a [f64], usize)>) -> ModelParams {
    let parts: Vec<_> = parts.into_iter().collect();
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut out = ModelParams::zeros(dim);
    for (v, n) in parts {
        out.axpy(n as f64 / total as f64, v);
    }
    out
}

/// Nearest node by `(distance, id)`.
fn nearest<'a>(target: &[f64], candidates: impl IntoIterator<Item = (NodeId, &'a [f64])>) -> Option<(NodeId, f64)> {
    let mut best: Option<(NodeId, f64)> = None;
    for (id, gmp) in candidates {
        let d = dist(target, gmp);
        match best {
            Some((bid, bd)) if (bd, bid) <= (d, id) => {}
            _ => best = Some((id, d)),
        }
    }
    best
}

impl Hierarchy {
    pub fn empty(max_levels: usize, dim: usize) -> Self {
        Hierarchy { max_levels, dim, nodes: BTreeMap::new(), root: None, agent_group: BTreeMap::new(), next_id: 0 }
    }

    /// Clusters the agents (`params[i]` belongs to agent `i`) and cuts the
    /// dendrogram once per level.
    pub fn build_initial(params: &[ModelParams], sched: &MetaLawSchedule) -> Result<Self> {
        Self::build_with_features(params, params, sched)
    }

    /// Like [`build_initial`](Self::build_initial) but clusters `features[i]`
    /// (e.g. recent updates) while GMPs still start from `params`.
    pub fn build_with_features(features: &[ModelParams], params: &[ModelParams], sched: &MetaLawSchedule) -> Result<Self> {
        let first = params.first().ok_or(Error::EmptyAgents)?;
        let dim = first.dim();
        for p in params {
            p.check_dim(dim)?;
        }
        if features.len() != params.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), found: features.len() });
        }
        let n = params.len();
        let dmat: Vec<Vec<f64>> = features.iter().map(|a| features.iter().map(|b| dist(a, b)).collect()).collect();
        let merges = linkage::average_linkage(&dmat);
        let k_max = sched.max_levels;
        let mut h = Hierarchy::empty(k_max, dim);

        // group ids of the previous level, indexed by that level's label
        let mut prev_nodes: Vec<NodeId> = Vec::new();
        let mut prev_labels: Vec<usize> = Vec::new();
        for k in 1..=k_max {
            let labels = linkage::cut(&merges, n, sched.thresholds[k - 1]);
            let groups = labels.iter().max().map_or(0, |m| m + 1);
            let ids: Vec<NodeId> = (0..groups).map(|_| h.alloc_id()).collect();
            let mut children: Vec<Vec<usize>> = vec![Vec::new(); groups];
            if k == 1 {
                for (agent, &g) in labels.iter().enumerate() {
                    children[g].push(agent);
                    h.agent_group.insert(agent, ids[g]);
                }
            } else {
                let mut seen = vec![false; prev_nodes.len()];
                for (agent, &g) in labels.iter().enumerate() {
                    let child = prev_labels[agent];
                    if !seen[child] {
                        seen[child] = true;
                        children[g].push(prev_nodes[child]);
                    }
                }
            }
            for (g, kids) in children.into_iter().enumerate() {
                h.nodes.insert(
                    ids[g],
                    GroupNode { id: ids[g], level: k, gmp: ModelParams::zeros(dim), member_count: 0, children: kids, parent: None },
                );
            }
            prev_nodes = ids;
            prev_labels = labels;
        }
        let root = h.alloc_id();
        h.nodes.insert(
            root,
            GroupNode { id: root, level: k_max + 1, gmp: ModelParams::zeros(dim), member_count: 0, children: prev_nodes, parent: None },
        );
        h.root = Some(root);
        h.relink_parents();
        h.recompute_counts();
        h.init_gmps(params);
        h.validate().map_err(|v| Error::Schema(v.to_string()))?;
        Ok(h)
    }

    fn alloc_id(&mut self) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn relink_parents(&mut self) {
        let links: Vec<(NodeId, NodeId)> =
            self.nodes.values().filter(|n| n.level > 1).flat_map(|n| n.children.iter().map(move |&c| (c, n.id))).collect();
        for (child, parent) in links {
            self.nodes.get_mut(&child).expect("child exists").parent = Some(parent);
        }
    }

    /// Count-weighted means bottom-up, from the agents' parameters.
    fn init_gmps(&mut self, params: &[ModelParams]) {
        for k in 1..=self.max_levels + 1 {
            for id in self.level_nodes(k) {
                let node = &self.nodes[&id];
                let gmp = if k == 1 {
                    weighted_mean(self.dim, node.children.iter().map(|&a| (&params[a][..], 1)))
                } else {
                    weighted_mean(self.dim, node.children.iter().map(|c| (&self.nodes[c].gmp[..], self.nodes[c].member_count)))
                };
                self.nodes.get_mut(&id).unwrap().gmp = gmp;
            }
        }
    }

    /// Member counts bottom-up from the level-1 agent lists.
    fn recompute_counts(&mut self) {
        for k in 1..=self.max_levels + 1 {
            for id in self.level_nodes(k) {
                let count = if k == 1 {
                    self.nodes[&id].children.len()
                } else {
                    self.nodes[&id].children.iter().map(|c| self.nodes[c].member_count).sum()
                };
                self.nodes.get_mut(&id).unwrap().member_count = count;
            }
        }
    }

    /// Removes empty groups bottom-up. The root goes only when no agents remain.
    fn prune_empty(&mut self) {
        for k in 1..=self.max_levels + 1 {
            for id in self.level_nodes(k) {
                let node = &self.nodes[&id];
                if node.member_count > 0 {
                    continue;
                }
                if let Some(p) = node.parent {
                    self.nodes.get_mut(&p).unwrap().children.retain(|&c| c != id);
                }
                self.nodes.remove(&id);
                if self.root == Some(id) {
                    self.root = None;
                }
            }
        }
    }

    pub fn max_levels(&self) -> usize {
        self.max_levels
    }

    /// Levels including the root.
    pub fn num_levels(&self) -> usize {
        self.max_levels + 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> Option<&GroupNode> {
        self.root.map(|r| &self.nodes[&r])
    }

    pub fn node(&self, id: NodeId) -> Option<&GroupNode> {
        self.nodes.get(&id)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut GroupNode> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GroupNode> {
        self.nodes.values()
    }

    /// Node ids at level `k`, ascending.
    pub fn level_nodes(&self, k: usize) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.level == k).map(|n| n.id).collect()
    }

    pub fn groups_per_level(&self) -> Vec<usize> {
        (1..=self.num_levels()).map(|k| self.level_nodes(k).len()).collect()
    }

    pub fn agent_count(&self) -> usize {
        self.agent_group.len()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.agent_group.keys().copied()
    }

    pub fn contains_agent(&self, agent: AgentId) -> bool {
        self.agent_group.contains_key(&agent)
    }

    pub fn group_of(&self, agent: AgentId) -> Option<NodeId> {
        self.agent_group.get(&agent).copied()
    }

    /// Ancestor node ids of an agent, level 1 first, root last.
    pub fn ancestors(&self, agent: AgentId) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.num_levels());
        let mut cur = self.group_of(agent);
        while let Some(id) = cur {
            out.push(id);
            cur = self.nodes[&id].parent;
        }
        out
    }

    /// Level-1 partition as a label per agent (label = group node id).
    pub fn level1_labels(&self) -> BTreeMap<AgentId, NodeId> {
        self.agent_group.clone()
    }

    /// Moves agents toward strictly closer level-1 groups, subject to resistance.
    ///
    /// Each agent is visited once in ascending id order and compared against
    /// the level-1 GMPs as they stood on entry. During high specialization
    /// only siblings under the same level-2 parent are candidates.
    pub fn adapt(&mut self, params: &[ModelParams], t: usize, sched: &MetaLawSchedule) -> Result<Vec<GroupChange>> {
        let stage = sched.stage(t);
        if stage < Stage::Adaptation || self.root.is_none() {
            return Ok(Vec::new());
        }
        let keep = 1.0 - sched.resistance(t);
        let level1 = self.level_nodes(1);
        let agents: Vec<AgentId> = self.agents().collect();
        let mut changes = Vec::new();
        for agent in agents {
            let p = params.get(agent).ok_or(Error::UnknownAgent(agent))?;
            p.check_dim(self.dim)?;
            let cur = self.agent_group[&agent];
            let cur_parent = self.nodes[&cur].parent;
            let d_cur = dist(p, &self.nodes[&cur].gmp);
            let candidates = level1
                .iter()
                .filter(|&&g| g != cur)
                .filter(|&&g| stage != Stage::HighSpecialization || self.nodes[&g].parent == cur_parent)
                .map(|&g| (g, &self.nodes[&g].gmp[..]));
            let Some((best, d_best)) = nearest(p, candidates) else {
                continue;
            };
            if d_best < keep * d_cur {
                self.detach_agent(agent);
                self.attach_agent(agent, best);
                changes.push(GroupChange { agent, from: cur, to: best });
            }
        }
        self.recompute_counts();
        self.prune_empty();
        Ok(changes)
    }

    fn detach_agent(&mut self, agent: AgentId) -> Option<NodeId> {
        let g = self.agent_group.remove(&agent)?;
        self.nodes.get_mut(&g).unwrap().children.retain(|&a| a != agent);
        Some(g)
    }

    fn attach_agent(&mut self, agent: AgentId, group: NodeId) {
        let kids = &mut self.nodes.get_mut(&group).unwrap().children;
        let pos = kids.partition_point(|&a| a < agent);
        kids.insert(pos, agent);
        self.agent_group.insert(agent, group);
    }

    /// Greedy top-down placement: from the root, step into the child with the
    /// nearest GMP until a level-1 group is reached. Returns that group.
    pub fn place_new_agent(&mut self, agent: AgentId, params: &ModelParams) -> Result<NodeId> {
        if self.contains_agent(agent) {
            return Err(Error::DuplicateAgent(agent));
        }
        let Some(root) = self.root else {
            if self.nodes.is_empty() && self.agent_group.is_empty() {
                self.dim = params.dim();
            }
            params.check_dim(self.dim)?;
            return Ok(self.singleton_chain(agent, params));
        };
        params.check_dim(self.dim)?;
        let mut cur = root;
        while self.nodes[&cur].level > 1 {
            let kids = self.nodes[&cur].children.iter().map(|c| (*c, &self.nodes[c].gmp[..]));
            cur = nearest(params, kids).expect("non-empty group").0;
        }
        self.attach_agent(agent, cur);
        let mut node = Some(cur);
        while let Some(id) = node {
            let n = self.nodes.get_mut(&id).unwrap();
            n.member_count += 1;
            node = n.parent;
        }
        Ok(cur)
    }

    fn singleton_chain(&mut self, agent: AgentId, params: &ModelParams) -> NodeId {
        let mut below: Option<NodeId> = None;
        let mut level1 = 0;
        for k in 1..=self.num_levels() {
            let id = self.alloc_id();
            let children = match below {
                None => vec![agent],
                Some(b) => vec![b],
            };
            self.nodes.insert(id, GroupNode { id, level: k, gmp: params.clone(), member_count: 1, children, parent: None });
            match below {
                None => level1 = id,
                Some(b) => self.nodes.get_mut(&b).unwrap().parent = Some(id),
            }
            below = Some(id);
        }
        self.root = below;
        self.agent_group.insert(agent, level1);
        level1
    }

    /// Removes agents farther than `elimination_factor * thresholds[0]` from
    /// their level-1 GMP and re-places each one top-down. Every agent is
    /// examined at most once per call, so a re-placed agent cannot trigger
    /// further eliminations. Sole members of a group are never eliminated.
    pub fn eliminate_outliers(&mut self, params: &[ModelParams], sched: &MetaLawSchedule) -> Result<Vec<GroupChange>> {
        let limit = sched.elimination_factor * sched.base_threshold();
        let agents: Vec<AgentId> = self.agents().collect();
        let mut replaced = Vec::new();
        for agent in agents {
            let p = params.get(agent).ok_or(Error::UnknownAgent(agent))?;
            p.check_dim(self.dim)?;
            let g = self.agent_group[&agent];
            let node = &self.nodes[&g];
            if node.children.len() < 2 || dist(p, &node.gmp) <= limit {
                continue;
            }
            self.detach_agent(agent);
            let mut up = Some(g);
            while let Some(id) = up {
                let n = self.nodes.get_mut(&id).unwrap();
                n.member_count -= 1;
                up = n.parent;
            }
            let to = self.place_new_agent(agent, p)?;
            replaced.push(GroupChange { agent, from: g, to });
        }
        Ok(replaced)
    }

    /// Checks partition, nesting, parent links, count sums and the single root.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let fail = |nodes: Vec<NodeId>, message: String| Err(Violation { nodes, message });
        let top = self.num_levels();
        match self.root {
            None => {
                if !self.nodes.is_empty() || !self.agent_group.is_empty() {
                    return fail(vec![], "no root but hierarchy is not empty".into());
                }
                return Ok(());
            }
            Some(r) => {
                let Some(root) = self.nodes.get(&r) else {
                    return fail(vec![r], "root id missing from node table".into());
                };
                if root.level != top || root.parent.is_some() {
                    return fail(vec![r], format!("root must be level {top} without parent"));
                }
                if root.member_count != self.agent_group.len() {
                    return fail(vec![r], format!("root counts {} agents, {} registered", root.member_count, self.agent_group.len()));
                }
            }
        }
        let mut seen_agents: BTreeMap<AgentId, NodeId> = BTreeMap::new();
        for node in self.nodes.values() {
            let id = node.id;
            if node.level == 0 || node.level > top {
                return fail(vec![id], format!("level {} out of range", node.level));
            }
            if node.gmp.dim() != self.dim {
                return fail(vec![id], "gmp dimension mismatch".into());
            }
            if node.children.is_empty() || node.member_count == 0 {
                return fail(vec![id], "empty group".into());
            }
            if node.children.windows(2).any(|w| w[0] >= w[1]) {
                return fail(vec![id], "children not strictly ascending".into());
            }
            if node.level == top {
                if Some(id) != self.root {
                    return fail(vec![id], "second node at root level".into());
                }
            } else {
                let Some(p) = node.parent else {
                    return fail(vec![id], "non-root node without parent".into());
                };
                match self.nodes.get(&p) {
                    Some(pn) if pn.level == node.level + 1 && pn.children.contains(&id) => {}
                    _ => return fail(vec![id, p], "broken parent link".into()),
                }
            }
            let sum = if node.level == 1 {
                for &a in &node.children {
                    if let Some(prev) = seen_agents.insert(a, id) {
                        return fail(vec![prev, id], format!("agent {a} in two groups"));
                    }
                    if self.agent_group.get(&a) != Some(&id) {
                        return fail(vec![id], format!("agent {a} map entry disagrees"));
                    }
                }
                node.children.len()
            } else {
                let mut sum = 0;
                for c in &node.children {
                    match self.nodes.get(c) {
                        Some(cn) if cn.level + 1 == node.level && cn.parent == Some(id) => sum += cn.member_count,
                        _ => return fail(vec![id, *c], "child is not a level below or has wrong parent".into()),
                    }
                }
                sum
            };
            if sum != node.member_count {
                return fail(vec![id], format!("member_count {} but children sum to {sum}", node.member_count));
            }
        }
        if seen_agents.len() != self.agent_group.len() {
            let missing: Vec<_> = self.agent_group.iter().filter(|(a, _)| !seen_agents.contains_key(a)).collect();
            return fail(missing.iter().map(|(_, g)| **g).collect(), "agent not listed in its group".into());
        }
        Ok(())
    }

    /// Full re-clustering, discarding the current structure.
    pub fn rebuild(params: &[ModelParams], sched: &MetaLawSchedule) -> Result<Self> {
        Self::build_initial(params, sched)
    }

    pub fn snapshot(&self, round: usize) -> Snapshot {
        let levels = (1..=self.num_levels())
            .rev()
            .map(|k| LevelSnapshot {
                k,
                groups: self
                    .level_nodes(k)
                    .into_iter()
                    .map(|id| {
                        let n = &self.nodes[&id];
                        GroupSnapshot {
                            id,
                            member_count: n.member_count,
                            children: (k > 1).then(|| n.children.clone()),
                            agents: (k == 1).then(|| n.children.clone()),
                            gmp_norm: n.gmp.norm(),
                        }
                    })
                    .collect(),
            })
            .collect();
        Snapshot { round, levels }
    }

    #[cfg(test)]
    pub(crate) fn corrupt_count(&mut self, id: NodeId, count: usize) {
        self.nodes.get_mut(&id).unwrap().member_count = count;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSnapshot {
    pub id: NodeId,
    pub member_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<Vec<AgentId>>,
    pub gmp_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSnapshot {
    pub k: usize,
    pub groups: Vec<GroupSnapshot>,
}

/// Serializable structure of the hierarchy at one round, root level first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: usize,
    pub levels: Vec<LevelSnapshot>,
}

impl Snapshot {
    /// Graphviz digraph from the root down to the agents.
    pub fn to_dot(&self) -> Result<String> {
        let mut out = String::from("digraph hierarchy {\n  rankdir=TB;\n  node [shape=box];\n");
        let mut edges = String::new();
        for level in &self.levels {
            for g in &level.groups {
                out.push_str(&format!("  g{} [label=\"L{}/#{}\"];\n", g.id, level.k, g.member_count));
                match (level.k, &g.children, &g.agents) {
                    (1, _, Some(agents)) => {
                        for a in agents {
                            edges.push_str(&format!("  g{} -> a{};\n", g.id, a));
                        }
                    }
                    (k, Some(children), _) if k > 1 => {
                        for c in children {
                            edges.push_str(&format!("  g{} -> g{};\n", g.id, c));
                        }
                    }
                    _ => {
                        return Err(Error::Schema(format!(
                            "group {} at level {} lacks {}",
                            g.id,
                            level.k,
                            if level.k == 1 { "agents" } else { "children" }
                        )))
                    }
                }
            }
        }
        let mut agents: Vec<AgentId> = self
            .levels
            .iter()
            .filter(|l| l.k == 1)
            .flat_map(|l| l.groups.iter().flat_map(|g| g.agents.iter().flatten().copied()))
            .collect();
        agents.sort_unstable();
        for a in agents {
            out.push_str(&format!("  a{a} [label=\"a{a}\", shape=ellipse];\n"));
        }
        out.push_str(&edges);
        out.push_str("}\n");
        Ok(out)
    }
}
