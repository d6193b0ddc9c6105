//! Exhaustive enumeration of the state tree of small graphs: exact flows,
//! the exact flow-matching policy and the reward-proportional terminal law.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kg::{Graph, NodeIdx, Query};
use crate::mdp::{candidate_actions, initial_state_at, step, Action, RewardSpec, State, Trajectory};
use crate::sampler::Policy;

pub const DEFAULT_BUDGET: usize = 100_000;

/// One non-stopped state of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub path: Vec<NodeIdx>,
    /// Reward of stopping here.
    pub stop_reward: f64,
    /// Candidate actions, `Stop` first.
    pub actions: Vec<Action>,
    /// Tree index of the child reached by each move, aligned with `actions[1..]`.
    pub children: Vec<usize>,
    pub parent: Option<usize>,
}

/// The full state tree in depth-first preorder; index 0 is the seed state.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub qid: String,
    pub query_text: String,
    pub depth_cutoff: usize,
    pub nodes: Vec<TreeNode>,
}

impl Enumeration {
    /// Every trajectory (one per tree state, stopping there) with its reward.
    pub fn trajectories(&self) -> Vec<(Trajectory, f64)> {
        (0..self.nodes.len())
            .map(|i| {
                let mut moves = Vec::new();
                let mut cur = i;
                while let Some(p) = self.nodes[cur].parent {
                    let k = self.nodes[p]
                        .children
                        .iter()
                        .position(|&c| c == cur)
                        .expect("child is listed by its parent");
                    moves.push(self.nodes[p].actions[k + 1].clone());
                    cur = p;
                }
                let root = self.nodes[0].path[0];
                let mut t = Trajectory::start(&initial_state_at(&self.qid, &self.query_text, root));
                moves.into_iter().rev().for_each(|a| t.push(a));
                t.push(Action::Stop);
                let r = self.nodes[i].stop_reward;
                t.reward = r;
                (t, r)
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Enumerates every path from `seed` of length at most `depth_cutoff`.
pub fn enumerate_trajectories(
    graph: &Graph,
    query: &Query,
    seed: NodeIdx,
    depth_cutoff: usize,
    reward: &RewardSpec,
    budget: usize,
) -> Result<Enumeration> {
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut stack = vec![(initial_state_at(&query.qid, &query.text, seed), None::<usize>)];
    while let Some((state, parent)) = stack.pop() {
        if nodes.len() >= budget {
            return Err(Error::BudgetExceeded(budget));
        }
        let idx = nodes.len();
        if let Some(p) = parent {
            nodes[p].children.push(idx);
        }
        let actions = candidate_actions(graph, &state, depth_cutoff)?;
        let kids: Vec<State> = actions.iter().skip(1).map(|a| step(&state, a)).collect();
        nodes.push(TreeNode {
            stop_reward: reward.node_reward(graph.id(state.current()), &query.targets),
            path: state.path,
            actions,
            children: Vec::with_capacity(kids.len()),
            parent,
        });
        stack.extend(kids.into_iter().rev().map(|k| (k, Some(idx))));
    }
    Ok(Enumeration {
        qid: query.qid.clone(),
        query_text: query.text.clone(),
        depth_cutoff,
        nodes,
    })
}

/// Exact flows on the state tree with a unit backward policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    pub tree: Enumeration,
    pub flows: Vec<f64>,
    index: HashMap<Vec<NodeIdx>, usize>,
}

/// Accumulates flows bottom-up and checks them against direct summation of
/// terminal rewards over each subtree.
pub fn exact_flows(tree: Enumeration) -> Result<FlowTable> {
    let n = tree.nodes.len();
    let mut flows = vec![0.0; n];
    for i in (0..n).rev() {
        let node = &tree.nodes[i];
        flows[i] = node.stop_reward + node.children.iter().map(|&c| flows[c]).sum::<f64>();
    }
    let mut direct = vec![0.0; n];
    for (i, node) in tree.nodes.iter().enumerate() {
        let mut cur = Some(i);
        while let Some(c) = cur {
            direct[c] += node.stop_reward;
            cur = tree.nodes[c].parent;
        }
    }
    for i in 0..n {
        if (flows[i] - direct[i]).abs() > 1e-9 * flows[i].abs().max(1.0) {
            return Err(Error::Config(format!(
                "flow cross-check failed at state {i}: {} vs {}",
                flows[i], direct[i]
            )));
        }
    }
    if n == 0 || !(flows[0] > 0.0) {
        return Err(Error::ZeroFlow);
    }
    let index = tree.nodes.iter().enumerate().map(|(i, t)| (t.path.clone(), i)).collect();
    Ok(FlowTable { tree, flows, index })
}

impl FlowTable {
    /// Partition function `Z = F(s_0)`.
    pub fn z(&self) -> f64 {
        self.flows[0]
    }

    pub fn lookup(&self, path: &[NodeIdx]) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn flow(&self, state: &State) -> Option<f64> {
        if state.stopped {
            return self.lookup(&state.path).map(|i| self.tree.nodes[i].stop_reward);
        }
        self.lookup(&state.path).map(|i| self.flows[i])
    }

    /// Largest `|F(s) − R_stop(s) − Σ F(children)|` over the tree.
    pub fn conservation_residual(&self) -> f64 {
        self.tree
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (self.flows[i] - n.stop_reward - n.children.iter().map(|&c| self.flows[c]).sum::<f64>()).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `P(Stop) = R_stop/F`, `P(move to c) = F(c)/F`, in candidate order.
    pub fn policy_at(&self, i: usize) -> Result<Vec<f64>> {
        let f = self.flows[i];
        if !(f > 0.0) {
            return Err(Error::ZeroFlow);
        }
        let node = &self.tree.nodes[i];
        let mut p = Vec::with_capacity(node.actions.len());
        p.push(node.stop_reward / f);
        p.extend(node.children.iter().map(|&c| self.flows[c] / f));
        Ok(p)
    }

    /// Terminal-node marginal of `P*(τ) = R(τ)/Z`.
    pub fn terminal_distribution(&self, graph: &Graph) -> BTreeMap<String, f64> {
        let z = self.z();
        let mut out = BTreeMap::new();
        for n in &self.tree.nodes {
            if n.stop_reward > 0.0 {
                let id = graph.id(*n.path.last().expect("paths are non-empty")).to_string();
                *out.entry(id).or_insert(0.0) += n.stop_reward / z;
            }
        }
        out
    }

    pub fn dump(&self, graph: &Graph) -> OracleDump {
        let z = self.z();
        OracleDump {
            qid: self.tree.qid.clone(),
            depth_cutoff: self.tree.depth_cutoff,
            z,
            max_conservation_residual: self.conservation_residual(),
            trajectories: self
                .tree
                .nodes
                .iter()
                .map(|n| DumpTrajectory {
                    path: n.path.iter().map(|&p| graph.id(p).to_string()).collect(),
                    reward: n.stop_reward,
                    probability: n.stop_reward / z,
                })
                .collect(),
            terminal_distribution: self.terminal_distribution(graph),
        }
    }
}

/// The exact policy at `state` as (action, probability) in candidate order.
pub fn exact_policy(table: &FlowTable, state: &State) -> Result<Vec<(Action, f64)>> {
    let i = table
        .lookup(&state.path)
        .filter(|_| !state.stopped)
        .ok_or_else(|| Error::IllegalAction(format!("state {:?} is not in the tree", state.path)))?;
    let probs = table.policy_at(i)?;
    Ok(table.tree.nodes[i].actions.iter().cloned().zip(probs).collect())
}

impl Policy for FlowTable {
    fn probs(&self, state: &State, actions: &[Action]) -> Result<Vec<f64>> {
        let exact = exact_policy(self, state)?;
        actions
            .iter()
            .map(|a| {
                exact
                    .iter()
                    .find(|(b, _)| b == a)
                    .map(|(_, p)| *p)
                    .ok_or_else(|| Error::IllegalAction(format!("{a:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distance {
    pub total_variation: f64,
    pub l1: f64,
}

/// Distance between an empirical terminal distribution and the exact one.
pub fn distribution_distance(empirical: &BTreeMap<String, f64>, exact: &BTreeMap<String, f64>) -> Result<Distance> {
    let mass: f64 = empirical.values().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("empirical frequencies sum to {mass}, not 1")));
    }
    let mut l1 = 0.0;
    for (k, p) in empirical {
        l1 += (p - exact.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, q) in exact {
        if !empirical.contains_key(k) {
            l1 += q.abs();
        }
    }
    Ok(Distance {
        total_variation: l1 / 2.0,
        l1,
    })
}

/// Relative frequencies of a list of terminal ids.
pub fn frequencies<S: AsRef<str>>(terminals: &[S]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for t in terminals {
        *out.entry(t.as_ref().to_string()).or_insert(0.0) += 1.0;
    }
    let n = terminals.len() as f64;
    out.values_mut().for_each(|v| *v /= n);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateDistance {
    pub path: Vec<String>,
    pub l1: f64,
}

/// L1 distance between `policy` and the exact policy at every state with positive flow.
pub fn policy_distances(graph: &Graph, table: &FlowTable, policy: &dyn Policy) -> Result<Vec<StateDistance>> {
    let mut out = Vec::new();
    for (i, node) in table.tree.nodes.iter().enumerate() {
        if !(table.flows[i] > 0.0) {
            continue;
        }
        let exact = table.policy_at(i)?;
        let state = State {
            qid: table.tree.qid.clone(),
            query_text: table.tree.query_text.clone(),
            path: node.path.clone(),
            stopped: false,
        };
        let got = policy.probs(&state, &node.actions)?;
        out.push(StateDistance {
            path: node.path.iter().map(|&p| graph.id(p).to_string()).collect(),
            l1: exact.iter().zip(&got).map(|(a, b)| (a - b).abs()).sum(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpTrajectory {
    pub path: Vec<String>,
    pub reward: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleDump {
    pub qid: String,
    pub depth_cutoff: usize,
    pub z: f64,
    pub max_conservation_residual: f64,
    pub trajectories: Vec<DumpTrajectory>,
    pub terminal_distribution: BTreeMap<String, f64>,
}

impl OracleDump {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
