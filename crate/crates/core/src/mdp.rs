//! The retrieval decision process.
//!
//! A state is a query together with the full path of visited nodes, so the
//! reachable state space is a tree rooted at the seed state. Every state
//! offers a `Stop` (self-loop) action; moves follow graph adjacency, one per
//! distinct neighbor.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Graph, NodeIdx};

pub const DEFAULT_DEPTH_CUTOFF: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    pub qid: String,
    pub query_text: String,
    pub path: Vec<NodeIdx>,
    pub stopped: bool,
}

impl State {
    pub fn depth(&self) -> usize {
        self.path.len() - 1
    }

    pub fn current(&self) -> NodeIdx {
        *self.path.last().expect("state path is never empty")
    }

    pub fn is_initial(&self) -> bool {
        self.path.len() == 1 && !self.stopped
    }

    pub fn path_ids<'a>(&self, graph: &'a Graph) -> Vec<&'a str> {
        self.path.iter().map(|&n| graph.id(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    /// Self-loop: retrieve the current node and end the trajectory.
    Stop,
    Move { relation: String, target: NodeIdx },
}

impl Action {
    pub fn is_stop(&self) -> bool {
        matches!(self, Action::Stop)
    }
}

pub fn initial_state(graph: &Graph, qid: &str, query_text: &str, seed: &str) -> Result<State> {
    let seed = graph.resolve(seed)?;
    Ok(initial_state_at(qid, query_text, seed))
}

pub fn initial_state_at(qid: &str, query_text: &str, seed: NodeIdx) -> State {
    State {
        qid: qid.to_string(),
        query_text: query_text.to_string(),
        path: vec![seed],
        stopped: false,
    }
}

/// `Stop` first, then one move per distinct neighbor in adjacency order.
///
/// Several relations to the same neighbor collapse into a single move carrying
/// the first relation label, and graph self-edges are skipped: the self-loop
/// is reserved for `Stop`. At the depth cutoff only `Stop` remains.
pub fn candidate_actions(graph: &Graph, state: &State, depth_cutoff: usize) -> Result<Vec<Action>> {
    if state.stopped {
        return Err(Error::Stopped);
    }
    let mut actions = vec![Action::Stop];
    if state.depth() >= depth_cutoff {
        return Ok(actions);
    }
    let here = state.current();
    let mut seen = HashSet::new();
    for nb in graph.neighbors_of(here) {
        if nb.node == here || !seen.insert(nb.node) {
            continue;
        }
        actions.push(Action::Move {
            relation: nb.relation.clone(),
            target: nb.node,
        });
    }
    Ok(actions)
}

/// Applies a candidate action. Revisits are allowed; the path keeps them.
pub fn apply_action(graph: &Graph, state: &State, action: &Action, depth_cutoff: usize) -> Result<State> {
    let candidates = candidate_actions(graph, state, depth_cutoff)?;
    if !candidates.contains(action) {
        return Err(Error::IllegalAction(format!(
            "{action:?} from {:?}",
            state.path_ids(graph)
        )));
    }
    Ok(step(state, action))
}

/// Transition without legality checks.
pub(crate) fn step(state: &State, action: &Action) -> State {
    let mut next = state.clone();
    match action {
        Action::Stop => next.stopped = true,
        Action::Move { target, .. } => next.path.push(*target),
    }
    next
}

/// A complete or partial retrieval episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub qid: String,
    pub query_text: String,
    pub path: Vec<NodeIdx>,
    pub actions: Vec<Action>,
    pub reward: f64,
}

impl Trajectory {
    pub fn start(state: &State) -> Self {
        Trajectory {
            qid: state.qid.clone(),
            query_text: state.query_text.clone(),
            path: state.path.clone(),
            actions: Vec::new(),
            reward: 0.0,
        }
    }

    pub fn push(&mut self, action: Action) {
        if let Action::Move { target, .. } = &action {
            self.path.push(*target);
        }
        self.actions.push(action);
    }

    pub fn is_terminated(&self) -> bool {
        matches!(self.actions.last(), Some(Action::Stop))
    }

    pub fn terminal(&self) -> NodeIdx {
        *self.path.last().expect("trajectory path is never empty")
    }

    /// Number of decisions taken (moves plus the final stop).
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// States `s_0 ..= s_T`; the last one is stopped when the trajectory terminated.
    pub fn states(&self) -> Vec<State> {
        let mut state = initial_state_at(&self.qid, &self.query_text, self.path[0]);
        let mut out = vec![state.clone()];
        for a in &self.actions {
            state = step(&state, a);
            out.push(state.clone());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", content = "table", rename_all = "lowercase")]
pub enum RewardSpec {
    /// 1 when the terminal node is a target, else 0.
    #[default]
    Binary,
    /// Per-node positive rewards; unlisted nodes earn 0.
    Table(BTreeMap<String, f64>),
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if let RewardSpec::Table(t) = self {
            if let Some((k, v)) = t.iter().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!("reward for {k} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Reward of terminating at `node_id`.
    pub fn node_reward(&self, node_id: &str, targets: &BTreeSet<String>) -> f64 {
        match self {
            RewardSpec::Binary => {
                if targets.contains(node_id) {
                    1.0
                } else {
                    0.0
                }
            }
            RewardSpec::Table(t) => t.get(node_id).copied().unwrap_or(0.0),
        }
    }
}

pub fn trajectory_reward(
    graph: &Graph,
    trajectory: &Trajectory,
    targets: &BTreeSet<String>,
    spec: &RewardSpec,
) -> Result<f64> {
    if !trajectory.is_terminated() {
        return Err(Error::NotTerminated);
    }
    Ok(spec.node_reward(graph.id(trajectory.terminal()), targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EdgeRecord, NodeRecord, Traversal};

    fn chain() -> Graph {
        let nodes = ["a", "b", "c", "iso"]
            .iter()
            .map(|id| NodeRecord {
                id: id.to_string(),
                text: format!("doc {id}"),
                node_type: String::new(),
            })
            .collect();
        let edges = vec![
            EdgeRecord { src: "a".into(), dst: "b".into(), rel: "next".into() },
            EdgeRecord { src: "b".into(), dst: "c".into(), rel: "next".into() },
        ];
        Graph::from_records("chain", nodes, edges, Traversal::Bidirectional).unwrap()
    }

    #[test]
    fn initial_state_fields() {
        let g = chain();
        let s = initial_state(&g, "q", "text", "a").unwrap();
        assert_eq!(s.path_ids(&g), ["a"]);
        assert_eq!(s.depth(), 0);
        assert!(!s.stopped);
        assert!(initial_state(&g, "q", "text", "nope").is_err());
    }

    #[test]
    fn candidates() {
        let g = chain();
        let iso = initial_state(&g, "q", "", "iso").unwrap();
        assert_eq!(candidate_actions(&g, &iso, 6).unwrap(), vec![Action::Stop]);
        let b = initial_state(&g, "q", "", "b").unwrap();
        let acts = candidate_actions(&g, &b, 6).unwrap();
        assert_eq!(acts.len(), 3);
        assert_eq!(acts[0], Action::Stop);
        assert_eq!(candidate_actions(&g, &b, 0).unwrap(), vec![Action::Stop]);
        let stopped = step(&b, &Action::Stop);
        assert!(matches!(candidate_actions(&g, &stopped, 6), Err(Error::Stopped)));
    }

    #[test]
    fn transitions() {
        let g = chain();
        let a = initial_state(&g, "q", "", "a").unwrap();
        let stop = apply_action(&g, &a, &Action::Stop, 6).unwrap();
        assert!(stop.stopped);
        assert_eq!(stop.current(), g.resolve("a").unwrap());
        let mv = |s: &State, to: &str| {
            let target = g.resolve(to).unwrap();
            let action = candidate_actions(&g, s, 6)
                .unwrap()
                .into_iter()
                .find(|x| matches!(x, Action::Move { target: t, .. } if *t == target))
                .unwrap();
            apply_action(&g, s, &action, 6).unwrap()
        };
        let ab = mv(&a, "b");
        assert_eq!(ab.path_ids(&g), ["a", "b"]);
        let aba = mv(&ab, "a");
        assert_eq!(aba.path_ids(&g), ["a", "b", "a"]);
        assert_ne!(aba, a);
        let bogus = Action::Move { relation: "next".into(), target: g.resolve("c").unwrap() };
        assert!(matches!(apply_action(&g, &a, &bogus, 6), Err(Error::IllegalAction(_))));
    }

    #[test]
    fn parallel_relations_collapse_to_one_move() {
        let nodes = ["x", "y"]
            .iter()
            .map(|id| NodeRecord { id: id.to_string(), text: String::new(), node_type: String::new() })
            .collect();
        let edges = vec![
            EdgeRecord { src: "x".into(), dst: "y".into(), rel: "r1".into() },
            EdgeRecord { src: "x".into(), dst: "y".into(), rel: "r2".into() },
            EdgeRecord { src: "x".into(), dst: "x".into(), rel: "self".into() },
        ];
        let g = Graph::from_records("p", nodes, edges, Traversal::Directed).unwrap();
        let s = initial_state(&g, "q", "", "x").unwrap();
        let acts = candidate_actions(&g, &s, 6).unwrap();
        assert_eq!(acts.len(), 2);
        assert!(matches!(&acts[1], Action::Move { relation, .. } if relation == "r1"));
    }

    #[test]
    fn rewards() {
        let g = chain();
        let a = initial_state(&g, "q", "", "a").unwrap();
        let mut t = Trajectory::start(&a);
        let targets: BTreeSet<String> = ["a".to_string()].into();
        assert!(matches!(
            trajectory_reward(&g, &t, &targets, &RewardSpec::Binary),
            Err(Error::NotTerminated)
        ));
        t.push(Action::Stop);
        assert_eq!(trajectory_reward(&g, &t, &targets, &RewardSpec::Binary).unwrap(), 1.0);
        let other: BTreeSet<String> = ["c".to_string()].into();
        assert_eq!(trajectory_reward(&g, &t, &other, &RewardSpec::Binary).unwrap(), 0.0);
        let table = RewardSpec::Table([("a".to_string(), 3.0)].into());
        assert_eq!(trajectory_reward(&g, &t, &other, &table).unwrap(), 3.0);
        assert!(RewardSpec::Table([("a".to_string(), 0.0)].into()).validate().is_err());
    }

    #[test]
    fn trajectory_states_end_stopped() {
        let g = chain();
        let a = initial_state(&g, "q", "", "a").unwrap();
        let mut t = Trajectory::start(&a);
        t.push(Action::Move { relation: "next".into(), target: g.resolve("b").unwrap() });
        t.push(Action::Stop);
        let states = t.states();
        assert_eq!(states.len(), 3);
        assert!(states[2].stopped);
        assert_eq!(states[1].depth(), 1);
        assert_eq!(t.len(), 2);
    }
}
