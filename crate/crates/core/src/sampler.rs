//! Sampling retrieval trajectories from a policy and aggregating them into rankings.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DenseIndex, Featurizer};
use crate::error::{Error, Result};
use crate::kg::{Graph, Query, QuerySet};
use crate::mdp::{self, candidate_actions, initial_state_at, Action, State, Trajectory};
use crate::model::{policy_probs, Model};
use crate::trainer::derive_seed;

/// A distribution over the candidate actions of a state.
pub trait Policy: Sync {
    fn probs(&self, state: &State, actions: &[Action]) -> Result<Vec<f64>>;
}

/// Softmax over the model's action scores divided by a temperature.
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub featurizer: &'a Featurizer<'a>,
    pub temperature: f64,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a Model, featurizer: &'a Featurizer<'a>) -> Self {
        ModelPolicy {
            model,
            featurizer,
            temperature: 1.0,
        }
    }

    pub fn scores(&self, state: &State, actions: &[Action]) -> Result<Vec<f64>> {
        let sf = self.featurizer.state(state);
        let feats: Vec<_> = actions
            .iter()
            .map(|a| self.featurizer.action_with(&sf, state, a))
            .collect();
        self.model.action_scores(&feats)
    }
}

impl Policy for ModelPolicy<'_> {
    fn probs(&self, state: &State, actions: &[Action]) -> Result<Vec<f64>> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let scores: Vec<f64> = self
            .scores(state, actions)?
            .into_iter()
            .map(|s| s / self.temperature)
            .collect();
        policy_probs(&scores)
    }
}

/// Inverse-CDF draw; falls back to the last index with positive mass.
pub fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Rolls out `policy` from `start` until `Stop`; the depth cutoff leaves only `Stop`.
pub fn sample_trajectory(
    policy: &dyn Policy,
    graph: &Graph,
    start: &State,
    depth_cutoff: usize,
    rng_seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = start.clone();
    let mut traj = Trajectory::start(&state);
    loop {
        let actions = candidate_actions(graph, &state, depth_cutoff)?;
        let probs = policy.probs(&state, &actions)?;
        let action = actions[draw(&probs, rng.gen::<f64>())].clone();
        state = mdp::step(&state, &action);
        let stop = action.is_stop();
        traj.push(action);
        if stop {
            return Ok(traj);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedNode {
    pub node_id: String,
    /// Sample frequency, or the rerank score once reranked.
    pub score: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: Vec<String>,
    pub terminal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub qid: String,
    pub ranked: Vec<RankedNode>,
    pub samples: Vec<SampleRecord>,
    pub rerank_applied: bool,
}

impl RetrievalResult {
    pub fn ranked_ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.node_id.as_str()).collect()
    }

    pub fn sample_terminals(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.terminal.as_str()).collect()
    }
}

/// Groups sampled trajectories by terminal node: count descending, then first
/// occurrence, then node id.
pub fn aggregate(qid: &str, graph: &Graph, trajectories: &[Trajectory]) -> RetrievalResult {
    let n = trajectories.len();
    let mut first: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut samples = Vec::with_capacity(n);
    for (i, t) in trajectories.iter().enumerate() {
        let id = graph.id(t.terminal());
        first.entry(id).or_insert((i, 0)).1 += 1;
        samples.push(SampleRecord {
            path: t.path.iter().map(|&p| graph.id(p).to_string()).collect(),
            terminal: id.to_string(),
        });
    }
    let mut rows: Vec<(&str, usize, usize)> = first.into_iter().map(|(id, (f, c))| (id, f, c)).collect();
    rows.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(b.0)));
    RetrievalResult {
        qid: qid.to_string(),
        ranked: rows
            .into_iter()
            .map(|(id, _, c)| RankedNode {
                node_id: id.to_string(),
                score: c as f64 / n as f64,
                count: c,
            })
            .collect(),
        samples,
        rerank_applied: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n: usize,
    pub depth_cutoff: usize,
    pub temperature: f64,
    pub seed: u64,
    pub rerank: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n: 20,
            depth_cutoff: mdp::DEFAULT_DEPTH_CUTOFF,
            temperature: 1.0,
            seed: 0,
            rerank: false,
        }
    }
}

/// Draws `n` trajectories for one query with per-sample seeds derived from
/// `(seed, qid, index)` and aggregates them.
pub fn retrieve_with(
    policy: &dyn Policy,
    graph: &Graph,
    qid: &str,
    start: &State,
    cfg: &SamplerConfig,
) -> Result<RetrievalResult> {
    if cfg.n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let trajectories = (0..cfg.n)
        .map(|i| {
            let s = derive_seed(cfg.seed, &["sample", qid, &i.to_string()]);
            sample_trajectory(policy, graph, start, cfg.depth_cutoff, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(qid, graph, &trajectories))
}

/// Rescores each distinct terminal by the `Stop` score at the terminal state
/// of its first sampled trajectory.
pub fn rerank(model: &Model, featurizer: &Featurizer<'_>, query: &Query, result: &RetrievalResult) -> Result<RetrievalResult> {
    let graph = featurizer.graph();
    let mut rescored = Vec::with_capacity(result.ranked.len());
    for r in &result.ranked {
        let sample = result
            .samples
            .iter()
            .find(|s| s.terminal == r.node_id)
            .ok_or_else(|| Error::UnknownNode(r.node_id.clone()))?;
        let path = sample
            .path
            .iter()
            .map(|id| graph.resolve(id))
            .collect::<Result<Vec<_>>>()?;
        let state = State {
            qid: query.qid.clone(),
            query_text: query.text.clone(),
            path,
            stopped: false,
        };
        let feats = featurizer.action_with(&featurizer.state(&state), &state, &Action::Stop);
        rescored.push(RankedNode {
            score: model.score(&feats)?,
            ..r.clone()
        });
    }
    rescored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.count.cmp(&a.count))
            .then(a.node_id.cmp(&b.node_id))
    });
    Ok(RetrievalResult {
        ranked: rescored,
        rerank_applied: true,
        ..result.clone()
    })
}

/// Model-backed retriever over one graph.
pub struct Retriever<'g> {
    pub model: &'g Model,
    pub featurizer: Featurizer<'g>,
    index: DenseIndex,
    pub cfg: SamplerConfig,
}

impl<'g> Retriever<'g> {
    pub fn new(model: &'g Model, graph: &'g Graph, cfg: SamplerConfig) -> Result<Self> {
        Ok(Retriever {
            featurizer: Featurizer::new(graph, &model.encoder, cfg.depth_cutoff)?,
            index: DenseIndex::build(graph, &model.encoder),
            model,
            cfg,
        })
    }

    pub fn graph(&self) -> &'g Graph {
        self.featurizer.graph()
    }

    pub fn start_state(&self, query: &Query) -> Result<State> {
        let seed = self.index.top_k(self.graph(), &query.text, 1)?[0];
        Ok(initial_state_at(&query.qid, &query.text, seed))
    }

    pub fn retrieve(&self, query: &Query) -> Result<RetrievalResult> {
        let policy = ModelPolicy {
            model: self.model,
            featurizer: &self.featurizer,
            temperature: self.cfg.temperature,
        };
        let start = self.start_state(query)?;
        let result = retrieve_with(&policy, self.graph(), &query.qid, &start, &self.cfg)?;
        if self.cfg.rerank {
            rerank(self.model, &self.featurizer, query, &result)
        } else {
            Ok(result)
        }
    }

    /// Retrieves every query, spreading them over `jobs` threads; output order
    /// follows the query set regardless of `jobs`.
    pub fn retrieve_all(&self, queries: &QuerySet, jobs: usize) -> Result<Vec<RetrievalResult>> {
        let qs: Vec<&Query> = queries.iter().collect();
        let jobs = jobs.clamp(1, qs.len().max(1));
        if jobs == 1 {
            return qs.iter().map(|q| self.retrieve(q)).collect();
        }
        let chunk = qs.len().div_ceil(jobs);
        let parts: Vec<Result<Vec<RetrievalResult>>> = std::thread::scope(|s| {
            let handles: Vec<_> = qs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|q| self.retrieve(q)).collect::<Result<Vec<_>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("retrieval worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(qs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

pub fn write_results<W: Write>(results: &[RetrievalResult], out: &mut W) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<results>", e))?;
    }
    Ok(())
}

pub fn save_results(results: &[RetrievalResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_results(results, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<RetrievalResult>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
