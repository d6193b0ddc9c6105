//! Training data collection, local exploration and the optimization loop.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::encoder::{fnv1a64, DenseIndex, EncoderConfig, Featurizer};
use crate::error::{Error, Result};
use crate::kg::{Graph, NodeIdx, Query, QuerySet};
use crate::mdp::{self, candidate_actions, initial_state_at, Action, RewardSpec, Trajectory, DEFAULT_DEPTH_CUTOFF};
use crate::model::{adam_step, grad_check, init_model, AdamConfig, Activation, CheckpointMeta, GradCheckReport, HiddenSpec, Model, OptState};
use crate::objectives::{
    dble_accumulate, prm_accumulate, sft_accumulate, subtb_accumulate, tb_accumulate, BoundaryConfig,
    FeaturizedTrajectory, LogZ, LossParts, Objective, PreferencePair, TransitionBatch,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub num_exploration: usize,
    pub depth_cutoff: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Fraction of trajectories used for training; `1.0` disables the eval split.
    pub eval_ratio: f64,
    pub eval_step: usize,
    pub boundary: BoundaryConfig,
    pub seed: u64,
    pub init_seed: u64,
    pub encoder: EncoderConfig,
    pub hidden: HiddenSpec,
    pub reward: RewardSpec,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop once the mean loss over the whole training set falls to this value.
    pub stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Dble,
            num_exploration: 4,
            depth_cutoff: DEFAULT_DEPTH_CUTOFF,
            batch_size: 1,
            accumulation_steps: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 1,
            eval_ratio: 0.8,
            eval_step: 100,
            boundary: BoundaryConfig::default(),
            seed: 0,
            init_seed: 0,
            encoder: EncoderConfig::default(),
            hidden: HiddenSpec::default(),
            reward: RewardSpec::Binary,
            max_steps: None,
            stop_loss: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
        Activation::Identity => "identity",
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 27] = [
        "objective",
        "num_exploration",
        "depth_cutoff",
        "batch_size",
        "accumulation_steps",
        "lr",
        "beta1",
        "beta2",
        "n_epochs",
        "eval_ratio",
        "eval_step",
        "boundary_const",
        "learn_initial_flow",
        "reward_floor",
        "seed",
        "init_seed",
        "dim",
        "ngram_orders",
        "doc_cutoff",
        "window_size",
        "hash_seed",
        "hidden",
        "activation",
        "reward",
        "reward_table",
        "max_steps",
        "stop_loss",
    ];

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth_cutoff == 0 {
            return bad("depth_cutoff must be >= 1");
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return bad("batch_size and accumulation_steps must be >= 1");
        }
        if !(self.eval_ratio > 0.0 && self.eval_ratio <= 1.0) {
            return bad("eval_ratio must lie in (0, 1]");
        }
        if self.eval_step == 0 {
            return bad("eval_step must be >= 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("lr must be positive and betas in [0, 1)");
        }
        if !(self.boundary.reward_floor > 0.0) || !self.boundary.c_b.is_finite() {
            return bad("reward_floor must be positive and boundary_const finite");
        }
        if self.hidden.layers.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        self.reward.validate()
    }

    /// Sets one `key=value` entry; keys follow the hyperparameter table names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "objective" => self.objective = v.parse()?,
            "num_exploration" | "k" => self.num_exploration = parse(key, v)?,
            "depth_cutoff" => self.depth_cutoff = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "accumulation_steps" => self.accumulation_steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "n_epochs" | "epochs" => self.epochs = parse(key, v)?,
            "eval_ratio" => self.eval_ratio = parse(key, v)?,
            "eval_step" => self.eval_step = parse(key, v)?,
            "boundary_const" | "c_b" => self.boundary.c_b = parse(key, v)?,
            "learn_initial_flow" => self.boundary.learn_initial_flow = parse(key, v)?,
            "reward_floor" => self.boundary.reward_floor = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "dim" => self.encoder.dim = parse(key, v)?,
            "ngram_orders" => self.encoder.ngram_orders = parse_list(key, v)?,
            "doc_cutoff" => self.encoder.doc_cutoff = parse(key, v)?,
            "window_size" => self.encoder.window_size = parse(key, v)?,
            "hash_seed" => self.encoder.hash_seed = parse(key, v)?,
            "hidden" => self.hidden.layers = parse_list(key, v)?,
            "activation" => self.hidden.activation = v.parse()?,
            "reward" => {
                self.reward = match v {
                    "binary" => RewardSpec::Binary,
                    "table" => match &self.reward {
                        RewardSpec::Table(t) => RewardSpec::Table(t.clone()),
                        RewardSpec::Binary => RewardSpec::Table(BTreeMap::new()),
                    },
                    _ => return Err(Error::Config(format!("unknown reward mode {v}"))),
                }
            }
            "reward_table" if v.is_empty() => {}
            "reward_table" => {
                let mut table = BTreeMap::new();
                for entry in v.split(',').filter(|e| !e.trim().is_empty()) {
                    let (id, r) = entry
                        .rsplit_once(':')
                        .ok_or_else(|| Error::Config(format!("reward_table entry {entry:?} is not id:value")))?;
                    table.insert(id.trim().to_string(), parse::<f64>(key, r.trim())?);
                }
                self.reward = RewardSpec::Table(table);
            }
            "max_steps" => self.max_steps = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "stop_loss" => self.stop_loss = if v.is_empty() { None } else { Some(parse(key, v)?) },
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file body; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(&text)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let opt = |x: Option<String>| x.unwrap_or_default();
        let (reward, table) = match &self.reward {
            RewardSpec::Binary => ("binary", String::new()),
            RewardSpec::Table(t) => (
                "table",
                t.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(","),
            ),
        };
        let entries: [(&str, String); 27] = [
            ("objective", self.objective.to_string()),
            ("num_exploration", self.num_exploration.to_string()),
            ("depth_cutoff", self.depth_cutoff.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("accumulation_steps", self.accumulation_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("n_epochs", self.epochs.to_string()),
            ("eval_ratio", self.eval_ratio.to_string()),
            ("eval_step", self.eval_step.to_string()),
            ("boundary_const", self.boundary.c_b.to_string()),
            ("learn_initial_flow", self.boundary.learn_initial_flow.to_string()),
            ("reward_floor", self.boundary.reward_floor.to_string()),
            ("seed", self.seed.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("dim", self.encoder.dim.to_string()),
            ("ngram_orders", join(&self.encoder.ngram_orders)),
            ("doc_cutoff", self.encoder.doc_cutoff.to_string()),
            ("window_size", self.encoder.window_size.to_string()),
            ("hash_seed", self.encoder.hash_seed.to_string()),
            ("hidden", join(&self.hidden.layers)),
            ("activation", activation_name(self.hidden.activation).to_string()),
            ("reward", reward.to_string()),
            ("reward_table", table),
            ("max_steps", opt(self.max_steps.map(|s| s.to_string()))),
            ("stop_loss", opt(self.stop_loss.map(|s| s.to_string()))),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Rebuilds a config from the map stored in a checkpoint.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for key in Self::KEYS {
            if let Some(v) = map.get(key) {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        self.to_kv().iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    /// SHA-256 over the canonical `key=value` listing.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_string().as_bytes()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Reward of stopping at each node for one query.
pub fn reward_fn<'a>(graph: &'a Graph, spec: &'a RewardSpec, query: &'a Query) -> impl Fn(NodeIdx) -> f64 + 'a {
    move |n| spec.node_reward(graph.id(n), &query.targets)
}

/// Deterministic 64-bit key from a seed and a list of string parts.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut bytes = Vec::new();
    for p in parts {
        bytes.extend_from_slice(&(p.len() as u64).to_le_bytes());
        bytes.extend_from_slice(p.as_bytes());
    }
    fnv1a64(seed, &bytes)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoverageReport {
    pub queries: usize,
    pub targets: usize,
    pub collected: usize,
    /// `(qid, target)` pairs with no path from the seed.
    pub unreachable: Vec<(String, String)>,
    /// `(qid, target)` pairs whose shortest distance exceeds the depth cutoff.
    pub too_far: Vec<(String, String)>,
    /// `(qid, target)` pairs whose terminal reward is not positive.
    pub zero_reward: Vec<(String, String)>,
}

impl CoverageReport {
    pub fn fraction(&self) -> f64 {
        if self.targets == 0 {
            0.0
        } else {
            self.collected as f64 / self.targets as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub trajectories: Vec<Trajectory>,
    pub coverage: CoverageReport,
}

/// Shortest-path DAG from `source`: BFS distances, path counts and predecessors.
struct ShortestPaths {
    dist: Vec<Option<usize>>,
    count: Vec<f64>,
    preds: Vec<Vec<NodeIdx>>,
}

fn shortest_paths(graph: &Graph, source: NodeIdx, max_depth: usize) -> ShortestPaths {
    let n = graph.node_count();
    let mut sp = ShortestPaths {
        dist: vec![None; n],
        count: vec![0.0; n],
        preds: vec![Vec::new(); n],
    };
    sp.dist[source.index()] = Some(0);
    sp.count[source.index()] = 1.0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = sp.dist[u.index()].expect("queued nodes have a distance");
        if du >= max_depth {
            continue;
        }
        let mut seen = Vec::new();
        for nb in graph.neighbors_of(u) {
            let v = nb.node;
            if v == u || seen.contains(&v) {
                continue;
            }
            seen.push(v);
            match sp.dist[v.index()] {
                None => {
                    sp.dist[v.index()] = Some(du + 1);
                    sp.count[v.index()] = sp.count[u.index()];
                    sp.preds[v.index()].push(u);
                    queue.push_back(v);
                }
                Some(dv) if dv == du + 1 => {
                    sp.count[v.index()] += sp.count[u.index()];
                    sp.preds[v.index()].push(u);
                }
                _ => {}
            }
        }
    }
    sp
}

fn move_to(graph: &Graph, state: &mdp::State, target: NodeIdx, cutoff: usize) -> Result<Action> {
    candidate_actions(graph, state, cutoff)?
        .into_iter()
        .find(|a| matches!(a, Action::Move { target: t, .. } if *t == target))
        .ok_or_else(|| Error::IllegalAction(format!("no move to {}", graph.id(target))))
}

/// Seed node of each query: the top-1 node by text similarity.
pub fn query_seeds(graph: &Graph, queries: &QuerySet, encoder: &EncoderConfig) -> Result<Vec<NodeIdx>> {
    let index = DenseIndex::build(graph, encoder);
    queries
        .iter()
        .map(|q| Ok(index.top_k(graph, &q.text, 1)?[0]))
        .collect()
}

/// One trajectory per (query, target): a uniformly drawn shortest path from
/// the query's seed node to the target, followed by `Stop`.
pub fn collect_trajectories(graph: &Graph, queries: &QuerySet, cfg: &TrainConfig, seed: u64) -> Result<Collection> {
    let seeds = query_seeds(graph, queries, &cfg.encoder)?;
    let mut coverage = CoverageReport {
        queries: queries.len(),
        ..Default::default()
    };
    let mut trajectories = Vec::new();
    for (query, &start) in queries.iter().zip(&seeds) {
        let sp = shortest_paths(graph, start, graph.node_count());
        for target_id in &query.targets {
            coverage.targets += 1;
            let key = (query.qid.clone(), target_id.clone());
            let target = graph.resolve(target_id)?;
            let Some(d) = sp.dist[target.index()] else {
                coverage.unreachable.push(key);
                continue;
            };
            if d > cfg.depth_cutoff {
                coverage.too_far.push(key);
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["collect", &query.qid, target_id]));
            let mut rev = vec![target];
            let mut v = target;
            while v != start {
                let preds = &sp.preds[v.index()];
                let mut pick = rng.gen::<f64>() * sp.count[v.index()];
                let mut chosen = preds[preds.len() - 1];
                for &u in preds {
                    if pick < sp.count[u.index()] {
                        chosen = u;
                        break;
                    }
                    pick -= sp.count[u.index()];
                }
                rev.push(chosen);
                v = chosen;
            }
            rev.reverse();
            let mut state = initial_state_at(&query.qid, &query.text, start);
            let mut traj = Trajectory::start(&state);
            for &next in &rev[1..] {
                let action = move_to(graph, &state, next, cfg.depth_cutoff)?;
                state = mdp::step(&state, &action);
                traj.push(action);
            }
            traj.push(Action::Stop);
            traj.reward = cfg.reward.node_reward(target_id, &query.targets);
            if !(traj.reward > 0.0) {
                coverage.zero_reward.push(key);
                continue;
            }
            coverage.collected += 1;
            trajectories.push(traj);
        }
    }
    Ok(Collection { trajectories, coverage })
}

/// One transition batch per decision of `trajectory`, the final `Stop` included.
///
/// Index 0 holds the taken action; up to `k` alternatives are drawn uniformly
/// without replacement from the other candidates and kept in candidate order.
pub fn expand_local_exploration(
    featurizer: &Featurizer<'_>,
    trajectory: &Trajectory,
    k: usize,
    seed: u64,
    reward: &dyn Fn(NodeIdx) -> f64,
) -> Result<Vec<TransitionBatch>> {
    let graph = featurizer.graph();
    let path_key = trajectory
        .path
        .iter()
        .map(|&n| graph.id(n))
        .collect::<Vec<_>>()
        .join("\u{1f}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["explore", &trajectory.qid, &path_key]));
    let states = trajectory.states();
    let mut batches = Vec::with_capacity(trajectory.len());
    for (state, taken) in states.iter().zip(&trajectory.actions) {
        let others: Vec<Action> = candidate_actions(graph, state, featurizer.depth_cutoff())?
            .into_iter()
            .filter(|a| a != taken)
            .collect();
        let explored: Vec<Action> = if others.len() <= k {
            others
        } else {
            let mut picks = sample(&mut rng, others.len(), k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| others[i].clone()).collect()
        };
        batches.push(TransitionBatch::build(featurizer, state, taken, &explored, reward)?);
    }
    Ok(batches)
}

/// Ground truth against each explored action of every batch.
pub fn make_preference_pairs(batches: &[TransitionBatch]) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for b in batches {
        let Some((gt, rest)) = b.candidates.split_first() else {
            continue;
        };
        for c in rest {
            pairs.push(PreferencePair {
                state: b.anchor.clone(),
                positive: gt.action.clone(),
                negative: c.action.clone(),
                positive_feats: gt.features.clone(),
                negative_feats: c.features.clone(),
            });
        }
    }
    pairs
}

/// Featurized training material of one split.
#[derive(Debug, Clone, Default)]
pub struct DataSplit {
    pub batches: Vec<TransitionBatch>,
    pub pairs: Vec<PreferencePair>,
    pub trajectories: Vec<FeaturizedTrajectory>,
}

impl DataSplit {
    fn items(&self, objective: Objective) -> usize {
        match objective {
            Objective::Dble | Objective::Sft => self.batches.len(),
            Objective::Prm => self.pairs.len(),
            Objective::Tb | Objective::Subtb => self.trajectories.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: DataSplit,
    pub eval: DataSplit,
    pub coverage: CoverageReport,
}

/// Collects, splits and featurizes training data. Whole trajectories are
/// assigned to a side by a seeded hash of `(qid, target)`.
pub fn prepare(graph: &Graph, queries: &QuerySet, cfg: &TrainConfig) -> Result<TrainingData> {
    cfg.validate()?;
    let featurizer = Featurizer::new(graph, &cfg.encoder, cfg.depth_cutoff)?;
    let collection = collect_trajectories(graph, queries, cfg, cfg.seed)?;
    let mut train = DataSplit::default();
    let mut eval = DataSplit::default();
    for traj in &collection.trajectories {
        let query = queries.get(&traj.qid).expect("trajectory qid comes from the query set");
        let target = graph.id(traj.terminal());
        let u = derive_seed(cfg.seed, &["split", &traj.qid, target]) as f64 / u64::MAX as f64;
        let side = if cfg.eval_ratio >= 1.0 || u < cfg.eval_ratio {
            &mut train
        } else {
            &mut eval
        };
        let reward = reward_fn(graph, &cfg.reward, query);
        let batches = expand_local_exploration(&featurizer, traj, cfg.num_exploration, cfg.seed, &reward)?;
        if matches!(cfg.objective, Objective::Prm) {
            side.pairs.extend(make_preference_pairs(&batches));
        }
        if matches!(cfg.objective, Objective::Tb | Objective::Subtb) {
            side.trajectories.push(FeaturizedTrajectory::build(&featurizer, traj, &reward)?);
        }
        side.batches.extend(batches);
    }
    if train.items(cfg.objective) == 0 {
        return Err(Error::Config("no training data: every trajectory was filtered or held out".into()));
    }
    Ok(TrainingData {
        train,
        eval,
        coverage: collection.coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub transition_loss: f64,
    pub start_loss: f64,
    pub end_loss: f64,
    pub total_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_policy_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "step,transition_loss,start_loss,end_loss,total_loss,eval_loss,eval_policy_acc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.transition_loss,
                r.start_loss,
                r.end_loss,
                r.total_loss,
                opt(r.eval_loss),
                opt(r.eval_policy_acc)
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub meta: CheckpointMeta,
    pub log: TrainingLog,
    pub steps: usize,
    /// Mean training-set loss of the final model.
    pub final_train_loss: f64,
    pub converged: bool,
    pub coverage: CoverageReport,
}

/// Loss of one training item; adds `scale · ∇` into `grads`.
fn item_loss(
    model: &Model,
    data: &DataSplit,
    cfg: &TrainConfig,
    i: usize,
    scale: f64,
    grads: &mut [f64],
) -> Result<(f64, LossParts)> {
    let whole = |l: f64| (l, LossParts { transition: l, ..Default::default() });
    let describe = |e: Error, state: &mdp::State| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at query {} path {:?}", state.qid, state.path)),
        other => other,
    };
    match cfg.objective {
        Objective::Dble => {
            let b = &data.batches[i];
            dble_accumulate(model, b, &cfg.boundary, scale, grads).map_err(|e| describe(e, &b.anchor))
        }
        Objective::Sft => {
            let b = &data.batches[i];
            sft_accumulate(model, b, scale, grads).map(whole).map_err(|e| describe(e, &b.anchor))
        }
        Objective::Prm => {
            let p = &data.pairs[i];
            prm_accumulate(model, p, scale, grads).map(whole).map_err(|e| describe(e, &p.state))
        }
        Objective::Tb => {
            let t = &data.trajectories[i];
            let log_z = if cfg.boundary.learn_initial_flow {
                LogZ::Learned
            } else {
                LogZ::Fixed(cfg.boundary.c_b)
            };
            tb_accumulate(model, t, log_z, scale, grads)
                .map(whole)
                .map_err(|e| describe(e, &t.steps[0].state))
        }
        Objective::Subtb => {
            let t = &data.trajectories[i];
            let spans = subtb_spans(t.len(), cfg.encoder.window_size);
            let w = scale / spans.len() as f64;
            let mut total = 0.0;
            for (a, b) in spans.iter().copied() {
                total += subtb_accumulate(model, t, a, b, &cfg.boundary, w, grads)
                    .map_err(|e| describe(e, &t.steps[0].state))?;
            }
            Ok(whole(total / spans.len() as f64))
        }
    }
}

/// All spans `(i, j)` with `0 ≤ i < j ≤ len` and `j − i ≤ window`.
pub fn subtb_spans(len: usize, window: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for i in 0..len {
        for j in i + 1..=len.min(i + window.max(1)) {
            spans.push((i, j));
        }
    }
    spans
}

/// Mean loss over a split without touching parameters.
pub fn mean_loss(model: &Model, data: &DataSplit, cfg: &TrainConfig) -> Result<Option<(f64, LossParts)>> {
    let n = data.items(cfg.objective);
    if n == 0 {
        return Ok(None);
    }
    let mut scratch = model.zero_grads();
    let mut total = 0.0;
    let mut parts = LossParts::default();
    for i in 0..n {
        let (l, p) = item_loss(model, data, cfg, i, 0.0, &mut scratch)?;
        total += l;
        parts += p;
    }
    Ok(Some((total / n as f64, parts.scaled(1.0 / n as f64))))
}

/// Fraction of batches whose highest-scoring candidate is the ground truth.
pub fn policy_accuracy(model: &Model, batches: &[TransitionBatch]) -> Result<Option<f64>> {
    if batches.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for b in batches {
        let scores = model.action_scores(&b.action_features())?;
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |best, (i, s)| if *s > scores[best] { i } else { best });
        hits += usize::from(b.candidates[best].is_ground_truth);
    }
    Ok(Some(hits as f64 / batches.len() as f64))
}

/// Finite-difference check of the mean training loss of `data` under `cfg.objective`.
pub fn check_gradients(data: &TrainingData, cfg: &TrainConfig, h: f64, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let model = init_model(cfg.encoder.clone(), cfg.hidden.clone(), cfg.init_seed)?;
    let n = data.train.items(cfg.objective);
    if n == 0 {
        return Err(Error::Config("no training items to check".into()));
    }
    grad_check(
        &model,
        |m| {
            let mut grads = m.zero_grads();
            let mut total = 0.0;
            for i in 0..n {
                total += item_loss(m, &data.train, cfg, i, 1.0 / n as f64, &mut grads)?.0;
            }
            Ok((total / n as f64, grads))
        },
        h,
        samples,
        seed,
    )
}

/// Runs the optimization loop on prepared data.
pub fn train_on(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = init_model(cfg.encoder.clone(), cfg.hidden.clone(), cfg.init_seed)?;
    let mut opt = OptState::new(&model, cfg.adam(), cfg.accumulation_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["shuffle"]));
    let n = data.train.items(cfg.objective);
    let mut log = TrainingLog::default();
    let mut steps = 0usize;
    let mut window = (0.0, LossParts::default(), 0usize);
    let mut converged = false;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    let mut record = |model: &Model, steps: usize, window: &mut (f64, LossParts, usize)| -> Result<LogRow> {
        let count = window.2.max(1) as f64;
        let parts = window.1.scaled(1.0 / count);
        let eval = mean_loss(model, &data.eval, cfg)?;
        let row = LogRow {
            step: steps,
            transition_loss: parts.transition,
            start_loss: parts.start,
            end_loss: parts.end,
            total_loss: window.0 / count,
            eval_loss: eval.map(|e| e.0),
            eval_policy_acc: policy_accuracy(model, &data.eval.batches)?,
        };
        *window = (0.0, LossParts::default(), 0);
        log.rows.push(row.clone());
        Ok(row)
    };

    'outer: for _epoch in 0..cfg.epochs {
        if steps >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (l, p) = item_loss(&model, &data.train, cfg, i, scale, &mut grads)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => Error::NonFinite(format!("step {steps}: {m}")),
                        other => other,
                    })?;
                window.0 += l;
                window.1 += p;
                window.2 += 1;
            }
            let Some(g) = opt.accumulate(&grads)? else {
                continue;
            };
            adam_step(&mut model, &g, &mut opt)?;
            steps += 1;
            if !model.all_finite() {
                return Err(Error::NonFinite(format!("parameters after step {steps}")));
            }
            if steps % cfg.eval_step == 0 {
                let row = record(&model, steps, &mut window)?;
                if let Some(target) = cfg.stop_loss {
                    if row.total_loss <= target {
                        let (full, _) = mean_loss(&model, &data.train, cfg)?.expect("training split is non-empty");
                        if full <= target {
                            converged = true;
                            break 'outer;
                        }
                    }
                }
            }
            if steps >= max_steps {
                break 'outer;
            }
        }
    }
    if !converged && steps < max_steps {
        if let Some(g) = opt.flush() {
            adam_step(&mut model, &g, &mut opt)?;
            steps += 1;
        }
    }
    if window.2 > 0 {
        record(&model, steps, &mut window)?;
    }
    let (final_train_loss, _) = mean_loss(&model, &data.train, cfg)?.expect("training split is non-empty");
    if let Some(target) = cfg.stop_loss {
        converged = final_train_loss <= target;
    }
    Ok(TrainOutcome {
        meta: CheckpointMeta {
            config_digest: cfg.digest(),
            train_config: cfg.to_kv(),
        },
        model,
        log,
        steps,
        final_train_loss,
        converged,
        coverage: data.coverage.clone(),
    })
}

/// Collects data and trains a model in one call.
pub fn train(graph: &Graph, queries: &QuerySet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = prepare(graph, queries, cfg)?;
    train_on(&data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EdgeRecord, NodeRecord, Traversal};
    use std::collections::BTreeSet;

    fn graph(edges: &[(&str, &str)], texts: &[(&str, &str)]) -> Graph {
        let nodes = texts
            .iter()
            .map(|(id, t)| NodeRecord { id: id.to_string(), text: t.to_string(), node_type: String::new() })
            .collect();
        let edges = edges
            .iter()
            .map(|(s, d)| EdgeRecord { src: s.to_string(), dst: d.to_string(), rel: "link".into() })
            .collect();
        Graph::from_records("t", nodes, edges, Traversal::Bidirectional).unwrap()
    }

    fn queries(g: &Graph, text: &str, targets: &[&str]) -> QuerySet {
        let q = Query {
            qid: "q0".into(),
            text: text.into(),
            targets: targets.iter().map(|t| t.to_string()).collect::<BTreeSet<_>>(),
        };
        QuerySet::new(vec![q], g).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig::default().with_dim(32),
            hidden: HiddenSpec { layers: vec![8], activation: Activation::Tanh },
            eval_ratio: 1.0,
            depth_cutoff: 2,
            ..Default::default()
        }
    }

    fn diamond() -> Graph {
        graph(
            &[("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")],
            &[("a", "alpha start"), ("b", "bravo"), ("c", "charlie"), ("d", "delta")],
        )
    }

    #[test]
    fn target_equal_to_seed_gives_single_stop() {
        let g = diamond();
        let qs = queries(&g, "alpha start", &["a"]);
        let c = collect_trajectories(&g, &qs, &small_cfg(), 1).unwrap();
        assert_eq!(c.trajectories.len(), 1);
        assert_eq!(c.trajectories[0].actions, vec![Action::Stop]);
        assert_eq!(c.coverage.fraction(), 1.0);
    }

    #[test]
    fn chain_has_unique_path() {
        let g = graph(&[("a", "b"), ("b", "c")], &[("a", "alpha start"), ("b", "bravo"), ("c", "charlie")]);
        let qs = queries(&g, "alpha start", &["c"]);
        let c = collect_trajectories(&g, &qs, &small_cfg(), 9).unwrap();
        assert_eq!(c.trajectories[0].path.iter().map(|&n| g.id(n)).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(c.trajectories[0].is_terminated());
    }

    #[test]
    fn diamond_paths_are_uniform() {
        let g = diamond();
        let qs = queries(&g, "alpha start", &["d"]);
        let cfg = small_cfg();
        let b = g.resolve("b").unwrap();
        let n = 10_000;
        let via_b = (0..n)
            .filter(|&s| collect_trajectories(&g, &qs, &cfg, s).unwrap().trajectories[0].path[1] == b)
            .count();
        let f = via_b as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.02, "{f}");
    }

    #[test]
    fn unreachable_and_far_targets_are_counted() {
        let g = graph(
            &[("a", "b"), ("b", "c"), ("c", "d")],
            &[("a", "alpha start"), ("b", "b"), ("c", "c"), ("d", "d"), ("z", "zulu")],
        );
        let qs = queries(&g, "alpha start", &["d", "z", "b"]);
        let c = collect_trajectories(&g, &qs, &small_cfg(), 0).unwrap();
        assert_eq!(c.trajectories.len(), 1);
        assert_eq!(c.coverage.too_far, vec![("q0".to_string(), "d".to_string())]);
        assert_eq!(c.coverage.unreachable, vec![("q0".to_string(), "z".to_string())]);
    }

    #[test]
    fn exploration_sizes_and_pairs() {
        let mut texts = vec![("hub", "hub start")];
        let leaves = ["l1", "l2", "l3", "l4", "l5", "l6"];
        texts.extend(leaves.iter().map(|l| (*l, "leaf")));
        let edges: Vec<(&str, &str)> = leaves.iter().map(|l| ("hub", *l)).collect();
        let g = graph(&edges, &texts);
        let qs = queries(&g, "hub start", &["l1"]);
        let cfg = small_cfg();
        let f = Featurizer::new(&g, &cfg.encoder, 2).unwrap();
        let traj = &collect_trajectories(&g, &qs, &cfg, 0).unwrap().trajectories[0];
        let q = qs.get("q0").unwrap();
        let r = reward_fn(&g, &cfg.reward, q);
        let batches = expand_local_exploration(&f, traj, 4, 3, &r).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 5);
        assert_eq!(batches[1].len(), 2);
        assert!(batches.iter().all(|b| b.candidates[0].is_ground_truth));
        assert_eq!(batches, expand_local_exploration(&f, traj, 4, 3, &r).unwrap());
        let one = expand_local_exploration(&f, traj, 0, 3, &r).unwrap();
        assert!(one.iter().all(|b| b.len() == 1));
        assert!(make_preference_pairs(&one).is_empty());
        let pairs = make_preference_pairs(&batches[..1]);
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|p| p.state == batches[0].anchor));
    }

    #[test]
    fn config_roundtrip_and_errors() {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv("objective = tb\nnum_exploration=2 # comment\n\nreward_table = x:1,y:2.5\nstop_loss=0.001\n")
            .unwrap();
        assert_eq!(cfg.objective, Objective::Tb);
        assert_eq!(cfg.num_exploration, 2);
        assert!(matches!(&cfg.reward, RewardSpec::Table(t) if t["y"] == 2.5));
        let plain = TrainConfig::default();
        assert_eq!(TrainConfig::from_map(&plain.to_kv()).unwrap(), plain);
        let back = TrainConfig::from_map(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(TrainConfig::default().digest(), cfg.digest());
        assert!(cfg.clone().apply_kv("bogus=1").is_err());
        assert!(cfg.clone().apply_kv("no equals sign").is_err());
        let mut bad = TrainConfig::default();
        bad.eval_ratio = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let g = diamond();
        let qs = queries(&g, "alpha start", &["d"]);
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let out = train(&g, &qs, &cfg).unwrap();
        let init = init_model(cfg.encoder.clone(), cfg.hidden.clone(), cfg.init_seed).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn chain_converges_and_is_deterministic() {
        let g = graph(&[("a", "b"), ("b", "c")], &[("a", "alpha start"), ("b", "bravo"), ("c", "charlie")]);
        let qs = queries(&g, "alpha start", &["c"]);
        let cfg = TrainConfig { epochs: 500, lr: 1e-2, eval_step: 10, ..small_cfg() };
        let out = train(&g, &qs, &cfg).unwrap();
        assert!(out.final_train_loss < 1e-3, "{}", out.final_train_loss);
        let again = train(&g, &qs, &cfg).unwrap();
        let meta = &out.meta;
        assert_eq!(out.model.to_checkpoint_json(meta).unwrap(), again.model.to_checkpoint_json(meta).unwrap());
        assert_eq!(out.log.to_csv(), again.log.to_csv());
        assert!(out.log.to_csv().starts_with(TrainingLog::HEADER));
        for r in &out.log.rows {
            assert!(r.total_loss >= 0.0 && r.transition_loss >= 0.0 && r.start_loss >= 0.0 && r.end_loss >= 0.0);
        }
    }

    #[test]
    fn accumulation_matches_large_batch() {
        let g = diamond();
        let qs = queries(&g, "alpha start", &["d", "b"]);
        let base = TrainConfig { epochs: 1, max_steps: Some(1), ..small_cfg() };
        let data = prepare(&g, &qs, &base).unwrap();
        let n = data.train.batches.len();
        let model = init_model(base.encoder.clone(), base.hidden.clone(), 0).unwrap();
        let mut big = model.zero_grads();
        for i in 0..n {
            item_loss(&model, &data.train, &base, i, 1.0 / n as f64, &mut big).unwrap();
        }
        let mut opt = OptState::new(&model, base.adam(), n);
        let mut out = None;
        for i in 0..n {
            let mut g1 = model.zero_grads();
            item_loss(&model, &data.train, &base, i, 1.0, &mut g1).unwrap();
            out = opt.accumulate(&g1).unwrap();
        }
        let acc = out.unwrap();
        for (a, b) in acc.iter().zip(&big) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn spans_respect_window() {
        assert_eq!(subtb_spans(3, 3).len(), 6);
        assert_eq!(subtb_spans(3, 1), vec![(0, 1), (1, 2), (2, 3)]);
        assert!(subtb_spans(4, 2).iter().all(|(i, j)| j - i <= 2));
    }
}
