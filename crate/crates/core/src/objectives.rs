//! Training objectives with exact gradients.
//!
//! Every loss is split into a scalar core that works on raw scores and
//! log-flows (handy for independent checks) and a model-level wrapper that
//! runs the heads forward, applies the chain rule and backpropagates.
//!
//! Log-flows of boundary states are substituted rather than predicted:
//! a stopped state, or a state at the depth cutoff where `Stop` is the only
//! action, has `log F = c_b + ln max(R, floor)`; the initial state has
//! `log F = c_b` unless the initial flow is learned.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureVector, Featurizer};
use crate::error::{Error, Result};
use crate::kg::NodeIdx;
use crate::mdp::{self, Action, State, Trajectory};
use crate::model::{log_softmax, Model, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dble,
    Tb,
    Subtb,
    Sft,
    Prm,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Dble,
        Objective::Tb,
        Objective::Subtb,
        Objective::Sft,
        Objective::Prm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Dble => "dble",
            Objective::Tb => "tb",
            Objective::Subtb => "subtb",
            Objective::Sft => "sft",
            Objective::Prm => "prm",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s}")))
    }
}

/// How boundary log-flows are substituted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConfig {
    /// `c_b`: log-flow offset shared by the initial and terminal boundaries.
    pub c_b: f64,
    /// Predict the initial state's flow with the flow head instead of pinning it to `c_b`.
    pub learn_initial_flow: bool,
    /// Rewards are clamped below by this value before taking logs.
    pub reward_floor: f64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            c_b: 0.0,
            learn_initial_flow: false,
            reward_floor: 1e-3,
        }
    }
}

impl BoundaryConfig {
    /// Flow head at the initial state; needed when terminal rewards do not sum to `exp(c_b)`.
    pub fn learned() -> Self {
        BoundaryConfig {
            learn_initial_flow: true,
            ..Default::default()
        }
    }

    pub fn terminal_log_flow(&self, reward: f64) -> f64 {
        self.c_b + reward.max(self.reward_floor).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    Initial,
    /// Stopped state.
    Terminal { reward: f64 },
    /// Depth-cutoff state: its only continuation is `Stop`.
    Cutoff { reward: f64 },
}

/// A state as seen by the flow head: its features and boundary status.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNode {
    pub feats: FeatureVector,
    pub boundary: Option<Boundary>,
}

impl FlowNode {
    pub fn learned(feats: FeatureVector) -> Self {
        FlowNode { feats, boundary: None }
    }

    pub fn fixed(boundary: Boundary) -> Self {
        FlowNode {
            feats: FeatureVector::default(),
            boundary: Some(boundary),
        }
    }

    pub fn build(featurizer: &Featurizer<'_>, state: &State, reward: &dyn Fn(NodeIdx) -> f64) -> Self {
        if state.stopped {
            return FlowNode::fixed(Boundary::Terminal {
                reward: reward(state.current()),
            });
        }
        if state.depth() >= featurizer.depth_cutoff() {
            return FlowNode::fixed(Boundary::Cutoff {
                reward: reward(state.current()),
            });
        }
        let feats = featurizer.state(state);
        let boundary = state.is_initial().then_some(Boundary::Initial);
        FlowNode { feats, boundary }
    }

    /// Fixed log-flow, or `None` when the flow head must be evaluated.
    pub fn resolve(&self, cfg: &BoundaryConfig) -> Option<f64> {
        match self.boundary {
            Some(Boundary::Terminal { reward }) | Some(Boundary::Cutoff { reward }) => {
                Some(cfg.terminal_log_flow(reward))
            }
            Some(Boundary::Initial) if !cfg.learn_initial_flow => Some(cfg.c_b),
            _ => None,
        }
    }

    pub fn is_initial(&self) -> bool {
        matches!(self.boundary, Some(Boundary::Initial))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub action: Action,
    pub next: State,
    pub features: FeatureVector,
    pub next_flow: FlowNode,
    pub is_terminal: bool,
    pub is_ground_truth: bool,
}

/// One anchor state and its `k+1` candidate transitions; index 0 is the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub anchor: State,
    pub anchor_flow: FlowNode,
    pub candidates: Vec<Candidate>,
}

impl TransitionBatch {
    /// Builds a batch; `ground_truth` goes first, then `explored` in order.
    pub fn build(
        featurizer: &Featurizer<'_>,
        anchor: &State,
        ground_truth: &Action,
        explored: &[Action],
        reward: &dyn Fn(NodeIdx) -> f64,
    ) -> Result<Self> {
        let legal = mdp::candidate_actions(featurizer.graph(), anchor, featurizer.depth_cutoff())?;
        let state_feats = featurizer.state(anchor);
        let mut candidates = Vec::with_capacity(explored.len() + 1);
        for (i, action) in std::iter::once(ground_truth).chain(explored).enumerate() {
            if !legal.contains(action) {
                return Err(Error::IllegalAction(format!("{action:?}")));
            }
            let next = mdp::step(anchor, action);
            candidates.push(Candidate {
                features: featurizer.action_with(&state_feats, anchor, action),
                next_flow: FlowNode::build(featurizer, &next, reward),
                is_terminal: next.stopped,
                is_ground_truth: i == 0,
                action: action.clone(),
                next,
            });
        }
        Ok(TransitionBatch {
            anchor_flow: FlowNode::build(featurizer, anchor, reward),
            anchor: anchor.clone(),
            candidates,
        })
    }

    pub fn anchor_is_initial(&self) -> bool {
        self.anchor.is_initial()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn action_features(&self) -> Vec<FeatureVector> {
        self.candidates.iter().map(|c| c.features.clone()).collect()
    }
}

/// Ground-truth versus explored action at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub state: State,
    pub positive: Action,
    pub negative: Action,
    pub positive_feats: FeatureVector,
    pub negative_feats: FeatureVector,
}

/// One decision of a featurized trajectory, with all candidates at that state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: State,
    pub flow: FlowNode,
    pub actions: Vec<Action>,
    pub action_feats: Vec<FeatureVector>,
    pub taken: usize,
}

/// A terminated trajectory with everything trajectory-level losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedTrajectory {
    pub trajectory: Trajectory,
    pub steps: Vec<TrajectoryStep>,
    pub terminal_flow: FlowNode,
    pub reward: f64,
}

impl FeaturizedTrajectory {
    pub fn build(
        featurizer: &Featurizer<'_>,
        trajectory: &Trajectory,
        reward: &dyn Fn(NodeIdx) -> f64,
    ) -> Result<Self> {
        if !trajectory.is_terminated() {
            return Err(Error::NotTerminated);
        }
        let states = trajectory.states();
        let mut steps = Vec::with_capacity(trajectory.len());
        for (state, action) in states.iter().zip(&trajectory.actions) {
            let actions = mdp::candidate_actions(featurizer.graph(), state, featurizer.depth_cutoff())?;
            let taken = actions
                .iter()
                .position(|a| a == action)
                .ok_or_else(|| Error::IllegalAction(format!("{action:?}")))?;
            let sf = featurizer.state(state);
            let action_feats = actions.iter().map(|a| featurizer.action_with(&sf, state, a)).collect();
            steps.push(TrajectoryStep {
                flow: FlowNode::build(featurizer, state, reward),
                state: state.clone(),
                actions,
                action_feats,
                taken,
            });
        }
        let terminal = states.last().expect("terminated trajectory has states");
        Ok(FeaturizedTrajectory {
            trajectory: trajectory.clone(),
            steps,
            terminal_flow: FlowNode::build(featurizer, terminal, reward),
            reward: reward(trajectory.terminal()),
        })
    }

    /// Number of actions `T`; states are indexed `0..=T`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn flow_at(&self, i: usize) -> &FlowNode {
        if i < self.steps.len() {
            &self.steps[i].flow
        } else {
            &self.terminal_flow
        }
    }
}

/// Squared-error contributions split by the kind of transition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    /// Terms between two non-boundary states.
    pub transition: f64,
    /// Terms leaving the initial state.
    pub start: f64,
    /// Terms entering a stopped state.
    pub end: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.transition += o.transition;
        self.start += o.start;
        self.end += o.end;
    }
}

impl LossParts {
    pub fn scaled(self, s: f64) -> Self {
        LossParts {
            transition: self.transition * s,
            start: self.start * s,
            end: self.end * s,
        }
    }
}

/// Scalar detailed-balance loss over one anchor and its candidates:
/// `Σ_i (anchor − next_i + s_i − logΣ_j exp s_j)²`.
///
/// Returns the loss with its derivatives w.r.t. the anchor log-flow, each
/// next-state log-flow and each score.
pub fn dble_core(anchor: f64, next: &[f64], scores: &[f64]) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    if scores.is_empty() || scores.len() != next.len() {
        return Err(Error::Config("dble needs one next-state flow per candidate".into()));
    }
    let logp = log_softmax(scores)?;
    let resid: Vec<f64> = next
        .iter()
        .zip(&logp)
        .map(|(n, lp)| anchor - n + lp)
        .collect();
    let loss = resid.iter().map(|e| e * e).sum();
    let d_anchor = resid.iter().map(|e| 2.0 * e).sum::<f64>();
    let d_next = resid.iter().map(|e| -2.0 * e).collect();
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let d_scores = resid
        .iter()
        .zip(&probs)
        .map(|(e, p)| 2.0 * e - p * d_anchor)
        .collect();
    Ok((loss, d_anchor, d_next, d_scores))
}

/// `−log softmax(scores)[truth]` with its score gradient.
pub fn sft_core(scores: &[f64], truth: usize) -> Result<(f64, Vec<f64>)> {
    let logp = log_softmax(scores)?;
    let loss = -logp[truth];
    let grad = logp
        .iter()
        .enumerate()
        .map(|(j, l)| l.exp() - if j == truth { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(r⁺ − r⁻)`; returns loss and derivatives w.r.t. `r⁺`, `r⁻`.
pub fn prm_core(positive: f64, negative: f64) -> (f64, f64, f64) {
    let margin = positive - negative;
    let loss = softplus(-margin);
    let d = -sigmoid(-margin);
    (loss, d, -d)
}

struct Evaluated {
    value: f64,
    tape: Option<Tape>,
}

fn eval_flow(model: &Model, node: &FlowNode, cfg: &BoundaryConfig) -> Result<Evaluated> {
    match node.resolve(cfg) {
        Some(value) => Ok(Evaluated { value, tape: None }),
        None => {
            let tape = model.flow_tape(&node.feats)?;
            Ok(Evaluated {
                value: tape.output,
                tape: Some(tape),
            })
        }
    }
}

fn backprop_flow(model: &Model, node: &FlowNode, ev: &Evaluated, dout: f64, grads: &mut [f64]) {
    if let Some(tape) = &ev.tape {
        model.flow_backward(&node.feats, tape, dout, grads);
    }
}

fn finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("{what} loss")))
    }
}

/// Detailed balance with local exploration on one batch. Adds
/// `scale · ∂loss/∂θ` into `grads` and returns the unscaled loss and its parts.
pub fn dble_accumulate(
    model: &Model,
    batch: &TransitionBatch,
    cfg: &BoundaryConfig,
    scale: f64,
    grads: &mut [f64],
) -> Result<(f64, LossParts)> {
    if batch.is_empty() {
        return Err(Error::Config("empty candidate list".into()));
    }
    let anchor = eval_flow(model, &batch.anchor_flow, cfg)?;
    let mut next = Vec::with_capacity(batch.len());
    let mut tapes = Vec::with_capacity(batch.len());
    for c in &batch.candidates {
        next.push(eval_flow(model, &c.next_flow, cfg)?);
        tapes.push(model.score_tape(&c.features)?);
    }
    let next_vals: Vec<f64> = next.iter().map(|e| e.value).collect();
    let scores: Vec<f64> = tapes.iter().map(|t| t.output).collect();
    let (loss, d_anchor, d_next, d_scores) = dble_core(anchor.value, &next_vals, &scores)?;
    finite(loss, "dble")?;

    let logp = log_softmax(&scores)?;
    let mut parts = LossParts::default();
    for (i, c) in batch.candidates.iter().enumerate() {
        let e = anchor.value - next_vals[i] + logp[i];
        if c.is_terminal {
            parts.end += e * e;
        } else if batch.anchor_is_initial() {
            parts.start += e * e;
        } else {
            parts.transition += e * e;
        }
    }

    backprop_flow(model, &batch.anchor_flow, &anchor, scale * d_anchor, grads);
    for (i, c) in batch.candidates.iter().enumerate() {
        backprop_flow(model, &c.next_flow, &next[i], scale * d_next[i], grads);
        model.score_backward(&c.features, &tapes[i], scale * d_scores[i], grads);
    }
    Ok((loss, parts))
}

pub fn dble_loss(model: &Model, batch: &TransitionBatch, cfg: &BoundaryConfig) -> Result<(f64, Vec<f64>)> {
    let mut grads = model.zero_grads();
    let (loss, _) = dble_accumulate(model, batch, cfg, 1.0, &mut grads)?;
    Ok((loss, grads))
}

pub fn sft_accumulate(model: &Model, batch: &TransitionBatch, scale: f64, grads: &mut [f64]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty candidate list".into()));
    }
    let truth = batch
        .candidates
        .iter()
        .position(|c| c.is_ground_truth)
        .ok_or_else(|| Error::Config("batch has no ground-truth candidate".into()))?;
    let tapes: Vec<Tape> = batch
        .candidates
        .iter()
        .map(|c| model.score_tape(&c.features))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = tapes.iter().map(|t| t.output).collect();
    let (loss, d) = sft_core(&scores, truth)?;
    finite(loss, "sft")?;
    for ((c, t), g) in batch.candidates.iter().zip(&tapes).zip(&d) {
        model.score_backward(&c.features, t, scale * g, grads);
    }
    Ok(loss)
}

/// Behavior cloning: cross-entropy of the ground-truth candidate.
pub fn sft_loss(model: &Model, batch: &TransitionBatch) -> Result<(f64, Vec<f64>)> {
    let mut grads = model.zero_grads();
    let loss = sft_accumulate(model, batch, 1.0, &mut grads)?;
    Ok((loss, grads))
}

pub fn prm_accumulate(model: &Model, pair: &PreferencePair, scale: f64, grads: &mut [f64]) -> Result<f64> {
    let tp = model.score_tape(&pair.positive_feats)?;
    let tn = model.score_tape(&pair.negative_feats)?;
    let (loss, dp, dn) = prm_core(tp.output, tn.output);
    finite(loss, "prm")?;
    model.score_backward(&pair.positive_feats, &tp, scale * dp, grads);
    model.score_backward(&pair.negative_feats, &tn, scale * dn, grads);
    Ok(loss)
}

/// Pairwise process-reward loss `−log σ(r⁺ − r⁻)`.
pub fn prm_loss(model: &Model, pair: &PreferencePair) -> Result<(f64, Vec<f64>)> {
    let mut grads = model.zero_grads();
    let loss = prm_accumulate(model, pair, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// Where trajectory balance takes `log Z` from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogZ {
    /// The model's learnable scalar.
    Learned,
    Fixed(f64),
}

/// Sum of `log P_F` over steps `[from, to)`, with per-step tapes and log-probs.
fn forward_log_prob(
    model: &Model,
    traj: &FeaturizedTrajectory,
    from: usize,
    to: usize,
) -> Result<(f64, Vec<(Vec<Tape>, Vec<f64>)>)> {
    let mut total = 0.0;
    let mut cache = Vec::with_capacity(to - from);
    for step in &traj.steps[from..to] {
        let tapes: Vec<Tape> = step
            .action_feats
            .iter()
            .map(|f| model.score_tape(f))
            .collect::<Result<_>>()?;
        let scores: Vec<f64> = tapes.iter().map(|t| t.output).collect();
        let logp = log_softmax(&scores)?;
        total += logp[step.taken];
        cache.push((tapes, logp));
    }
    Ok((total, cache))
}

fn backprop_log_prob(
    model: &Model,
    traj: &FeaturizedTrajectory,
    from: usize,
    cache: &[(Vec<Tape>, Vec<f64>)],
    dout: f64,
    grads: &mut [f64],
) {
    for (k, (tapes, logp)) in cache.iter().enumerate() {
        let step = &traj.steps[from + k];
        for (j, (f, t)) in step.action_feats.iter().zip(tapes).enumerate() {
            let indicator = if j == step.taken { 1.0 } else { 0.0 };
            model.score_backward(f, t, dout * (indicator - logp[j].exp()), grads);
        }
    }
}

pub fn tb_accumulate(
    model: &Model,
    traj: &FeaturizedTrajectory,
    log_z: LogZ,
    scale: f64,
    grads: &mut [f64],
) -> Result<f64> {
    if !(traj.reward > 0.0) {
        return Err(Error::ZeroReward(traj.trajectory.qid.clone()));
    }
    let (log_pf, cache) = forward_log_prob(model, traj, 0, traj.len())?;
    let lz = match log_z {
        LogZ::Learned => model.log_z(),
        LogZ::Fixed(v) => v,
    };
    let resid = lz + log_pf - traj.reward.ln();
    let loss = finite(resid * resid, "tb")?;
    let d = 2.0 * resid * scale;
    if log_z == LogZ::Learned {
        grads[model.log_z_index()] += d;
    }
    backprop_log_prob(model, traj, 0, &cache, d, grads);
    Ok(loss)
}

/// Trajectory balance `(log Z + log P_F(τ) − log R)²` with `P_B = 1`.
pub fn tb_loss(model: &Model, traj: &FeaturizedTrajectory, log_z: LogZ) -> Result<(f64, Vec<f64>)> {
    let mut grads = model.zero_grads();
    let loss = tb_accumulate(model, traj, log_z, 1.0, &mut grads)?;
    Ok((loss, grads))
}

pub fn subtb_accumulate(
    model: &Model,
    traj: &FeaturizedTrajectory,
    i: usize,
    j: usize,
    cfg: &BoundaryConfig,
    scale: f64,
    grads: &mut [f64],
) -> Result<f64> {
    if i >= j || j > traj.len() {
        return Err(Error::Config(format!(
            "subtrajectory span [{i}, {j}] invalid for length {}",
            traj.len()
        )));
    }
    let (log_pf, cache) = forward_log_prob(model, traj, i, j)?;
    let (ni, nj) = (traj.flow_at(i), traj.flow_at(j));
    let fi = eval_flow(model, ni, cfg)?;
    let fj = eval_flow(model, nj, cfg)?;
    let resid = fi.value + log_pf - fj.value;
    let loss = finite(resid * resid, "subtb")?;
    let d = 2.0 * resid * scale;
    backprop_flow(model, ni, &fi, d, grads);
    backprop_flow(model, nj, &fj, -d, grads);
    backprop_log_prob(model, traj, i, &cache, d, grads);
    Ok(loss)
}

/// Subtrajectory balance `(log F(s_i) + log P_F(τ_{i:j}) − log F(s_j))²`.
pub fn subtb_loss(
    model: &Model,
    traj: &FeaturizedTrajectory,
    i: usize,
    j: usize,
    cfg: &BoundaryConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = model.zero_grads();
    let loss = subtb_accumulate(model, traj, i, j, cfg, 1.0, &mut grads)?;
    Ok((loss, grads))
}
