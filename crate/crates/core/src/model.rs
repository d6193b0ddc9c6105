//! Policy and flow heads with hand-written backpropagation, Adam, checkpoints
//! and a finite-difference gradient checker.
//!
//! All parameters live in one flat vector: policy head, then flow head, then
//! the learnable log-partition scalar used by trajectory balance. Weight
//! matrices are stored row-major with shape `(fan_in, fan_out)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::encoder::{EncoderConfig, FeatureVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenSpec {
    pub layers: Vec<usize>,
    pub activation: Activation,
}

impl Default for HiddenSpec {
    fn default() -> Self {
        HiddenSpec {
            layers: vec![128, 128],
            activation: Activation::Tanh,
        }
    }
}

impl HiddenSpec {
    pub fn linear() -> Self {
        HiddenSpec {
            layers: Vec::new(),
            activation: Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Layout of one scalar-output MLP inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    offset: usize,
    len: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    hidden: Vec<Vec<f64>>,
    pub output: f64,
}

impl Mlp {
    fn new(input: usize, hidden: &HiddenSpec, offset: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend(&hidden.layers);
        sizes.push(1);
        let mut layers = Vec::new();
        let mut cursor = offset;
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = cursor;
            let b = w + fan_in * fan_out;
            cursor = b + fan_out;
            layers.push(Layer { fan_in, fan_out, w, b });
        }
        Mlp {
            layers,
            activation: hidden.activation,
            offset,
            len: cursor - offset,
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Flat index of weight `(input, output)` in layer `layer`.
    pub fn weight_index(&self, layer: usize, input: usize, output: usize) -> usize {
        let l = &self.layers[layer];
        l.w + input * l.fan_out + output
    }

    pub fn bias_index(&self, layer: usize, output: usize) -> usize {
        self.layers[layer].b + output
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for p in &mut params[l.w..l.b] {
                *p = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
            }
            for p in &mut params[l.b..l.b + l.fan_out] {
                *p = 0.0;
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &FeatureVector) -> Tape {
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut out = 0.0;
        for (li, l) in self.layers.iter().enumerate() {
            let mut z = params[l.b..l.b + l.fan_out].to_vec();
            let w = &params[l.w..l.b];
            if li == 0 {
                for (i, xi) in x.entries() {
                    let row = &w[i * l.fan_out..(i + 1) * l.fan_out];
                    for (zo, wo) in z.iter_mut().zip(row) {
                        *zo += xi * wo;
                    }
                }
            } else {
                let a: &Vec<f64> = &hidden[li - 1];
                for (i, &ai) in a.iter().enumerate() {
                    if ai == 0.0 {
                        continue;
                    }
                    let row = &w[i * l.fan_out..(i + 1) * l.fan_out];
                    for (zo, wo) in z.iter_mut().zip(row) {
                        *zo += ai * wo;
                    }
                }
            }
            if li == last {
                out = z[0];
            } else {
                for v in &mut z {
                    *v = self.activation.apply(*v);
                }
                hidden.push(z);
            }
        }
        Tape { hidden, output: out }
    }

    /// Accumulates `dout · ∂output/∂params` into `grads`.
    pub fn backward(&self, params: &[f64], x: &FeatureVector, tape: &Tape, dout: f64, grads: &mut [f64]) {
        if dout == 0.0 {
            return;
        }
        let mut delta = vec![dout];
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            for (g, d) in grads[l.b..l.b + l.fan_out].iter_mut().zip(&delta) {
                *g += d;
            }
            if li == 0 {
                for (i, xi) in x.entries() {
                    let row = &mut grads[l.w + i * l.fan_out..l.w + (i + 1) * l.fan_out];
                    for (g, d) in row.iter_mut().zip(&delta) {
                        *g += xi * d;
                    }
                }
            } else {
                let a = &tape.hidden[li - 1];
                let w = &params[l.w..l.b];
                let mut prev = vec![0.0; l.fan_in];
                for (i, &ai) in a.iter().enumerate() {
                    let row_w = &w[i * l.fan_out..(i + 1) * l.fan_out];
                    let mut acc = 0.0;
                    for (wo, d) in row_w.iter().zip(&delta) {
                        acc += wo * d;
                    }
                    prev[i] = acc * self.activation.derivative_from_output(ai);
                    if ai != 0.0 {
                        let row_g = &mut grads[l.w + i * l.fan_out..l.w + (i + 1) * l.fan_out];
                        for (g, d) in row_g.iter_mut().zip(&delta) {
                            *g += ai * d;
                        }
                    }
                }
                delta = prev;
            }
        }
    }
}

/// Trainable retrieval model: a policy head over action features and a flow
/// head over state features, both reading the same hashed text features.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub hidden: HiddenSpec,
    pub init_seed: u64,
    policy: Mlp,
    flow: Mlp,
    params: Vec<f64>,
}

impl Model {
    fn layout(encoder: &EncoderConfig, hidden: &HiddenSpec) -> (Mlp, Mlp, usize) {
        let policy = Mlp::new(encoder.action_len(), hidden, 0);
        let flow = Mlp::new(encoder.state_len(), hidden, policy.len);
        let total = policy.len + flow.len + 1;
        (policy, flow, total)
    }

    /// Model with every parameter set to zero.
    pub fn zeros(encoder: EncoderConfig, hidden: HiddenSpec) -> Result<Self> {
        encoder.validate()?;
        if hidden.layers.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        let (policy, flow, total) = Self::layout(&encoder, &hidden);
        Ok(Model {
            encoder,
            hidden,
            init_seed: 0,
            policy,
            flow,
            params: vec![0.0; total],
        })
    }

    pub fn policy_head(&self) -> &Mlp {
        &self.policy
    }

    pub fn flow_head(&self) -> &Mlp {
        &self.flow
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn log_z_index(&self) -> usize {
        self.params.len() - 1
    }

    pub fn log_z(&self) -> f64 {
        self.params[self.log_z_index()]
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn check_len(expected: usize, fv: &FeatureVector) -> Result<()> {
        if fv.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: fv.len(),
            });
        }
        Ok(())
    }

    pub fn score(&self, action_feats: &FeatureVector) -> Result<f64> {
        Ok(self.score_tape(action_feats)?.output)
    }

    pub fn score_tape(&self, action_feats: &FeatureVector) -> Result<Tape> {
        Self::check_len(self.policy.input_len(), action_feats)?;
        Ok(self.policy.forward(&self.params, action_feats))
    }

    pub fn score_backward(&self, action_feats: &FeatureVector, tape: &Tape, dout: f64, grads: &mut [f64]) {
        self.policy.backward(&self.params, action_feats, tape, dout, grads);
    }

    /// Policy head output `r_θ(s, a)` for each candidate.
    pub fn action_scores(&self, action_feats: &[FeatureVector]) -> Result<Vec<f64>> {
        if action_feats.is_empty() {
            return Err(Error::Config("at least one action is required".into()));
        }
        action_feats.iter().map(|f| self.score(f)).collect()
    }

    pub fn log_flow(&self, state_feats: &FeatureVector) -> Result<f64> {
        Ok(self.flow_tape(state_feats)?.output)
    }

    pub fn flow_tape(&self, state_feats: &FeatureVector) -> Result<Tape> {
        Self::check_len(self.flow.input_len(), state_feats)?;
        Ok(self.flow.forward(&self.params, state_feats))
    }

    pub fn flow_backward(&self, state_feats: &FeatureVector, tape: &Tape, dout: f64, grads: &mut [f64]) {
        self.flow.backward(&self.params, state_feats, tape, dout, grads);
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_checkpoint_json(meta)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint_json(&self, meta: &CheckpointMeta) -> Result<String> {
        if !self.all_finite() {
            return Err(Error::NonFinite("model weights".into()));
        }
        let ck = CheckpointOut {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            encoder: &self.encoder,
            hidden: &self.hidden,
            init_seed: self.init_seed,
            config_digest: &meta.config_digest,
            train_config: &meta.train_config,
            policy_weights: &self.params[self.policy.range()],
            flow_weights: &self.params[self.flow.range()],
            log_z: Sci(self.log_z()),
        };
        let mut text = serde_json::to_string_pretty(&ck)?;
        text.push('\n');
        Ok(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<(Self, CheckpointMeta)> {
        let ck: CheckpointIn = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut model = Model::zeros(ck.encoder, ck.hidden)?;
        model.init_seed = ck.init_seed;
        let (pr, fr) = (model.policy.range(), model.flow.range());
        if ck.policy_weights.len() != pr.len() {
            return Err(Error::DimMismatch {
                expected: pr.len(),
                actual: ck.policy_weights.len(),
            });
        }
        if ck.flow_weights.len() != fr.len() {
            return Err(Error::DimMismatch {
                expected: fr.len(),
                actual: ck.flow_weights.len(),
            });
        }
        model.params[pr].copy_from_slice(&ck.policy_weights);
        model.params[fr].copy_from_slice(&ck.flow_weights);
        let lz = model.log_z_index();
        model.params[lz] = ck.log_z;
        Ok((
            model,
            CheckpointMeta {
                config_digest: ck.config_digest,
                train_config: ck.train_config,
            },
        ))
    }
}

/// Deterministic scaled-uniform initialization; biases and `log Z` start at zero.
pub fn init_model(encoder: EncoderConfig, hidden: HiddenSpec, seed: u64) -> Result<Model> {
    let mut model = Model::zeros(encoder, hidden)?;
    model.init_seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = model.policy.clone();
    let flow = model.flow.clone();
    policy.init(&mut model.params, &mut rng);
    flow.init(&mut model.params, &mut rng);
    Ok(model)
}

/// Softmax with max subtraction.
pub fn policy_probs(scores: &[f64]) -> Result<Vec<f64>> {
    let logp = log_softmax(scores)?;
    Ok(logp.into_iter().map(f64::exp).collect())
}

pub fn log_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Config("softmax over an empty score list".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let lse = log_sum_exp(scores);
    Ok(scores.iter().map(|s| s - lse).collect())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub accumulation_steps: usize,
    accum: Vec<f64>,
    accum_count: usize,
}

impl OptState {
    pub fn new(model: &Model, config: AdamConfig, accumulation_steps: usize) -> Self {
        let n = model.num_params();
        OptState {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            accumulation_steps: accumulation_steps.max(1),
            accum: vec![0.0; n],
            accum_count: 0,
        }
    }

    /// Adds one micro-batch gradient. Once `accumulation_steps` have been
    /// collected, returns their mean and resets the buffer.
    pub fn accumulate(&mut self, grads: &[f64]) -> Result<Option<Vec<f64>>> {
        if grads.len() != self.accum.len() {
            return Err(Error::DimMismatch {
                expected: self.accum.len(),
                actual: grads.len(),
            });
        }
        for (a, g) in self.accum.iter_mut().zip(grads) {
            *a += g;
        }
        self.accum_count += 1;
        if self.accum_count < self.accumulation_steps {
            return Ok(None);
        }
        Ok(Some(self.take_accumulated()))
    }

    /// Mean of whatever is buffered (possibly fewer than `accumulation_steps`).
    pub fn flush(&mut self) -> Option<Vec<f64>> {
        if self.accum_count == 0 {
            return None;
        }
        Some(self.take_accumulated())
    }

    fn take_accumulated(&mut self) -> Vec<f64> {
        let scale = 1.0 / self.accum_count as f64;
        let out = self.accum.iter().map(|a| a * scale).collect();
        self.accum.iter_mut().for_each(|a| *a = 0.0);
        self.accum_count = 0;
        out
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut Model, grads: &[f64], opt: &mut OptState) -> Result<()> {
    if grads.len() != model.num_params() || opt.m.len() != model.num_params() {
        return Err(Error::DimMismatch {
            expected: model.num_params(),
            actual: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at parameter {i}")));
    }
    let c = opt.config;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, g), m), v) in model
        .params
        .iter_mut()
        .zip(grads)
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
    {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub checked: usize,
}

/// Compares analytic gradients with central differences on randomly chosen
/// parameters. Relative error is `|a − n| / max(|a| + |n|, 1e-6 · max(1, |L|))`.
pub fn grad_check<F>(model: &Model, loss_fn: F, h: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&Model) -> Result<(f64, Vec<f64>)>,
{
    let (loss, analytic) = loss_fn(model)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let floor = 1e-6 * loss.abs().max(1.0);
    let n = model.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        let mut v = sample(&mut rng, n, samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        checked: picks.len(),
    };
    for &i in &picks {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let (plus, _) = loss_fn(&probe)?;
        probe.params[i] = orig - h;
        let (minus, _) = loss_fn(&probe)?;
        probe.params[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss while probing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = i;
        }
    }
    Ok(report)
}

pub const CHECKPOINT_FORMAT: &str = "graphflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Non-weight checkpoint contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub train_config: BTreeMap<String, String>,
}

/// Float written with 17 significant digits.
struct Sci(f64);

impl Serialize for Sci {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(format!("{:.16e}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

fn ser_weights<S: Serializer>(w: &&[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(w.len()))?;
    for &x in w.iter() {
        seq.serialize_element(&Sci(x))?;
    }
    seq.end()
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format: &'a str,
    version: u32,
    encoder: &'a EncoderConfig,
    hidden: &'a HiddenSpec,
    init_seed: u64,
    config_digest: &'a str,
    train_config: &'a BTreeMap<String, String>,
    #[serde(serialize_with = "ser_weights")]
    policy_weights: &'a [f64],
    #[serde(serialize_with = "ser_weights")]
    flow_weights: &'a [f64],
    log_z: Sci,
}

#[derive(Deserialize)]
struct CheckpointIn {
    format: String,
    version: u32,
    encoder: EncoderConfig,
    hidden: HiddenSpec,
    init_seed: u64,
    #[serde(default)]
    config_digest: String,
    #[serde(default)]
    train_config: BTreeMap<String, String>,
    policy_weights: Vec<f64>,
    flow_weights: Vec<f64>,
    log_z: f64,
}
