//! Deterministic text featurization.
//!
//! Text is embedded with signed feature hashing over word n-grams. On top of
//! the raw embedding this module builds the dense-similarity baseline, seed
//! node selection, and the fixed-layout state/action feature vectors consumed
//! by the policy and flow heads.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Graph, NodeIdx};
use crate::mdp::{Action, State};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub ngram_orders: Vec<usize>,
    pub doc_cutoff: usize,
    pub window_size: usize,
    pub hash_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 1024,
            ngram_orders: vec![1, 2],
            doc_cutoff: 400,
            window_size: 3,
            hash_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn with_orders(mut self, orders: &[usize]) -> Self {
        self.ngram_orders = orders.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!("dim must be >= 8, got {}", self.dim)));
        }
        if self.doc_cutoff == 0 {
            return Err(Error::Config("doc_cutoff must be >= 1".into()));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be >= 1".into()));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return Err(Error::Config("ngram_orders must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Orders sorted and deduplicated; hashing iterates them in this order.
    fn orders(&self) -> Vec<usize> {
        let mut o = self.ngram_orders.clone();
        o.sort_unstable();
        o.dedup();
        o
    }

    pub fn state_len(&self) -> usize {
        2 * self.dim + 1
    }

    pub fn action_len(&self) -> usize {
        4 * self.dim + 2
    }
}

/// A dense text embedding, either all-zero or of unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Embedding {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Seeded 64-bit FNV-1a: the seed's little-endian bytes are hashed first.
pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Bucket and sign assigned to an n-gram. N-grams are joined with a single space.
pub fn hash_ngram(ngram: &[String], cfg: &EncoderConfig) -> (usize, f64) {
    let joined = ngram.join(" ");
    let h = fnv1a64(cfg.hash_seed, joined.as_bytes());
    let bucket = (h % cfg.dim as u64) as usize;
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    (bucket, sign)
}

/// Embeds an already tokenized sequence without truncation.
pub fn embed_tokens(tokens: &[String], cfg: &EncoderConfig) -> Embedding {
    let mut values = vec![0.0; cfg.dim];
    for n in cfg.orders() {
        for gram in tokens.windows(n) {
            let (bucket, sign) = hash_ngram(gram, cfg);
            values[bucket] += sign;
        }
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    Embedding { values }
}

/// Embeds text, keeping at most `doc_cutoff` tokens.
pub fn embed(text: &str, cfg: &EncoderConfig) -> Embedding {
    let mut tokens = tokenize(text);
    tokens.truncate(cfg.doc_cutoff);
    embed_tokens(&tokens, cfg)
}

/// Cosine similarity; zero whenever either side is the zero vector.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pluggable text encoder. Implementations must be pure functions of their input.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Embedding;

    /// Embeds an ordered sequence of documents as one text, each document
    /// truncated on its own before concatenation.
    fn embed_history(&self, docs: &[&str]) -> Embedding;
}

#[derive(Debug, Clone)]
pub struct HashingEncoder {
    cfg: EncoderConfig,
}

impl HashingEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(HashingEncoder { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed(&self, text: &str) -> Embedding {
        embed(text, &self.cfg)
    }

    fn embed_history(&self, docs: &[&str]) -> Embedding {
        let mut tokens = Vec::new();
        for doc in docs {
            let mut t = tokenize(doc);
            t.truncate(self.cfg.doc_cutoff);
            tokens.extend(t);
        }
        embed_tokens(&tokens, &self.cfg)
    }
}

/// Precomputed node embeddings for similarity search.
#[derive(Debug, Clone)]
pub struct DenseIndex {
    cfg: EncoderConfig,
    embeddings: Vec<Embedding>,
}

impl DenseIndex {
    pub fn build(graph: &Graph, cfg: &EncoderConfig) -> Self {
        DenseIndex {
            cfg: cfg.clone(),
            embeddings: graph.nodes().iter().map(|n| embed(&n.text, cfg)).collect(),
        }
    }

    pub fn embedding(&self, node: NodeIdx) -> &Embedding {
        &self.embeddings[node.index()]
    }

    /// All nodes ordered by descending cosine to the query, ties by node id.
    pub fn rank_all(&self, graph: &Graph, query: &str) -> Result<Vec<(NodeIdx, f64)>> {
        if graph.node_count() == 0 {
            return Err(Error::EmptyGraph);
        }
        let q = embed(query, &self.cfg);
        let mut scored = Vec::with_capacity(self.embeddings.len());
        for (i, e) in self.embeddings.iter().enumerate() {
            scored.push((NodeIdx(i as u32), cosine(&q, e)?));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| graph.id(a.0).cmp(graph.id(b.0)))
        });
        Ok(scored)
    }

    pub fn top_k(&self, graph: &Graph, query: &str, k: usize) -> Result<Vec<NodeIdx>> {
        if k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        let mut ranked = self.rank_all(graph, query)?;
        ranked.truncate(k);
        Ok(ranked.into_iter().map(|(n, _)| n).collect())
    }
}

/// Nodes ranked by query similarity; the first entry is the retrieval start node.
pub fn seed_nodes(query: &str, graph: &Graph, top_k: usize, cfg: &EncoderConfig) -> Result<Vec<String>> {
    let idx = DenseIndex::build(graph, cfg);
    Ok(idx
        .top_k(graph, query, top_k)?
        .into_iter()
        .map(|n| graph.id(n).to_string())
        .collect())
}

/// Dense-retriever baseline: the `k` most similar nodes.
pub fn dense_retrieve(query: &str, graph: &Graph, k: usize, cfg: &EncoderConfig) -> Result<Vec<String>> {
    seed_nodes(query, graph, k, cfg)
}

/// Sparse feature vector of fixed logical length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    len: usize,
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl FeatureVector {
    pub fn from_dense(values: &[f64]) -> Self {
        let mut fv = FeatureVector {
            len: values.len(),
            ..Default::default()
        };
        for (i, &v) in values.iter().enumerate() {
            if v != 0.0 {
                fv.idx.push(i as u32);
                fv.val.push(v);
            }
        }
        fv
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    /// Non-zero entries as (index, value) in ascending index order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| (i as usize, v))
    }

    pub fn get(&self, i: usize) -> f64 {
        match self.idx.binary_search(&(i as u32)) {
            Ok(p) => self.val[p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (i, v) in self.entries() {
            out[i] = v;
        }
        out
    }

    /// Slice `[start, start+len)` as a dense vector.
    pub fn block(&self, start: usize, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (i, v) in self.entries() {
            if i >= start && i < start + len {
                out[i - start] = v;
            }
        }
        out
    }

    fn push_block(&mut self, values: &[f64]) {
        for (i, &v) in values.iter().enumerate() {
            if v != 0.0 {
                self.idx.push((self.len + i) as u32);
                self.val.push(v);
            }
        }
        self.len += values.len();
    }

    fn extend(&mut self, other: &FeatureVector) {
        for (i, v) in other.entries() {
            self.idx.push((self.len + i) as u32);
            self.val.push(v);
        }
        self.len += other.len;
    }
}

/// Builds state and action features over one graph.
///
/// State layout: `query ⊕ history ⊕ [depth / depth_cutoff]` (length `2·dim+1`).
/// Action layout: `state ⊕ candidate doc ⊕ relation ⊕ [is_stop]` (length `4·dim+2`).
pub struct Featurizer<'g> {
    graph: &'g Graph,
    encoder: HashingEncoder,
    depth_cutoff: usize,
    node_embeddings: Vec<Embedding>,
    relation_embeddings: HashMap<String, Embedding>,
}

impl<'g> Featurizer<'g> {
    pub fn new(graph: &'g Graph, cfg: &EncoderConfig, depth_cutoff: usize) -> Result<Self> {
        let encoder = HashingEncoder::new(cfg.clone())?;
        if depth_cutoff == 0 {
            return Err(Error::Config("depth_cutoff must be >= 1".into()));
        }
        let node_embeddings = graph.nodes().iter().map(|n| encoder.embed(&n.text)).collect();
        let mut relation_embeddings = HashMap::new();
        for node in graph.indices() {
            for nb in graph.neighbors_of(node) {
                relation_embeddings
                    .entry(nb.relation.clone())
                    .or_insert_with(|| encoder.embed(&nb.relation));
            }
        }
        Ok(Featurizer {
            graph,
            encoder,
            depth_cutoff,
            node_embeddings,
            relation_embeddings,
        })
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn depth_cutoff(&self) -> usize {
        self.depth_cutoff
    }

    pub fn state_len(&self) -> usize {
        self.config().state_len()
    }

    pub fn action_len(&self) -> usize {
        self.config().action_len()
    }

    pub fn state(&self, state: &State) -> FeatureVector {
        let window = self.config().window_size;
        let start = state.path.len().saturating_sub(window);
        let docs: Vec<&str> = state.path[start..].iter().map(|&n| self.graph.text(n)).collect();
        let mut fv = FeatureVector::default();
        fv.push_block(&self.encoder.embed(&state.query_text).values);
        fv.push_block(&self.encoder.embed_history(&docs).values);
        fv.push_block(&[state.depth() as f64 / self.depth_cutoff as f64]);
        fv
    }

    /// Action features given precomputed state features.
    pub fn action_with(&self, state_feats: &FeatureVector, state: &State, action: &Action) -> FeatureVector {
        let dim = self.config().dim;
        let mut fv = state_feats.clone();
        match action {
            Action::Stop => {
                fv.push_block(&self.node_embeddings[state.current().index()].values);
                fv.push_block(&vec![0.0; dim]);
                fv.push_block(&[1.0]);
            }
            Action::Move { relation, target } => {
                fv.push_block(&self.node_embeddings[target.index()].values);
                match self.relation_embeddings.get(relation) {
                    Some(e) => fv.push_block(&e.values),
                    None => fv.push_block(&self.encoder.embed(relation).values),
                }
                fv.push_block(&[0.0]);
            }
        }
        fv
    }

    /// Action features; errors if the action is not a candidate at `state`.
    pub fn action(&self, state: &State, action: &Action) -> Result<FeatureVector> {
        let candidates = crate::mdp::candidate_actions(self.graph, state, self.depth_cutoff)?;
        if !candidates.contains(action) {
            return Err(Error::IllegalAction(format!("{action:?} at {:?}", state.path)));
        }
        Ok(self.action_with(&self.state(state), state, action))
    }

    /// Concatenates two sparse vectors; used to assemble custom layouts in tests and tools.
    pub fn concat(a: &FeatureVector, b: &FeatureVector) -> FeatureVector {
        let mut out = a.clone();
        out.extend(b);
        out
    }
}
