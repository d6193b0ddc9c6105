//! Synthetic text-rich graphs with planted multi-target queries, and the
//! fixed micro-fixtures used for exact checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DenseIndex, EncoderConfig};
use crate::error::{Error, Result};
use crate::kg::{EdgeRecord, Graph, NodeRecord, Query, QuerySet, Traversal};
use crate::mdp::RewardSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_papers: usize,
    pub num_authors: usize,
    pub num_venues: usize,
    pub vocab_size: usize,
    pub tokens_per_doc: usize,
    pub num_queries: usize,
    /// Share of queries per difficulty bin; must sum to 1.
    pub bin_weights: [f64; 4],
    /// Inclusive target-count range of each bin.
    pub bin_ranges: [(usize, usize); 4],
    /// Non-target papers attached around each query's hub.
    pub decoys_per_query: usize,
    pub depth_cutoff: usize,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_papers: 200,
            num_authors: 60,
            num_venues: 12,
            vocab_size: 500,
            tokens_per_doc: 12,
            num_queries: 60,
            bin_weights: [0.25; 4],
            bin_ranges: [(1, 5), (6, 10), (11, 15), (16, 20)],
            decoys_per_query: 4,
            depth_cutoff: 3,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.num_papers, self.num_authors, self.num_venues, self.vocab_size, self.tokens_per_doc, self.num_queries]
            .contains(&0)
        {
            return bad("all synth counts must be positive".into());
        }
        let total: f64 = self.bin_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.bin_weights.iter().any(|w| *w < 0.0) {
            return bad(format!("bin weights must be non-negative and sum to 1, got {total}"));
        }
        if self.bin_ranges.iter().any(|(lo, hi)| *lo == 0 || lo > hi) {
            return bad("bin ranges must satisfy 1 <= lo <= hi".into());
        }
        if self.depth_cutoff < 2 {
            return bad("depth_cutoff must be >= 2 to plant two-hop targets".into());
        }
        self.encoder.validate()
    }

    /// Sets one `key=value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value for {key}: {v:?}")))
        };
        match key.trim() {
            "num_papers" => self.num_papers = num(v)?,
            "num_authors" => self.num_authors = num(v)?,
            "num_venues" => self.num_venues = num(v)?,
            "vocab_size" => self.vocab_size = num(v)?,
            "tokens_per_doc" => self.tokens_per_doc = num(v)?,
            "num_queries" => self.num_queries = num(v)?,
            "decoys_per_query" => self.decoys_per_query = num(v)?,
            "depth_cutoff" => self.depth_cutoff = num(v)?,
            "dim" => self.encoder.dim = num(v)?,
            "doc_cutoff" => self.encoder.doc_cutoff = num(v)?,
            "hash_seed" => self.encoder.hash_seed = num(v)? as u64,
            "seed" => self.seed = num(v)? as u64,
            "bin_weights" => {
                let ws: Vec<f64> = v
                    .split(',')
                    .map(|w| w.trim().parse().map_err(|_| Error::Config(format!("invalid bin weight {w:?}"))))
                    .collect::<Result<_>>()?;
                self.bin_weights = ws
                    .try_into()
                    .map_err(|_| Error::Config("bin_weights needs exactly 4 values".into()))?;
            }
            other => return Err(Error::Config(format!("unknown synth key {other}"))),
        }
        Ok(())
    }

    /// Queries per bin by largest remainder, ties to the lower bin.
    pub fn bin_counts(&self) -> [usize; 4] {
        let n = self.num_queries as f64;
        let mut counts = [0usize; 4];
        let mut rems = [(0.0f64, 0usize); 4];
        for b in 0..4 {
            let exact = self.bin_weights[b] * n;
            counts[b] = exact.floor() as usize;
            rems[b] = (exact - exact.floor(), b);
        }
        let mut left = self.num_queries - counts.iter().sum::<usize>();
        rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, b) in rems {
            if left == 0 {
                break;
            }
            counts[b] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedQuery {
    pub qid: String,
    pub bin: usize,
    pub seed: String,
    pub targets: Vec<String>,
    /// Shortest seed-to-target distance under bidirectional traversal.
    pub distances: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub nodes: usize,
    pub edges: usize,
    pub queries: Vec<PlantedQuery>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub graph: Graph,
    pub queries: QuerySet,
    pub manifest: Manifest,
}

impl SynthOutput {
    /// Writes `graph.jsonl`, `queries.jsonl` and `manifest.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.graph.save(dir.join("graph.jsonl"))?;
        self.queries.save(dir.join("queries.jsonl"))?;
        let m = dir.join("manifest.json");
        fs::write(&m, serde_json::to_string_pretty(&self.manifest)? + "\n").map_err(|e| Error::io(&m, e))
    }
}

struct Builder {
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

impl Builder {
    fn node(&mut self, id: String, node_type: &str, text: String) -> String {
        self.nodes.push(NodeRecord {
            id: id.clone(),
            text,
            node_type: node_type.to_string(),
        });
        id
    }

    fn edge(&mut self, src: &str, dst: &str, rel: &str) {
        self.edges.push(EdgeRecord {
            src: src.to_string(),
            dst: dst.to_string(),
            rel: rel.to_string(),
        });
    }
}

fn words(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
}

fn bfs_distances(graph: &Graph, from: &str) -> Result<Vec<Option<usize>>> {
    let start = graph.resolve(from)?;
    let mut dist = vec![None; graph.node_count()];
    dist[start.index()] = Some(0);
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u.index()].expect("queued nodes have a distance");
        for nb in graph.neighbors_of(u) {
            if dist[nb.node.index()].is_none() {
                dist[nb.node.index()] = Some(d + 1);
                queue.push_back(nb.node);
            }
        }
    }
    Ok(dist)
}

/// Generates a benchmark. Each query gets a hub node carrying its seed tokens;
/// half of its targets hang off the hub directly, the rest behind one of a few
/// intermediate nodes, interleaved with decoy papers.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = Builder {
        nodes: Vec::new(),
        edges: Vec::new(),
    };
    let t = cfg.tokens_per_doc;
    let v = cfg.vocab_size;
    let venues: Vec<String> = (0..cfg.num_venues)
        .map(|i| {
            let text = format!("venue {}", words(&mut rng, v, t).join(" "));
            b.node(format!("v{i}"), "venue", text)
        })
        .collect();
    let authors: Vec<String> = (0..cfg.num_authors)
        .map(|i| {
            let text = format!("author {}", words(&mut rng, v, t).join(" "));
            b.node(format!("a{i}"), "author", text)
        })
        .collect();
    let papers: Vec<String> = (0..cfg.num_papers)
        .map(|i| {
            let text = format!("paper {}", words(&mut rng, v, t).join(" "));
            b.node(format!("p{i}"), "paper", text)
        })
        .collect();
    for (i, p) in papers.iter().enumerate() {
        b.edge(p, &venues[rng.gen_range(0..venues.len())], "published_in");
        for _ in 0..rng.gen_range(1..=2) {
            b.edge(p, &authors[rng.gen_range(0..authors.len())], "written_by");
        }
        if i > 0 {
            b.edge(p, &papers[rng.gen_range(0..i)], "cites");
        }
    }

    let counts = cfg.bin_counts();
    let mut bins: Vec<usize> = (0..4).flat_map(|bin| std::iter::repeat(bin + 1).take(counts[bin])).collect();
    bins.shuffle(&mut rng);

    let mut planned = Vec::with_capacity(cfg.num_queries);
    for (qi, &bin) in bins.iter().enumerate() {
        let (lo, hi) = cfg.bin_ranges[bin - 1];
        let m = rng.gen_range(lo..=hi);
        let tag = format!("q{qi}");
        let seed_tok = format!("{tag}s");
        let hub_text = format!(
            "author {seed_tok} {seed_tok} {seed_tok} {}",
            words(&mut rng, v, t / 2).join(" ")
        );
        let hub = b.node(format!("{tag}_hub"), "author", hub_text);
        b.edge(&hub, &venues[rng.gen_range(0..venues.len())], "member_of");
        let direct = m.div_ceil(2);
        let hidden = m - direct;
        let n_mid = if hidden == 0 { 0 } else { hidden.div_ceil(3) };
        let mids: Vec<String> = (0..n_mid)
            .map(|j| {
                let text = format!("author {}", words(&mut rng, v, t).join(" "));
                let id = b.node(format!("{tag}_mid{j}"), "author", text);
                b.edge(&id, &hub, "coauthor");
                id
            })
            .collect();
        let mut targets = Vec::with_capacity(m);
        for j in 0..m {
            let text = format!("paper {tag}t {}", words(&mut rng, v, t).join(" "));
            let id = b.node(format!("{tag}_t{j}"), "paper", text);
            if j < direct {
                b.edge(&id, &hub, "written_by");
            } else {
                b.edge(&id, &mids[(j - direct) % n_mid], "written_by");
            }
            b.edge(&id, &venues[rng.gen_range(0..venues.len())], "published_in");
            targets.push(id);
        }
        for j in 0..cfg.decoys_per_query {
            let text = format!("paper {}", words(&mut rng, v, t).join(" "));
            let id = b.node(format!("{tag}_d{j}"), "paper", text);
            let anchor = if j % 2 == 0 || mids.is_empty() { &hub } else { &mids[j % mids.len()] };
            b.edge(&id, anchor, "written_by");
            b.edge(&id, &papers[rng.gen_range(0..papers.len())], "cites");
        }
        let text = format!("{seed_tok} {seed_tok} {seed_tok} {tag}t {}", words(&mut rng, v, 2).join(" "));
        planned.push((tag, bin, hub, targets, text));
    }

    let graph = Graph::from_records("synth", b.nodes, b.edges, Traversal::Bidirectional)?;
    let index = DenseIndex::build(&graph, &cfg.encoder);
    let mut queries = Vec::with_capacity(planned.len());
    let mut manifest_queries = Vec::with_capacity(planned.len());
    for (qi, (qid, bin, hub, targets, text)) in planned.into_iter().enumerate() {
        let top = graph.id(index.top_k(&graph, &text, 1)?[0]).to_string();
        if top != hub {
            return Err(Error::Infeasible {
                index: qi,
                reason: format!("top-1 seed is {top}, expected {hub}"),
            });
        }
        let dist = bfs_distances(&graph, &hub)?;
        let mut distances = BTreeMap::new();
        for tgt in &targets {
            let d = dist[graph.resolve(tgt)?.index()];
            match d {
                Some(d) if d <= cfg.depth_cutoff => {
                    distances.insert(tgt.clone(), d);
                }
                _ => {
                    return Err(Error::Infeasible {
                        index: qi,
                        reason: format!("target {tgt} at distance {d:?} exceeds depth_cutoff"),
                    })
                }
            }
        }
        queries.push(Query {
            qid: qid.clone(),
            text,
            targets: targets.iter().cloned().collect(),
        });
        manifest_queries.push(PlantedQuery {
            qid,
            bin,
            seed: hub,
            targets,
            distances,
        });
    }
    let queries = QuerySet::new(queries, &graph)?;
    Ok(SynthOutput {
        manifest: Manifest {
            config: cfg.clone(),
            nodes: graph.node_count(),
            edges: graph.edge_count(),
            queries: manifest_queries,
        },
        graph,
        queries,
    })
}

/// A named micro-graph with one query and the settings it is meant to be used with.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub graph: Graph,
    pub queries: QuerySet,
    pub seed: String,
    pub depth_cutoff: usize,
    pub reward: RewardSpec,
}

impl Fixture {
    pub fn query(&self) -> &Query {
        &self.queries.queries[0]
    }
}

pub const FIXTURE_NAMES: [&str; 6] = [
    "isolated",
    "chain-3",
    "diamond",
    "star-2-targets",
    "star-3-graded",
    "binary-tree-depth-2",
];

fn fixture(
    name: &'static str,
    nodes: &[(&str, &str)],
    edges: &[(&str, &str, &str)],
    traversal: Traversal,
    query: &str,
    targets: &[&str],
    depth_cutoff: usize,
    reward: RewardSpec,
) -> Fixture {
    let nodes = nodes
        .iter()
        .map(|(id, text)| NodeRecord {
            id: id.to_string(),
            text: text.to_string(),
            node_type: "entity".into(),
        })
        .collect();
    let edges = edges
        .iter()
        .map(|(s, d, r)| EdgeRecord {
            src: s.to_string(),
            dst: d.to_string(),
            rel: r.to_string(),
        })
        .collect();
    let graph = Graph::from_records(name, nodes, edges, traversal).expect("fixture graphs are valid");
    let q = Query {
        qid: format!("{name}-q0"),
        text: query.to_string(),
        targets: targets.iter().map(|t| t.to_string()).collect::<BTreeSet<_>>(),
    };
    let queries = QuerySet::new(vec![q], &graph).expect("fixture queries are valid");
    let seed = DenseIndex::build(&graph, &EncoderConfig::default())
        .top_k(&graph, query, 1)
        .map(|v| graph.id(v[0]).to_string())
        .expect("fixture graphs are non-empty");
    Fixture {
        name,
        graph,
        queries,
        seed,
        depth_cutoff,
        reward,
    }
}

/// Looks up one fixture by name.
pub fn fixture_by_name(name: &str) -> Result<Fixture> {
    fixture_suite()
        .into_iter()
        .find(|f| f.name == name)
        .ok_or_else(|| Error::Config(format!("unknown fixture {name}; known: {}", FIXTURE_NAMES.join(", "))))
}

/// The shipped micro-fixtures, each with its seed node, depth cutoff and reward.
pub fn fixture_suite() -> Vec<Fixture> {
    use Traversal::{Bidirectional, Directed};
    let table = |xs: &[(&str, f64)]| RewardSpec::Table(xs.iter().map(|(k, v)| (k.to_string(), *v)).collect());
    vec![
        fixture(
            "isolated",
            &[("solo", "solitary lonely node")],
            &[],
            Bidirectional,
            "solitary lonely",
            &["solo"],
            6,
            RewardSpec::Binary,
        ),
        fixture(
            "chain-3",
            &[("a", "chain start alpha"), ("b", "middle bravo"), ("c", "end charlie")],
            &[("a", "b", "next"), ("b", "c", "next")],
            Bidirectional,
            "alpha chain start",
            &["c"],
            2,
            RewardSpec::Binary,
        ),
        fixture(
            "diamond",
            &[("a", "diamond top alpha"), ("b", "left bravo"), ("c", "right charlie"), ("d", "bottom delta")],
            &[("a", "b", "left"), ("a", "c", "right"), ("b", "d", "down"), ("c", "d", "down")],
            Bidirectional,
            "alpha diamond top",
            &["d"],
            2,
            RewardSpec::Binary,
        ),
        fixture(
            "star-2-targets",
            &[("hub", "star hub center"), ("t1", "first target"), ("t2", "second target"), ("n", "plain leaf")],
            &[("hub", "t1", "spoke"), ("hub", "t2", "spoke"), ("hub", "n", "spoke")],
            Bidirectional,
            "star hub center",
            &["t1", "t2"],
            1,
            RewardSpec::Binary,
        ),
        fixture(
            "star-3-graded",
            &[("hub", "graded star hub"), ("l1", "leaf one"), ("l2", "leaf two"), ("l3", "leaf three")],
            &[("hub", "l1", "spoke"), ("hub", "l2", "spoke"), ("hub", "l3", "spoke")],
            Bidirectional,
            "graded star hub",
            &["l1", "l2", "l3"],
            1,
            table(&[("l1", 1.0), ("l2", 2.0), ("l3", 3.0)]),
        ),
        fixture(
            "binary-tree-depth-2",
            &[
                ("r", "tree root"),
                ("x", "left child"),
                ("y", "right child"),
                ("x1", "leaf x one"),
                ("x2", "leaf x two"),
                ("y1", "leaf y one"),
                ("y2", "leaf y two"),
            ],
            &[
                ("r", "x", "child"),
                ("r", "y", "child"),
                ("x", "x1", "child"),
                ("x", "x2", "child"),
                ("y", "y1", "child"),
                ("y", "y2", "child"),
            ],
            Directed,
            "tree root",
            &["x1", "x2", "y1", "y2"],
            2,
            RewardSpec::Binary,
        ),
    ]
}
