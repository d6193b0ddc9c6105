//! Text-attributed knowledge graphs and query sets.
//!
//! Graphs are read from JSONL where each line is either a node
//! (`{"kind":"node","id":..,"text":..,"type":..}`) or a directed edge
//! (`{"kind":"edge","src":..,"dst":..,"rel":..}`). Edges are stored in the
//! direction given, and by default are also traversable backwards under a
//! relation label carrying [`REVERSE_MARKER`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffix appended to a relation label when an edge is walked against its direction.
pub const REVERSE_MARKER: &str = "⁻¹";

/// Dense index of a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeIdx(pub u32);

impl NodeIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub text: String,
    #[serde(rename = "type", default)]
    pub node_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    pub rel: String,
}

/// One adjacency entry: the relation label and the node it leads to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Neighbor {
    pub relation: String,
    pub node: NodeIdx,
}

/// Whether edges may be walked against their stored direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Traversal {
    #[default]
    Bidirectional,
    Directed,
}

impl std::str::FromStr for Traversal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" | "both" => Ok(Traversal::Bidirectional),
            "directed" | "forward" => Ok(Traversal::Directed),
            other => Err(Error::Config(format!("unknown traversal {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    src: NodeIdx,
    dst: NodeIdx,
    rel: usize,
}

/// Immutable text-attributed multigraph.
#[derive(Debug, Clone)]
pub struct Graph {
    name: String,
    nodes: Vec<NodeRecord>,
    index: HashMap<String, NodeIdx>,
    relations: Vec<String>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<Neighbor>>,
    traversal: Traversal,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum GraphLine {
    Node(NodeRecord),
    Edge(EdgeRecord),
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum GraphLineRef<'a> {
    Node {
        id: &'a str,
        text: &'a str,
        #[serde(rename = "type")]
        node_type: &'a str,
    },
    Edge {
        src: &'a str,
        dst: &'a str,
        rel: &'a str,
    },
}

impl Graph {
    /// Builds a graph from node and edge records, checking ids and endpoints.
    pub fn from_records(
        name: impl Into<String>,
        nodes: Vec<NodeRecord>,
        edges: Vec<EdgeRecord>,
        traversal: Traversal,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id.is_empty() {
                return Err(Error::Config(format!("node at position {i} has an empty id")));
            }
            if index.insert(node.id.clone(), NodeIdx(i as u32)).is_some() {
                return Err(Error::DuplicateNode(node.id.clone()));
            }
        }
        let mut rel_ids: HashMap<String, usize> = HashMap::new();
        let mut relations = Vec::new();
        let mut stored = Vec::with_capacity(edges.len());
        for edge in edges {
            let src = *index
                .get(&edge.src)
                .ok_or_else(|| Error::UnknownNode(edge.src.clone()))?;
            let dst = *index
                .get(&edge.dst)
                .ok_or_else(|| Error::UnknownNode(edge.dst.clone()))?;
            let rel = *rel_ids.entry(edge.rel.clone()).or_insert_with(|| {
                relations.push(edge.rel.clone());
                relations.len() - 1
            });
            stored.push(Edge { src, dst, rel });
        }
        let mut graph = Graph {
            name: name.into(),
            nodes,
            index,
            relations,
            edges: stored,
            adjacency: Vec::new(),
            traversal,
        };
        graph.build_adjacency();
        Ok(graph)
    }

    fn build_adjacency(&mut self) {
        let mut adjacency: Vec<Vec<Neighbor>> = vec![Vec::new(); self.nodes.len()];
        for edge in &self.edges {
            let rel = &self.relations[edge.rel];
            adjacency[edge.src.index()].push(Neighbor {
                relation: rel.clone(),
                node: edge.dst,
            });
            if self.traversal == Traversal::Bidirectional {
                adjacency[edge.dst.index()].push(Neighbor {
                    relation: format!("{rel}{REVERSE_MARKER}"),
                    node: edge.src,
                });
            }
        }
        for list in &mut adjacency {
            list.sort_by(|a, b| {
                a.relation
                    .cmp(&b.relation)
                    .then_with(|| self.nodes[a.node.index()].id.cmp(&self.nodes[b.node.index()].id))
            });
        }
        self.adjacency = adjacency;
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn traversal(&self) -> Traversal {
        self.traversal
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of stored (directed) edges.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, idx: NodeIdx) -> &NodeRecord {
        &self.nodes[idx.index()]
    }

    pub fn id(&self, idx: NodeIdx) -> &str {
        &self.nodes[idx.index()].id
    }

    pub fn text(&self, idx: NodeIdx) -> &str {
        &self.nodes[idx.index()].text
    }

    pub fn lookup(&self, id: &str) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn resolve(&self, id: &str) -> Result<NodeIdx> {
        self.lookup(id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn indices(&self) -> impl Iterator<Item = NodeIdx> {
        (0..self.nodes.len() as u32).map(NodeIdx)
    }

    /// Adjacency of a node by index, in deterministic (relation, neighbor id) order.
    pub fn neighbors_of(&self, idx: NodeIdx) -> &[Neighbor] {
        &self.adjacency[idx.index()]
    }

    /// Adjacency of a node by id.
    pub fn neighbors(&self, id: &str) -> Result<&[Neighbor]> {
        Ok(self.neighbors_of(self.resolve(id)?))
    }

    /// Stored edges as records, in insertion order.
    pub fn edge_records(&self) -> impl Iterator<Item = EdgeRecord> + '_ {
        self.edges.iter().map(|e| EdgeRecord {
            src: self.id(e.src).to_string(),
            dst: self.id(e.dst).to_string(),
            rel: self.relations[e.rel].clone(),
        })
    }

    /// Checks structural invariants and collects document/degree statistics.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen = HashSet::new();
        for node in &self.nodes {
            if !seen.insert(node.id.as_str()) {
                report.duplicate_ids.push(node.id.clone());
            }
            if node.id.is_empty() {
                report.issues.push("node with empty id".to_string());
            }
            if node.text.is_empty() {
                report.empty_documents += 1;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if self.index.get(&node.id) != Some(&NodeIdx(i as u32)) && !report.duplicate_ids.contains(&node.id) {
                report.issues.push(format!("index entry for {} is stale", node.id));
            }
        }
        if self.adjacency.len() != self.nodes.len() {
            report.issues.push(format!(
                "adjacency covers {} nodes, graph has {}",
                self.adjacency.len(),
                self.nodes.len()
            ));
        }
        let mut degrees = Vec::with_capacity(self.adjacency.len());
        for (i, list) in self.adjacency.iter().enumerate() {
            degrees.push(list.len());
            for nb in list {
                if nb.node.index() >= self.nodes.len() {
                    report.dangling.push(format!("{} -> #{}", self.label(i), nb.node.0));
                }
            }
            let sorted = list.windows(2).all(|w| {
                match (self.nodes.get(w[0].node.index()), self.nodes.get(w[1].node.index())) {
                    (Some(a), Some(b)) => (&w[0].relation, &a.id) <= (&w[1].relation, &b.id),
                    _ => true,
                }
            });
            if !sorted {
                report.issues.push(format!("adjacency of {} is not sorted", self.label(i)));
            }
        }
        for edge in &self.edges {
            if edge.src.index() >= self.nodes.len() || edge.dst.index() >= self.nodes.len() {
                report.dangling.push(format!("edge #{} -> #{}", edge.src.0, edge.dst.0));
            }
        }
        let total_entries: usize = degrees.iter().sum();
        let expected = match self.traversal {
            Traversal::Bidirectional => 2 * self.edges.len(),
            Traversal::Directed => self.edges.len(),
        };
        if total_entries != expected {
            report.issues.push(format!(
                "adjacency holds {total_entries} entries, edges imply {expected}"
            ));
        }
        report.degree = DegreeStats::from_degrees(&degrees);
        report.warnings = report.empty_documents;
        report.valid =
            report.dangling.is_empty() && report.duplicate_ids.is_empty() && report.issues.is_empty();
        report
    }

    fn label(&self, i: usize) -> String {
        self.nodes
            .get(i)
            .map(|n| n.id.clone())
            .unwrap_or_else(|| format!("#{i}"))
    }

    /// Writes the graph as JSONL: all nodes, then all stored edges.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_jsonl(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for node in &self.nodes {
            let line = GraphLineRef::Node {
                id: &node.id,
                text: &node.text,
                node_type: &node.node_type,
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        for edge in &self.edges {
            let line = GraphLineRef::Edge {
                src: self.id(edge.src),
                dst: self.id(edge.dst),
                rel: &self.relations[edge.rel],
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loads a graph with bidirectional traversal.
pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    load_graph_with(path, Traversal::Bidirectional)
}

pub fn load_graph_with(path: impl AsRef<Path>, traversal: Traversal) -> Result<Graph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_graph(BufReader::new(file), name, traversal).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_graph<R: BufRead>(reader: R, name: String, traversal: Traversal) -> Result<Graph> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<graph>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GraphLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            GraphLine::Node(n) => nodes.push(n),
            GraphLine::Edge(e) => edges.push(e),
        }
    }
    Graph::from_records(name, nodes, edges, traversal)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DegreeStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub isolated: usize,
}

impl DegreeStats {
    fn from_degrees(degrees: &[usize]) -> Self {
        if degrees.is_empty() {
            return Self::default();
        }
        DegreeStats {
            min: degrees.iter().copied().min().unwrap_or(0),
            max: degrees.iter().copied().max().unwrap_or(0),
            mean: degrees.iter().sum::<usize>() as f64 / degrees.len() as f64,
            isolated: degrees.iter().filter(|&&d| d == 0).count(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub dangling: Vec<String>,
    pub duplicate_ids: Vec<String>,
    pub issues: Vec<String>,
    pub empty_documents: usize,
    pub warnings: usize,
    pub degree: DegreeStats,
}

impl ValidationReport {
    pub fn issue_count(&self) -> usize {
        self.dangling.len() + self.duplicate_ids.len() + self.issues.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub qid: String,
    pub text: String,
    pub targets: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    /// Validates queries against a graph: unique qids, non-empty and known targets.
    pub fn new(queries: Vec<Query>, graph: &Graph) -> Result<Self> {
        let set = Self::standalone(queries)?;
        for q in &set.queries {
            if let Some(t) = q.targets.iter().find(|t| graph.lookup(t).is_none()) {
                return Err(Error::UnknownTarget {
                    qid: q.qid.clone(),
                    target: t.clone(),
                });
            }
        }
        Ok(set)
    }

    /// Checks qid uniqueness and non-empty targets without a graph.
    pub fn standalone(queries: Vec<Query>) -> Result<Self> {
        let mut qids = HashSet::new();
        for q in &queries {
            if !qids.insert(q.qid.as_str()) {
                return Err(Error::DuplicateQid(q.qid.clone()));
            }
            if q.targets.is_empty() {
                return Err(Error::EmptyTargets(q.qid.clone()));
            }
        }
        Ok(QuerySet { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn get(&self, qid: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.qid == qid)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.queries.iter()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_jsonl(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for q in &self.queries {
            serde_json::to_writer(&mut *out, q)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct QueryLine {
    qid: String,
    text: String,
    targets: Vec<String>,
}

pub fn load_queries(path: impl AsRef<Path>, graph: &Graph) -> Result<QuerySet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_queries(BufReader::new(file), graph)
}

pub fn parse_queries<R: BufRead>(reader: R, graph: &Graph) -> Result<QuerySet> {
    QuerySet::new(parse_query_lines(reader)?, graph)
}

/// Loads queries without checking targets against a graph.
pub fn load_queries_standalone(path: impl AsRef<Path>) -> Result<QuerySet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    QuerySet::standalone(parse_query_lines(BufReader::new(file))?)
}

fn parse_query_lines<R: BufRead>(reader: R) -> Result<Vec<Query>> {
    let mut queries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<queries>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        queries.push(Query {
            qid: q.qid,
            text: q.text,
            targets: q.targets.into_iter().collect(),
        });
    }
    Ok(queries)
}
