//! Heterogeneous user / sub-forum / thread / post graphs, meta-path guided
//! random walks and a type-aware skip-gram for context initialization.

mod skipgram;

pub use skipgram::{node_embedding, read_embeddings, train_skipgram, SkipgramConfig, SkipgramModel};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Corpus;

#[derive(Debug, Error)]
pub enum MetapathError {
    #[error("no relation between node types {0} and {1}")]
    InvalidEdge(NodeType, NodeType),
    #[error("invalid meta-path {path:?}: {reason}")]
    InvalidMetaPath { path: String, reason: String },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("walk corpus is empty")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetapathError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeType {
    /// User.
    U,
    /// Sub-forum.
    S,
    /// Thread.
    T,
    /// Post.
    P,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [NodeType::U, NodeType::S, NodeType::T, NodeType::P];

    fn index(self) -> usize {
        self as usize
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'U' => Some(Self::U),
            'S' => Some(Self::S),
            'T' => Some(Self::T),
            'P' => Some(Self::P),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Self::U => 'U',
            Self::S => 'S',
            Self::T => 'T',
            Self::P => 'P',
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for NodeType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut chars = s.chars();
        match (chars.next().and_then(Self::from_char), chars.next()) {
            (Some(t), None) => Ok(t),
            _ => Err(format!("unknown node type {s:?}")),
        }
    }
}

/// Edge relations of the schema: U–T (starts thread), U–P (replies),
/// P–T (post in thread), T–S (thread in sub-forum).
pub fn relation_allowed(a: NodeType, b: NodeType) -> bool {
    use NodeType::*;
    matches!((a, b), (U, T) | (T, U) | (U, P) | (P, U) | (P, T) | (T, P) | (T, S) | (S, T))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeKey {
    pub id: String,
    pub kind: NodeType,
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.id, self.kind)
    }
}

/// Undirected typed graph with neighbor lists grouped by neighbor type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeteroGraph {
    nodes: Vec<NodeKey>,
    index: HashMap<NodeKey, usize>,
    adjacency: Vec<[Vec<usize>; 4]>,
    edges: usize,
}

impl HeteroGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the node's index, inserting it if new.
    pub fn add_node(&mut self, id: &str, kind: NodeType) -> usize {
        let key = NodeKey {
            id: id.to_string(),
            kind,
        };
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(key.clone());
        self.index.insert(key, i);
        self.adjacency.push(Default::default());
        i
    }

    /// Adds an undirected edge; duplicate edges are kept once.
    pub fn add_edge(&mut self, a: (&str, NodeType), b: (&str, NodeType)) -> Result<()> {
        if !relation_allowed(a.1, b.1) {
            return Err(MetapathError::InvalidEdge(a.1, b.1));
        }
        let (i, j) = (self.add_node(a.0, a.1), self.add_node(b.0, b.1));
        if !self.adjacency[i][b.1.index()].contains(&j) {
            self.adjacency[i][b.1.index()].push(j);
            self.adjacency[j][a.1.index()].push(i);
            self.edges += 1;
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    pub fn node(&self, i: usize) -> &NodeKey {
        &self.nodes[i]
    }

    pub fn node_type(&self, i: usize) -> NodeType {
        self.nodes[i].kind
    }

    pub fn node_types(&self) -> Vec<NodeType> {
        self.nodes.iter().map(|n| n.kind).collect()
    }

    pub fn find(&self, id: &str, kind: NodeType) -> Option<usize> {
        self.index
            .get(&NodeKey {
                id: id.to_string(),
                kind,
            })
            .copied()
    }

    pub fn neighbors(&self, i: usize, kind: NodeType) -> &[usize] {
        &self.adjacency[i][kind.index()]
    }

    /// `|T_V| + |T_E| > 2`.
    pub fn is_heterogeneous(&self) -> bool {
        let mut node_types = [false; 4];
        let mut edge_types = std::collections::BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            node_types[n.kind.index()] = true;
            for t in NodeType::ALL {
                if !self.adjacency[i][t.index()].is_empty() {
                    edge_types.insert((n.kind.min(t), n.kind.max(t)));
                }
            }
        }
        node_types.iter().filter(|&&b| b).count() + edge_types.len() > 2
    }

    /// User, thread, post and sub-forum graph of a corpus. Post nodes are
    /// keyed by their index in the corpus; the earliest post of a thread
    /// makes its author the thread starter.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let mut g = Self::new();
        let mut first: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, p) in corpus.posts().iter().enumerate() {
            let e = first.entry(p.thread.as_str()).or_insert(i);
            let cur = &corpus.posts()[*e];
            if (p.timestamp, i) < (cur.timestamp, *e) {
                *e = i;
            }
        }
        for (i, p) in corpus.posts().iter().enumerate() {
            let post = format!("p{i}");
            let thread = format!("{}/{}", p.subforum, p.thread);
            g.add_edge((&post, NodeType::P), (&thread, NodeType::T))?;
            g.add_edge((&thread, NodeType::T), (&p.subforum, NodeType::S))?;
            if first[p.thread.as_str()] == i {
                g.add_edge((&p.author, NodeType::U), (&thread, NodeType::T))?;
            } else {
                g.add_edge((&p.author, NodeType::U), (&post, NodeType::P))?;
            }
        }
        Ok(g)
    }

    /// Parses `src_id src_type dst_id dst_type` lines; `#` starts a comment.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut g = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |reason: String| MetapathError::Parse { line: n + 1, reason };
            if cols.len() != 4 {
                return Err(parse_err(format!("expected 4 columns, got {}", cols.len())));
            }
            let ta: NodeType = cols[1].parse().map_err(parse_err)?;
            let tb: NodeType = cols[3].parse().map_err(parse_err)?;
            g.add_edge((cols[0], ta), (cols[2], tb))?;
        }
        Ok(g)
    }

    pub fn read_edge_list(path: &Path) -> Result<Self> {
        Self::parse_edge_list(&fs::read_to_string(path)?)
    }

    /// Each undirected edge once, from the lower node index.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, adj) in self.adjacency.iter().enumerate() {
            for &j in adj.iter().flatten() {
                if i < j {
                    out.push_str(&format!("{} {}\n", self.nodes[i], self.nodes[j]));
                }
            }
        }
        out
    }
}

/// A node-type sequence that walks must follow exactly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MetaPath(Vec<NodeType>);

impl MetaPath {
    pub fn parse(s: &str) -> Result<Self> {
        let err = |reason: &str| MetapathError::InvalidMetaPath {
            path: s.to_string(),
            reason: reason.to_string(),
        };
        let types = s
            .chars()
            .map(|c| NodeType::from_char(c).ok_or_else(|| err("unknown node type")))
            .collect::<Result<Vec<_>>>()?;
        if types.len() < 2 {
            return Err(err("needs at least two node types"));
        }
        if types[0] != NodeType::U || types[types.len() - 1] != NodeType::U {
            return Err(err("must start and end with U"));
        }
        if types.windows(2).any(|w| !relation_allowed(w[0], w[1])) {
            return Err(err("consecutive types without a relation"));
        }
        Ok(Self(types))
    }

    pub fn types(&self) -> &[NodeType] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn matches(&self, graph: &HeteroGraph, walk: &[usize]) -> bool {
        walk.len() == self.0.len() && walk.iter().zip(&self.0).all(|(&v, &t)| graph.node_type(v) == t)
    }

    pub fn defaults() -> Vec<Self> {
        ["UPTSTPU", "UTSTPU", "UPTSTU", "UTSTU", "UPTPU", "UPTU", "UTPU"]
            .iter()
            .map(|p| Self::parse(p).expect("valid built-in path"))
            .collect()
    }
}

impl fmt::Display for MetaPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|t| write!(f, "{t}"))
    }
}

/// Walks over node indices plus the node types needed for typed sampling.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WalkCorpus {
    pub walks: Vec<Vec<usize>>,
    pub node_types: Vec<NodeType>,
}

/// One traversal of the meta-path from `start`, or `None` when some step has
/// no neighbor of the required type.
fn walk_once<R: Rng>(graph: &HeteroGraph, path: &MetaPath, start: usize, rng: &mut R) -> Option<Vec<usize>> {
    let mut walk = Vec::with_capacity(path.len());
    walk.push(start);
    let mut cur = start;
    for &next_type in &path.types()[1..] {
        let options = graph.neighbors(cur, next_type);
        if options.is_empty() {
            return None;
        }
        cur = options[rng.random_range(0..options.len())];
        walk.push(cur);
    }
    Some(walk)
}

/// Up to `walks_per_node` walks per user node and meta-path. Each start node
/// has its own seeded stream, so the result is independent of thread count.
pub fn generate_walks(graph: &HeteroGraph, metapaths: &[MetaPath], walks_per_node: usize, seed: u64) -> Result<WalkCorpus> {
    if graph.node_count() == 0 {
        return Err(MetapathError::EmptyGraph);
    }
    let users: Vec<usize> = (0..graph.node_count()).filter(|&i| graph.node_type(i) == NodeType::U).collect();
    let walks = users
        .par_iter()
        .flat_map_iter(|&u| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u as u64);
            let mut out = Vec::new();
            for path in metapaths {
                for _ in 0..walks_per_node {
                    if let Some(w) = walk_once(graph, path, u, &mut rng) {
                        out.push(w);
                    }
                }
            }
            out
        })
        .collect();
    Ok(WalkCorpus {
        walks,
        node_types: graph.node_types(),
    })
}

/// Rows of `E_ctx` for `subforums`, taken from the trained sub-forum nodes.
/// Sub-forums absent from the graph are an error.
pub fn context_rows(graph: &HeteroGraph, model: &SkipgramModel, subforums: &[String]) -> Result<Vec<Vec<f64>>> {
    subforums
        .iter()
        .map(|s| {
            let i = graph
                .find(s, NodeType::S)
                .ok_or_else(|| MetapathError::UnknownNode(format!("{s} S")))?;
            node_embedding(model, i)
        })
        .collect()
}

/// Lines of `id type v1 v2 …`, one per node.
pub fn embeddings_to_text(graph: &HeteroGraph, model: &SkipgramModel) -> String {
    let mut out = String::new();
    for i in 0..graph.node_count() {
        out.push_str(&graph.node(i).to_string());
        for v in model.center.row(i) {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings(path: &Path, graph: &HeteroGraph, model: &SkipgramModel) -> Result<()> {
    fs::write(path, embeddings_to_text(graph, model))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use NodeType::*;

    #[test]
    fn schema_rejects_other_edges() {
        let mut g = HeteroGraph::new();
        assert!(matches!(g.add_edge(("a", U), ("b", S)), Err(MetapathError::InvalidEdge(U, S))));
        assert!(g.add_edge(("a", U), ("t", T)).is_ok());
    }

    #[test]
    fn metapath_validation() {
        assert_eq!(MetaPath::defaults().len(), 7);
        assert!(MetaPath::parse("UPTU").is_ok());
        assert!(MetaPath::parse("UPSU").is_err());
        assert!(MetaPath::parse("PTU").is_err());
        assert!(MetaPath::parse("UXU").is_err());
        assert_eq!(MetaPath::parse("UTSTU").unwrap().to_string(), "UTSTU");
    }

    #[test]
    fn duplicate_edges_collapse() {
        let mut g = HeteroGraph::new();
        g.add_edge(("a", U), ("t", T)).unwrap();
        g.add_edge(("t", T), ("a", U)).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbors(0, T), &[1]);
    }

    #[test]
    fn heterogeneity_condition() {
        let mut g = HeteroGraph::new();
        g.add_edge(("a", U), ("t", T)).unwrap();
        assert!(g.is_heterogeneous());
        let mut h = HeteroGraph::new();
        h.add_node("a", U);
        assert!(!h.is_heterogeneous());
    }

    #[test]
    fn edge_list_round_trips() {
        let text = "u1 U t1 T\np1 P t1 T\nt1 T s1 S\nu2 U p1 P\n";
        let g = HeteroGraph::parse_edge_list(text).unwrap();
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.edge_count(), 4);
        let again = HeteroGraph::parse_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(again.edge_count(), 4);
        assert!(HeteroGraph::parse_edge_list("u1 U t1").is_err());
        assert!(HeteroGraph::parse_edge_list("u1 U s1 S").is_err());
    }
}
