//! Graph-to-text serialization, word-level tokenization and the per-token
//! segment map consumed by the local block and the pooling layer.

mod vocab;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, TaskQuery};

pub use vocab::{
    detokenize, normalize, split_words, tokenize, Owner, Span, SpanKind, TokenizedSample,
    Vocabulary, NUM_NODE_TOKENS, PAD, UNK,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TextError {
    #[error("unknown dialect `{0}` (expected cgdl, adjlist or edges)")]
    UnknownDialect(String),
    #[error("node {node} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("node order must list each of the {num_nodes} nodes exactly once")]
    BadOrder { num_nodes: usize },
    #[error("expected {expected} node names, got {found}")]
    NameCount { expected: usize, found: usize },
    #[error("invalid node name `{0}`: names must be unique single alphanumeric words")]
    BadName(String),
    #[error("sequence needs {required} positions but at most {max} are allowed")]
    TooLong { required: usize, max: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid vocabulary: {0}")]
    BadVocabulary(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    /// "Node 0 is connected to nodes 1 and 2."
    #[default]
    Cgdl,
    /// "0: [1, 2]"
    AdjList,
    /// "(0, 1) (0, 2)"
    Edges,
}

impl Dialect {
    pub const ALL: [Dialect; 3] = [Dialect::Cgdl, Dialect::AdjList, Dialect::Edges];

    pub fn name(self) -> &'static str {
        match self {
            Dialect::Cgdl => "cgdl",
            Dialect::AdjList => "adjlist",
            Dialect::Edges => "edges",
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dialect {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cgdl" => Ok(Dialect::Cgdl),
            "adjlist" => Ok(Dialect::AdjList),
            "edges" => Ok(Dialect::Edges),
            _ => Err(TextError::UnknownDialect(s.to_string())),
        }
    }
}

/// How node indices are rendered.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum NamePolicy {
    /// Node `i` is written as the decimal string of `i`.
    #[default]
    Canonical,
    /// Unique random alphanumeric strings of 1 to 4 characters.
    RandomString { seed: u64 },
    Explicit(Vec<String>),
}

/// Words used by the templates; random names never collide with them.
const TEMPLATE_WORDS: &[&str] = &[
    "node", "nodes", "is", "connected", "to", "nothing", "and", "with", "features", "none",
    "what", "the", "shortest", "distance", "between", "graph", "cyclic", "total", "number", "of",
    "edges", "in", "are", "reachable", "from", "each", "other", "does", "an", "edge", "exist",
    "how", "many", "components", "does", "have", "degree", "a",
];

/// `n` distinct random names of length 1..=4 over `[A-Za-z0-9]`, excluding
/// purely numeric strings and template words.
pub fn random_names(n: usize, seed: u64) -> Vec<String> {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(1..=4);
        let name: String = (0..len)
            .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
            .collect();
        if name.bytes().all(|b| b.is_ascii_digit())
            || TEMPLATE_WORDS.contains(&name.to_ascii_lowercase().as_str())
        {
            continue;
        }
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

impl NamePolicy {
    pub fn resolve(&self, n: usize) -> Result<Vec<String>, TextError> {
        match self {
            NamePolicy::Canonical => Ok((0..n).map(|i| i.to_string()).collect()),
            NamePolicy::RandomString { seed } => Ok(random_names(n, *seed)),
            NamePolicy::Explicit(names) => {
                if names.len() != n {
                    return Err(TextError::NameCount {
                        expected: n,
                        found: names.len(),
                    });
                }
                let mut seen = HashSet::new();
                for name in names {
                    let word = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric());
                    if !word || !seen.insert(name.as_str()) {
                        return Err(TextError::BadName(name.clone()));
                    }
                }
                Ok(names.clone())
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SerializeOptions {
    pub dialect: Dialect,
    pub names: NamePolicy,
    /// Order in which node annotations are emitted; ascending by default.
    pub order: Option<Vec<usize>>,
    /// Restrict the text to the subgraph induced by these nodes.
    pub keep: Option<BTreeSet<usize>>,
}

impl SerializeOptions {
    pub fn new(dialect: Dialect) -> Self {
        Self {
            dialect,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAnnotation {
    pub node: usize,
    pub structure: String,
    pub feature: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedSample {
    /// Annotations in emission order.
    pub nodes: Vec<NodeAnnotation>,
    pub query: String,
    pub dialect: Dialect,
    /// Display token of every graph node, indexed by node.
    pub names: Vec<String>,
}

impl SerializedSample {
    /// Text spans in sequence order: per node its structure then feature
    /// annotation, and the query last.
    pub fn spans(&self) -> Vec<(Owner, SpanKind, &str)> {
        let mut out = Vec::with_capacity(2 * self.nodes.len() + 1);
        for a in &self.nodes {
            out.push((Owner::Node(a.node), SpanKind::Structure, a.structure.as_str()));
            if let Some(f) = &a.feature {
                out.push((Owner::Node(a.node), SpanKind::Feature, f.as_str()));
            }
        }
        out.push((Owner::Query, SpanKind::Query, self.query.as_str()));
        out
    }

    pub fn text(&self) -> String {
        self.spans()
            .iter()
            .map(|s| s.2)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// "a", "a and b", "a, b, and c"
fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [a] => a.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

fn structure_text(
    g: &Graph,
    node: usize,
    neighbors: &[usize],
    names: &[String],
    dialect: Dialect,
) -> String {
    let name = &names[node];
    match dialect {
        Dialect::Cgdl => {
            if neighbors.is_empty() {
                return format!("Node {name} is connected to nothing.");
            }
            let items: Vec<String> = neighbors
                .iter()
                .map(|&j| match g.edge_feature(node, j) {
                    Some(f) => format!("{} with {f}", names[j]),
                    None => names[j].clone(),
                })
                .collect();
            let noun = if neighbors.len() == 1 { "node" } else { "nodes" };
            format!("Node {name} is connected to {noun} {}.", join_list(&items))
        }
        Dialect::AdjList => {
            let items: Vec<&str> = neighbors.iter().map(|&j| names[j].as_str()).collect();
            format!("{name}: [{}]", items.join(", "))
        }
        Dialect::Edges => {
            if neighbors.is_empty() {
                return format!("({name})");
            }
            neighbors
                .iter()
                .map(|&j| format!("({name}, {})", names[j]))
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

fn feature_text(g: &Graph, node: usize, names: &[String]) -> Option<String> {
    if !g.has_node_features() {
        return None;
    }
    let pairs = g.node_features(node).unwrap_or(&[]);
    let body = if pairs.is_empty() {
        "none".to_string()
    } else {
        pairs
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join("; ")
    };
    Some(format!("Node {} features: {body}.", names[node]))
}

/// Natural-language rendering of a task query.
pub fn query_text(query: &TaskQuery, names: &[String]) -> String {
    match *query {
        TaskQuery::ShortestDistance { u, v } => format!(
            "What is the shortest distance between nodes {} and {}?",
            names[u], names[v]
        ),
        TaskQuery::Cycle => "Is the graph cyclic?".to_string(),
        TaskQuery::EdgeCount => "What is the total number of edges in the graph?".to_string(),
        TaskQuery::Reachable { u, v } => format!(
            "Are nodes {} and {} reachable from each other?",
            names[u], names[v]
        ),
        TaskQuery::EdgeExistence { u, v } => format!(
            "Does an edge exist between nodes {} and {}?",
            names[u], names[v]
        ),
        TaskQuery::Components => "How many connected components does the graph have?".to_string(),
        TaskQuery::NodeDegree { node } => format!("What is the degree of node {}?", names[node]),
    }
}

pub fn serialize(
    g: &Graph,
    query: &TaskQuery,
    opts: &SerializeOptions,
) -> Result<SerializedSample, TextError> {
    let n = g.num_nodes();
    let check = |node: usize| {
        if node >= n {
            Err(TextError::NodeOutOfRange { node, num_nodes: n })
        } else {
            Ok(())
        }
    };
    for node in query.nodes() {
        check(node)?;
    }
    let order: Vec<usize> = match &opts.order {
        Some(order) => {
            let mut seen = vec![false; n];
            for &i in order {
                check(i)?;
                if std::mem::replace(&mut seen[i], true) {
                    return Err(TextError::BadOrder { num_nodes: n });
                }
            }
            if order.len() != n {
                return Err(TextError::BadOrder { num_nodes: n });
            }
            order.clone()
        }
        None => (0..n).collect(),
    };
    if let Some(keep) = &opts.keep {
        for &i in keep {
            check(i)?;
        }
    }
    let kept = |i: usize| opts.keep.as_ref().is_none_or(|k| k.contains(&i));
    let names = opts.names.resolve(n)?;
    let adjacency = g.adjacency();
    let nodes = order
        .into_iter()
        .filter(|&i| kept(i))
        .map(|i| {
            let neighbors: Vec<usize> = adjacency[i].iter().copied().filter(|&j| kept(j)).collect();
            NodeAnnotation {
                node: i,
                structure: structure_text(g, i, &neighbors, &names, opts.dialect),
                feature: feature_text(g, i, &names),
            }
        })
        .collect();
    Ok(SerializedSample {
        nodes,
        query: query_text(query, &names),
        dialect: opts.dialect,
        names,
    })
}
