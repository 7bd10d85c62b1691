//! Undirected graphs, random generators, node relabeling and exact task
//! oracles.

mod generate;
mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

pub use generate::{evaluate_graphon, generate_graph, Family, GraphonKind, GraphonSpec};
pub use oracle::{
    bfs_distances, connected_components, oracle, reachable_gt_nodes, shortest_path_gt_nodes,
    Answer, OracleAnswer, Task, TaskQuery,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("self-loop on node {node}")]
    SelfLoop { node: usize },
    #[error("node {node} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("{family} graph needs n >= {min}, got {n}")]
    InvalidSize {
        family: &'static str,
        n: usize,
        min: usize,
    },
    #[error("graphon spec must be given iff family is graphon")]
    GraphonMismatch,
    #[error("graphon inputs must lie in [0, 1], got ({v1}, {v2})")]
    GraphonInput { v1: f64, v2: f64 },
    #[error("permutation over {found} nodes applied to graph with {expected} nodes")]
    PermutationSize { expected: usize, found: usize },
    #[error("mapping is not a bijection on 0..{len}")]
    NotBijection { len: usize },
}

/// Simple undirected graph. Edges are stored canonically as `(i, j)` with
/// `i < j`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Graph {
    num_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    node_features: Option<Vec<Vec<(String, String)>>>,
    edge_features: Option<BTreeMap<(usize, usize), String>>,
}

fn canonical(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Graph {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            ..Default::default()
        }
    }

    pub fn from_edges(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let mut g = Self::new(num_nodes);
        for (a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    fn check_node(&self, node: usize) -> Result<(), GraphError> {
        if node >= self.num_nodes {
            Err(GraphError::NodeOutOfRange {
                node,
                num_nodes: self.num_nodes,
            })
        } else {
            Ok(())
        }
    }

    /// Inserts an edge; returns false if it already existed.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<bool, GraphError> {
        self.check_node(a)?;
        self.check_node(b)?;
        if a == b {
            return Err(GraphError::SelfLoop { node: a });
        }
        Ok(self.edges.insert(canonical(a, b)))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a != b && self.edges.contains(&canonical(a, b))
    }

    /// Neighbors of `node` in ascending order.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == node {
                    Some(b)
                } else if b == node {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Sorted adjacency lists for every node.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj.iter_mut().for_each(|l| l.sort_unstable());
        adj
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == node || b == node)
            .count()
    }

    pub fn set_node_features(
        &mut self,
        node: usize,
        features: Vec<(String, String)>,
    ) -> Result<(), GraphError> {
        self.check_node(node)?;
        let n = self.num_nodes;
        self.node_features.get_or_insert_with(|| vec![Vec::new(); n])[node] = features;
        Ok(())
    }

    pub fn set_edge_feature(&mut self, a: usize, b: usize, feature: String) -> Result<(), GraphError> {
        if !self.has_edge(a, b) {
            self.add_edge(a, b)?;
        }
        self.edge_features
            .get_or_insert_with(BTreeMap::new)
            .insert(canonical(a, b), feature);
        Ok(())
    }

    pub fn has_node_features(&self) -> bool {
        self.node_features.is_some()
    }

    pub fn node_features(&self, node: usize) -> Option<&[(String, String)]> {
        self.node_features
            .as_ref()
            .and_then(|f| f.get(node))
            .map(Vec::as_slice)
    }

    pub fn edge_feature(&self, a: usize, b: usize) -> Option<&str> {
        self.edge_features
            .as_ref()
            .and_then(|f| f.get(&canonical(a, b)))
            .map(String::as_str)
    }

    pub fn has_edge_features(&self) -> bool {
        self.edge_features.as_ref().is_some_and(|f| !f.is_empty())
    }
}

/// Bijection on `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self, GraphError> {
        let len = mapping.len();
        let mut seen = vec![false; len];
        for &m in &mapping {
            if m >= len || std::mem::replace(&mut seen[m], true) {
                return Err(GraphError::NotBijection { len });
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// `(self ∘ other)(i) = self(other(i))`
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            mapping: other.mapping.iter().map(|&i| self.mapping[i]).collect(),
        }
    }
}

/// Relabels node `i` as `p(i)`, carrying node and edge features along.
pub fn permute(g: &Graph, p: &Permutation) -> Result<Graph, GraphError> {
    if p.len() != g.num_nodes() {
        return Err(GraphError::PermutationSize {
            expected: g.num_nodes(),
            found: p.len(),
        });
    }
    let mut out = Graph::new(g.num_nodes());
    for (a, b) in g.edges() {
        out.add_edge(p.apply(a), p.apply(b))?;
    }
    if let Some(features) = &g.node_features {
        let mut moved = vec![Vec::new(); g.num_nodes()];
        for (i, f) in features.iter().enumerate() {
            moved[p.apply(i)] = f.clone();
        }
        out.node_features = Some(moved);
    }
    if let Some(features) = &g.edge_features {
        out.edge_features = Some(
            features
                .iter()
                .map(|(&(a, b), f)| (canonical(p.apply(a), p.apply(b)), f.clone()))
                .collect(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_self_loops_and_out_of_range() {
        let mut g = Graph::new(3);
        assert_eq!(g.add_edge(1, 1), Err(GraphError::SelfLoop { node: 1 }));
        assert_eq!(
            g.add_edge(0, 3),
            Err(GraphError::NodeOutOfRange {
                node: 3,
                num_nodes: 3
            })
        );
        assert_eq!(g.add_edge(2, 0), Ok(true));
        assert_eq!(g.add_edge(0, 2), Ok(false));
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 2)]);
    }

    #[test]
    fn identity_permutation_is_noop() {
        let g = Graph::from_edges(4, [(0, 1), (1, 3)]).unwrap();
        assert_eq!(permute(&g, &Permutation::identity(4)).unwrap(), g);
    }

    #[test]
    fn reversing_a_path_keeps_its_edge_set() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let p = Permutation::new(vec![2, 1, 0]).unwrap();
        assert_eq!(permute(&g, &p).unwrap(), g);
    }

    #[test]
    fn permutation_round_trip_restores_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::from_edges(6, [(0, 1), (1, 2), (2, 5), (3, 4)]).unwrap();
        g.set_node_features(2, vec![("color".into(), "red".into())])
            .unwrap();
        g.set_edge_feature(3, 4, "double bond".into()).unwrap();
        let p = Permutation::random(6, &mut rng);
        let moved = permute(&g, &p).unwrap();
        assert_eq!(
            moved.node_features(p.apply(2)).unwrap()[0].1,
            "red".to_string()
        );
        assert_eq!(moved.edge_feature(p.apply(4), p.apply(3)), Some("double bond"));
        let back = permute(&moved, &p.inverse()).unwrap();
        assert_eq!(back, g);
        assert_eq!(p.compose(&p.inverse()), Permutation::identity(6));
    }

    #[test]
    fn permutation_errors() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        let g = Graph::new(3);
        assert_eq!(
            permute(&g, &Permutation::identity(2)),
            Err(GraphError::PermutationSize {
                expected: 3,
                found: 2
            })
        );
    }
}
