//! Exact answers and interpretation ground truths for the seven reasoning
//! tasks.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Permutation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeDegree,
    EdgeExistence,
    ShortestDistance,
    Reachable,
    Cycle,
    EdgeCount,
    Components,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::NodeDegree,
        Task::EdgeExistence,
        Task::ShortestDistance,
        Task::Reachable,
        Task::Cycle,
        Task::EdgeCount,
        Task::Components,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::NodeDegree => "node_degree",
            Task::EdgeExistence => "edge_existence",
            Task::ShortestDistance => "shortest_distance",
            Task::Reachable => "reachable",
            Task::Cycle => "cycle",
            Task::EdgeCount => "edge_count",
            Task::Components => "components",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskQuery {
    NodeDegree { node: usize },
    EdgeExistence { u: usize, v: usize },
    ShortestDistance { u: usize, v: usize },
    Reachable { u: usize, v: usize },
    Cycle,
    EdgeCount,
    Components,
}

impl TaskQuery {
    pub fn task(&self) -> Task {
        match self {
            TaskQuery::NodeDegree { .. } => Task::NodeDegree,
            TaskQuery::EdgeExistence { .. } => Task::EdgeExistence,
            TaskQuery::ShortestDistance { .. } => Task::ShortestDistance,
            TaskQuery::Reachable { .. } => Task::Reachable,
            TaskQuery::Cycle => Task::Cycle,
            TaskQuery::EdgeCount => Task::EdgeCount,
            TaskQuery::Components => Task::Components,
        }
    }

    /// Default query of a task: node pair `(0, 1)` or node `0`.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::NodeDegree => TaskQuery::NodeDegree { node: 0 },
            Task::EdgeExistence => TaskQuery::EdgeExistence { u: 0, v: 1 },
            Task::ShortestDistance => TaskQuery::ShortestDistance { u: 0, v: 1 },
            Task::Reachable => TaskQuery::Reachable { u: 0, v: 1 },
            Task::Cycle => TaskQuery::Cycle,
            Task::EdgeCount => TaskQuery::EdgeCount,
            Task::Components => TaskQuery::Components,
        }
    }

    /// Nodes mentioned by the query.
    pub fn nodes(&self) -> Vec<usize> {
        match *self {
            TaskQuery::NodeDegree { node } => vec![node],
            TaskQuery::EdgeExistence { u, v }
            | TaskQuery::ShortestDistance { u, v }
            | TaskQuery::Reachable { u, v } => vec![u, v],
            _ => Vec::new(),
        }
    }

    pub fn map_nodes(&self, f: impl Fn(usize) -> usize) -> Self {
        match *self {
            TaskQuery::NodeDegree { node } => TaskQuery::NodeDegree { node: f(node) },
            TaskQuery::EdgeExistence { u, v } => TaskQuery::EdgeExistence { u: f(u), v: f(v) },
            TaskQuery::ShortestDistance { u, v } => {
                TaskQuery::ShortestDistance { u: f(u), v: f(v) }
            }
            TaskQuery::Reachable { u, v } => TaskQuery::Reachable { u: f(u), v: f(v) },
            other => other,
        }
    }

    pub fn permuted(&self, p: &Permutation) -> Self {
        self.map_nodes(|i| p.apply(i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    Bool(bool),
    Count(usize),
    /// `None` when no path exists.
    Distance(Option<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleAnswer {
    pub answer: Answer,
    /// Interpretation ground truth, for tasks that define one.
    pub gt_nodes: Option<BTreeSet<usize>>,
}

/// BFS hop distances from `src`.
pub fn bfs_distances(adj: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(x) = queue.pop_front() {
        let d = dist[x].expect("queued nodes have a distance");
        for &y in &adj[x] {
            if dist[y].is_none() {
                dist[y] = Some(d + 1);
                queue.push_back(y);
            }
        }
    }
    dist
}

/// Connected components as sorted node lists, ordered by smallest member.
pub fn connected_components(g: &Graph) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (a, b) in g.edges() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for x in 0..n {
        let r = find(&mut parent, x);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(x);
    }
    groups
}

/// Nodes lying on at least one shortest `u`–`v` path; `{u, v}` when `v` is
/// unreachable.
pub fn shortest_path_gt_nodes(g: &Graph, u: usize, v: usize) -> BTreeSet<usize> {
    let adj = g.adjacency();
    let from_u = bfs_distances(&adj, u);
    let from_v = bfs_distances(&adj, v);
    match from_u[v] {
        None => BTreeSet::from([u, v]),
        Some(d) => (0..g.num_nodes())
            .filter(|&w| matches!((from_u[w], from_v[w]), (Some(a), Some(b)) if a + b == d))
            .collect(),
    }
}

/// Nodes lying on at least one simple `u`–`v` path; `{u, v}` when `v` is
/// unreachable.
///
/// A node lies on a simple `u`–`v` path iff it belongs to a biconnected block
/// on the block-cut-tree path between `u` and `v`, which this computes in
/// linear time.
pub fn reachable_gt_nodes(g: &Graph, u: usize, v: usize) -> BTreeSet<usize> {
    if u == v {
        return BTreeSet::from([u]);
    }
    let adj = g.adjacency();
    if bfs_distances(&adj, u)[v].is_none() {
        return BTreeSet::from([u, v]);
    }
    let blocks = biconnected_blocks(&adj);
    let n = g.num_nodes();
    // Block-cut tree: ids 0..n are vertices, n.. are blocks. Non-cut vertices
    // end up as leaves, so they only appear as path endpoints.
    let mut tree = vec![Vec::new(); n + blocks.len()];
    for (bi, block) in blocks.iter().enumerate() {
        for &x in block {
            tree[x].push(n + bi);
            tree[n + bi].push(x);
        }
    }
    let mut prev = vec![usize::MAX; tree.len()];
    prev[u] = u;
    let mut queue = VecDeque::from([u]);
    while let Some(x) = queue.pop_front() {
        if x == v {
            break;
        }
        for &y in &tree[x] {
            if prev[y] == usize::MAX {
                prev[y] = x;
                queue.push_back(y);
            }
        }
    }
    let mut out = BTreeSet::new();
    let mut x = v;
    loop {
        if x >= n {
            out.extend(blocks[x - n].iter().copied());
        } else {
            out.insert(x);
        }
        if x == u {
            break;
        }
        x = prev[x];
    }
    out
}

/// Vertex sets of the biconnected blocks (bridges count as two-vertex
/// blocks); isolated vertices belong to no block.
fn biconnected_blocks(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut timer = 0;
    let mut edge_stack: Vec<(usize, usize)> = Vec::new();
    let mut blocks = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        // (vertex, parent, next neighbor index)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        while let Some(&mut (x, parent, ref mut next)) = stack.last_mut() {
            if *next < adj[x].len() {
                let y = adj[x][*next];
                *next += 1;
                if disc[y] == usize::MAX {
                    edge_stack.push((x, y));
                    disc[y] = timer;
                    low[y] = timer;
                    timer += 1;
                    stack.push((y, x, 0));
                } else if y != parent && disc[y] < disc[x] {
                    edge_stack.push((x, y));
                    low[x] = low[x].min(disc[y]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[x]);
                    if low[x] >= disc[p] {
                        let mut block = BTreeSet::new();
                        while let Some((a, b)) = edge_stack.pop() {
                            block.insert(a);
                            block.insert(b);
                            if (a, b) == (p, x) {
                                break;
                            }
                        }
                        blocks.push(block.into_iter().collect());
                    }
                }
            }
        }
    }
    blocks
}

fn check(g: &Graph, nodes: &[usize]) -> Result<(), GraphError> {
    match nodes.iter().find(|&&x| x >= g.num_nodes()) {
        Some(&node) => Err(GraphError::NodeOutOfRange {
            node,
            num_nodes: g.num_nodes(),
        }),
        None => Ok(()),
    }
}

/// Exact answer of `query` on `g` together with its interpretation ground
/// truth (edge existence `{u, v}`; degree `{u}`; shortest distance: nodes on
/// any shortest path; reachability: nodes on any simple path).
pub fn oracle(g: &Graph, query: &TaskQuery) -> Result<OracleAnswer, GraphError> {
    check(g, &query.nodes())?;
    let out = match *query {
        TaskQuery::NodeDegree { node } => OracleAnswer {
            answer: Answer::Count(g.degree(node)),
            gt_nodes: Some(BTreeSet::from([node])),
        },
        TaskQuery::EdgeExistence { u, v } => OracleAnswer {
            answer: Answer::Bool(g.has_edge(u, v)),
            gt_nodes: Some(BTreeSet::from([u, v])),
        },
        TaskQuery::ShortestDistance { u, v } => OracleAnswer {
            answer: Answer::Distance(bfs_distances(&g.adjacency(), u)[v]),
            gt_nodes: Some(shortest_path_gt_nodes(g, u, v)),
        },
        TaskQuery::Reachable { u, v } => OracleAnswer {
            answer: Answer::Bool(bfs_distances(&g.adjacency(), u)[v].is_some()),
            gt_nodes: Some(reachable_gt_nodes(g, u, v)),
        },
        TaskQuery::Cycle => {
            let c = connected_components(g).len();
            OracleAnswer {
                answer: Answer::Bool(g.num_edges() + c > g.num_nodes()),
                gt_nodes: None,
            }
        }
        TaskQuery::EdgeCount => OracleAnswer {
            answer: Answer::Count(g.num_edges()),
            gt_nodes: None,
        },
        TaskQuery::Components => OracleAnswer {
            answer: Answer::Count(connected_components(g).len()),
            gt_nodes: None,
        },
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_is_cyclic() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(oracle(&g, &TaskQuery::Cycle).unwrap().answer, Answer::Bool(true));
        let path = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(
            oracle(&path, &TaskQuery::Cycle).unwrap().answer,
            Answer::Bool(false)
        );
    }

    #[test]
    fn path_distance_and_ground_truth() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let a = oracle(&g, &TaskQuery::ShortestDistance { u: 0, v: 2 }).unwrap();
        assert_eq!(a.answer, Answer::Distance(Some(2)));
        assert_eq!(a.gt_nodes, Some(BTreeSet::from([0, 1, 2])));
    }

    #[test]
    fn disjoint_edges_have_two_components() {
        let g = Graph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert_eq!(
            oracle(&g, &TaskQuery::Components).unwrap().answer,
            Answer::Count(2)
        );
        let a = oracle(&g, &TaskQuery::ShortestDistance { u: 0, v: 3 }).unwrap();
        assert_eq!(a.answer, Answer::Distance(None));
        assert_eq!(a.gt_nodes, Some(BTreeSet::from([0, 3])));
    }

    #[test]
    fn reachability_ground_truth_skips_dangling_branches() {
        // 0-1-2-3 with a triangle 1-4-2 and a pendant 5 hanging off 4.
        let g = Graph::from_edges(6, [(0, 1), (1, 2), (2, 3), (1, 4), (4, 2), (4, 5)]).unwrap();
        assert_eq!(reachable_gt_nodes(&g, 0, 3), BTreeSet::from([0, 1, 2, 3, 4]));
        assert_eq!(reachable_gt_nodes(&g, 5, 0), BTreeSet::from([0, 1, 2, 4, 5]));
    }

    #[test]
    fn out_of_range_query_is_rejected() {
        let g = Graph::new(2);
        assert!(oracle(&g, &TaskQuery::NodeDegree { node: 2 }).is_err());
    }
}
