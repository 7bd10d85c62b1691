//! Brute-force reference answers and small fixtures shared by the
//! integration tests. Everything here is written against the adjacency
//! matrix, independent of the library's BFS and union-find code.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hlmg::graph::{generate_graph, Answer, Family, Graph, GraphonKind, GraphonSpec, TaskQuery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn matrix(g: &Graph) -> Vec<Vec<bool>> {
    let n = g.num_nodes();
    let mut a = vec![vec![false; n]; n];
    for (u, v) in g.edges() {
        a[u][v] = true;
        a[v][u] = true;
    }
    a
}

/// All-pairs hop distances; `usize::MAX` when unreachable.
pub fn floyd_warshall(a: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let n = a.len();
    let inf = usize::MAX;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        for j in 0..n {
            if a[i][j] {
                d[i][j] = 1;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] != inf && d[k][j] != inf && d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Union of the nodes of every simple `u`–`v` path, by exhaustive DFS.
/// Stops early once every node of `u`'s component is covered.
pub fn simple_path_nodes(a: &[Vec<bool>], u: usize, v: usize) -> BTreeSet<usize> {
    struct Walk<'g> {
        a: &'g [Vec<bool>],
        v: usize,
        path: Vec<usize>,
        seen: Vec<bool>,
        covered: BTreeSet<usize>,
        limit: usize,
    }
    fn go(w: &mut Walk<'_>, at: usize) {
        if w.covered.len() == w.limit {
            return;
        }
        if at == w.v {
            w.covered.extend(w.path.iter().copied());
            return;
        }
        for next in 0..w.a.len() {
            if w.a[at][next] && !w.seen[next] {
                w.seen[next] = true;
                w.path.push(next);
                go(w, next);
                w.path.pop();
                w.seen[next] = false;
            }
        }
    }
    let d = floyd_warshall(a);
    let limit = (0..a.len()).filter(|&x| d[u][x] != usize::MAX).count();
    let mut seen = vec![false; a.len()];
    seen[u] = true;
    let mut w = Walk {
        a,
        v,
        path: vec![u],
        seen,
        covered: BTreeSet::new(),
        limit,
    };
    go(&mut w, u);
    w.covered
}

/// Union of the nodes of every shortest `u`–`v` path, enumerating the paths
/// one hop at a time.
pub fn shortest_path_nodes(a: &[Vec<bool>], u: usize, v: usize) -> BTreeSet<usize> {
    let d = floyd_warshall(a);
    fn go(a: &[Vec<bool>], d: &[Vec<usize>], at: usize, v: usize, path: &mut Vec<usize>, out: &mut BTreeSet<usize>) {
        if at == v {
            out.extend(path.iter().copied());
            return;
        }
        for next in 0..a.len() {
            if a[at][next] && d[next][v] != usize::MAX && d[next][v] + 1 == d[at][v] {
                path.push(next);
                go(a, d, next, v, path, out);
                path.pop();
            }
        }
    }
    let mut out = BTreeSet::new();
    if d[u][v] != usize::MAX {
        go(a, &d, u, v, &mut vec![u], &mut out);
    }
    out
}

/// A cycle exists iff some edge's endpoints stay connected without it.
pub fn has_cycle(a: &[Vec<bool>]) -> bool {
    let n = a.len();
    for u in 0..n {
        for v in u + 1..n {
            if !a[u][v] {
                continue;
            }
            let mut b = a.to_vec();
            b[u][v] = false;
            b[v][u] = false;
            if floyd_warshall(&b)[u][v] != usize::MAX {
                return true;
            }
        }
    }
    false
}

pub fn component_count(a: &[Vec<bool>]) -> usize {
    let d = floyd_warshall(a);
    let classes: BTreeSet<Vec<bool>> = d
        .iter()
        .map(|row| row.iter().map(|&x| x != usize::MAX).collect())
        .collect();
    classes.len()
}

/// Reference answer and ground-truth node set for a query.
pub fn brute_answer(g: &Graph, q: &TaskQuery) -> (Answer, Option<BTreeSet<usize>>) {
    let a = matrix(g);
    let d = floyd_warshall(&a);
    match *q {
        TaskQuery::NodeDegree { node } => {
            let deg = a[node].iter().filter(|&&x| x).count();
            (Answer::Count(deg), Some(BTreeSet::from([node])))
        }
        TaskQuery::EdgeExistence { u, v } => (Answer::Bool(a[u][v]), Some(BTreeSet::from([u, v]))),
        TaskQuery::ShortestDistance { u, v } => {
            let dist = (d[u][v] != usize::MAX).then_some(d[u][v]);
            let gt = match dist {
                None => BTreeSet::from([u, v]),
                Some(_) => shortest_path_nodes(&a, u, v),
            };
            (Answer::Distance(dist), Some(gt))
        }
        TaskQuery::Reachable { u, v } => {
            let covered = simple_path_nodes(&a, u, v);
            let gt = if covered.is_empty() {
                BTreeSet::from([u, v])
            } else {
                covered
            };
            (Answer::Bool(d[u][v] != usize::MAX), Some(gt))
        }
        TaskQuery::Cycle => (Answer::Bool(has_cycle(&a)), None),
        TaskQuery::EdgeCount => {
            let m = (0..a.len())
                .flat_map(|i| (i + 1..a.len()).map(move |j| (i, j)))
                .filter(|&(i, j)| a[i][j])
                .count();
            (Answer::Count(m), None)
        }
        TaskQuery::Components => (Answer::Count(component_count(&a)), None),
    }
}

/// A mix of Erdős–Rényi graphs over the full density range, predefined
/// families and graphon samples, all with `2 ≤ n ≤ max_n`.
pub fn random_graph(rng: &mut ChaCha8Rng, max_n: usize) -> Graph {
    let n = rng.random_range(2..=max_n);
    match rng.random_range(0..3) {
        0 => {
            let p: f64 = rng.random();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((i, j));
                    }
                }
            }
            Graph::from_edges(n, edges).unwrap()
        }
        1 => {
            let fams: Vec<Family> = Family::PREDEFINED
                .into_iter()
                .filter(|f| f.min_nodes() <= n)
                .collect();
            let f = fams[rng.random_range(0..fams.len())];
            generate_graph(f, n, None, rng.random()).unwrap()
        }
        _ => {
            let kind = GraphonKind::ALL[rng.random_range(0..GraphonKind::ALL.len())];
            let spec = GraphonSpec::sample(kind, rng);
            generate_graph(Family::Graphon, n, Some(&spec), rng.random()).unwrap()
        }
    }
}

/// Every query of every task on `g` (all nodes and ordered pairs).
pub fn all_queries(n: usize) -> Vec<TaskQuery> {
    let mut out = vec![TaskQuery::Cycle, TaskQuery::EdgeCount, TaskQuery::Components];
    for u in 0..n {
        out.push(TaskQuery::NodeDegree { node: u });
        for v in 0..n {
            if u != v {
                out.push(TaskQuery::EdgeExistence { u, v });
                out.push(TaskQuery::ShortestDistance { u, v });
                out.push(TaskQuery::Reachable { u, v });
            }
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
