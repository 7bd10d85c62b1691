use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cycle,
    Star,
    Complete,
    Path,
    Tree,
    Wheel,
    Barbell,
    Graphon,
}

impl Family {
    pub const PREDEFINED: [Family; 7] = [
        Family::Cycle,
        Family::Star,
        Family::Complete,
        Family::Path,
        Family::Tree,
        Family::Wheel,
        Family::Barbell,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Cycle => "cycle",
            Family::Star => "star",
            Family::Complete => "complete",
            Family::Path => "path",
            Family::Tree => "tree",
            Family::Wheel => "wheel",
            Family::Barbell => "barbell",
            Family::Graphon => "graphon",
        }
    }

    pub fn min_nodes(self) -> usize {
        match self {
            Family::Cycle => 3,
            Family::Wheel => 4,
            Family::Barbell => 6,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphonKind {
    Constant,
    Sparse,
    Dense,
    Linear,
    Quadratic,
    Sigmoidal,
    Step,
    Sin,
    Avg,
    ExpDecay,
    Softmax,
}

impl GraphonKind {
    pub const ALL: [GraphonKind; 11] = [
        GraphonKind::Constant,
        GraphonKind::Sparse,
        GraphonKind::Dense,
        GraphonKind::Linear,
        GraphonKind::Quadratic,
        GraphonKind::Sigmoidal,
        GraphonKind::Step,
        GraphonKind::Sin,
        GraphonKind::Avg,
        GraphonKind::ExpDecay,
        GraphonKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraphonKind::Constant => "constant",
            GraphonKind::Sparse => "sparse",
            GraphonKind::Dense => "dense",
            GraphonKind::Linear => "linear",
            GraphonKind::Quadratic => "quadratic",
            GraphonKind::Sigmoidal => "sigmoidal",
            GraphonKind::Step => "step",
            GraphonKind::Sin => "sin",
            GraphonKind::Avg => "avg",
            GraphonKind::ExpDecay => "exp_decay",
            GraphonKind::Softmax => "softmax",
        }
    }
}

impl fmt::Display for GraphonKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphonKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown graphon kind `{s}`"))
    }
}

/// A graphon `W: [0,1]² → [0,1]` with any randomly drawn parameter fixed.
///
/// `constant`, `sparse` and `dense` return a single edge probability `p`
/// drawn once per graph from `[0.3, 0.7]`, `[0.05, 0.15]` and `[0.8, 1.0]`;
/// `step` uses a threshold `t` drawn from `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphonSpec {
    pub kind: GraphonKind,
    /// `p` for the constant-probability kinds, `t` for `step`, unused
    /// otherwise.
    pub param: f64,
}

impl GraphonSpec {
    pub fn new(kind: GraphonKind, param: f64) -> Self {
        Self { kind, param }
    }

    /// Draws the kind's random parameter from its documented range.
    pub fn sample<R: Rng + ?Sized>(kind: GraphonKind, rng: &mut R) -> Self {
        let param = match kind {
            GraphonKind::Constant => rng.random_range(0.3..=0.7),
            GraphonKind::Sparse => rng.random_range(0.05..=0.15),
            GraphonKind::Dense => rng.random_range(0.8..=1.0),
            GraphonKind::Step => rng.random_range(0.0..=1.0),
            _ => 0.0,
        };
        Self { kind, param }
    }
}

/// Edge probability `W(v1, v2)`.
pub fn evaluate_graphon(spec: &GraphonSpec, v1: f64, v2: f64) -> Result<f64, GraphError> {
    if !(0.0..=1.0).contains(&v1) || !(0.0..=1.0).contains(&v2) {
        return Err(GraphError::GraphonInput { v1, v2 });
    }
    let p = match spec.kind {
        GraphonKind::Constant | GraphonKind::Sparse | GraphonKind::Dense => spec.param,
        GraphonKind::Linear => v1 * v2,
        GraphonKind::Quadratic => v1 * v1 * v2 * v2,
        GraphonKind::Sigmoidal => 1.0 / (1.0 + (-10.0 * (v1 - v2)).exp()),
        GraphonKind::Step => {
            if v1 >= spec.param && v2 >= spec.param {
                1.0
            } else {
                0.0
            }
        }
        GraphonKind::Sin => (PI * v1).sin() * (PI * v2).sin(),
        GraphonKind::Avg => (v1 + v2) / 2.0,
        GraphonKind::ExpDecay => (-(v1 * v1 + v2 * v2)).exp(),
        GraphonKind::Softmax => v1.exp() / (v1.exp() + v2.exp()),
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Generates a graph of `n` nodes. Deterministic for a given `seed`.
///
/// Pre-defined families follow the usual textbook constructions with node 0
/// as the hub of stars and wheels; trees are uniform random labeled trees
/// decoded from a Prüfer sequence; barbells join two cliques of
/// `max(3, n / 3)` nodes by a path of the remaining nodes.
pub fn generate_graph(
    family: Family,
    n: usize,
    graphon: Option<&GraphonSpec>,
    seed: u64,
) -> Result<Graph, GraphError> {
    if (family == Family::Graphon) != graphon.is_some() {
        return Err(GraphError::GraphonMismatch);
    }
    if n < family.min_nodes() {
        return Err(GraphError::InvalidSize {
            family: family.name(),
            n,
            min: family.min_nodes(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new(n);
    match family {
        Family::Cycle => {
            for i in 0..n {
                g.add_edge(i, (i + 1) % n)?;
            }
        }
        Family::Star => {
            for i in 1..n {
                g.add_edge(0, i)?;
            }
        }
        Family::Complete => {
            for i in 0..n {
                for j in i + 1..n {
                    g.add_edge(i, j)?;
                }
            }
        }
        Family::Path => {
            for i in 0..n - 1 {
                g.add_edge(i, i + 1)?;
            }
        }
        Family::Tree => {
            for (a, b) in prufer_tree(n, &mut rng) {
                g.add_edge(a, b)?;
            }
        }
        Family::Wheel => {
            for i in 1..n {
                g.add_edge(0, i)?;
                let next = if i + 1 == n { 1 } else { i + 1 };
                g.add_edge(i, next)?;
            }
        }
        Family::Barbell => {
            let bell = (n / 3).max(3);
            let path = n - 2 * bell;
            let second = bell + path;
            for i in 0..bell {
                for j in i + 1..bell {
                    g.add_edge(i, j)?;
                    g.add_edge(second + i, second + j)?;
                }
            }
            for i in bell - 1..second {
                g.add_edge(i, i + 1)?;
            }
        }
        Family::Graphon => {
            let spec = graphon.expect("checked above");
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            for i in 0..n {
                for j in i + 1..n {
                    let p = evaluate_graphon(spec, values[i], values[j])?;
                    if rng.random::<f64>() < p {
                        g.add_edge(i, j)?;
                    }
                }
            }
        }
    }
    Ok(g)
}

fn prufer_tree<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if n == 2 {
        return vec![(0, 1)];
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &s in &seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &s in &seq {
        let leaf = (0..n).find(|&i| degree[i] == 1).expect("a leaf always exists");
        edges.push((leaf, s));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_families() {
        let k4 = generate_graph(Family::Complete, 4, None, 0).unwrap();
        assert_eq!(k4.num_edges(), 6);
        let c5 = generate_graph(Family::Cycle, 5, None, 0).unwrap();
        assert_eq!(c5.num_edges(), 5);
        assert!((0..5).all(|i| c5.degree(i) == 2));
        let w6 = generate_graph(Family::Wheel, 6, None, 0).unwrap();
        assert_eq!(w6.num_edges(), 10);
        assert_eq!(w6.degree(0), 5);
        let s5 = generate_graph(Family::Star, 5, None, 0).unwrap();
        assert_eq!(s5.degree(0), 4);
        let p4 = generate_graph(Family::Path, 4, None, 0).unwrap();
        assert_eq!(p4.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2), (2, 3)]);
        let b6 = generate_graph(Family::Barbell, 6, None, 0).unwrap();
        assert_eq!(b6.num_edges(), 7);
        let b12 = generate_graph(Family::Barbell, 12, None, 0).unwrap();
        assert_eq!(b12.num_edges(), 6 + 6 + 5);
    }

    #[test]
    fn trees_have_n_minus_one_edges_and_are_connected() {
        for seed in 0..50 {
            let t = generate_graph(Family::Tree, 9, None, seed).unwrap();
            assert_eq!(t.num_edges(), 8);
            assert_eq!(super::super::connected_components(&t).len(), 1);
        }
    }

    #[test]
    fn size_and_graphon_preconditions() {
        assert_eq!(
            generate_graph(Family::Barbell, 5, None, 0),
            Err(GraphError::InvalidSize {
                family: "barbell",
                n: 5,
                min: 6
            })
        );
        assert_eq!(
            generate_graph(Family::Graphon, 5, None, 0),
            Err(GraphError::GraphonMismatch)
        );
        let spec = GraphonSpec::new(GraphonKind::Avg, 0.0);
        assert_eq!(
            generate_graph(Family::Path, 5, Some(&spec), 0),
            Err(GraphError::GraphonMismatch)
        );
    }

    #[test]
    fn graphon_values() {
        let lin = GraphonSpec::new(GraphonKind::Linear, 0.0);
        assert_eq!(evaluate_graphon(&lin, 0.5, 0.5).unwrap(), 0.25);
        let sig = GraphonSpec::new(GraphonKind::Sigmoidal, 0.0);
        assert_eq!(evaluate_graphon(&sig, 0.3, 0.3).unwrap(), 0.5);
        let sin = GraphonSpec::new(GraphonKind::Sin, 0.0);
        assert!((evaluate_graphon(&sin, 0.5, 0.5).unwrap() - 1.0).abs() < 1e-15);
        let step = GraphonSpec::new(GraphonKind::Step, 0.6);
        assert_eq!(evaluate_graphon(&step, 0.7, 0.6).unwrap(), 1.0);
        assert_eq!(evaluate_graphon(&step, 0.7, 0.5).unwrap(), 0.0);
        assert!(evaluate_graphon(&lin, 1.2, 0.5).is_err());
        assert!(evaluate_graphon(&lin, 0.2, -0.1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GraphonSpec::new(GraphonKind::Constant, 0.5);
        let a = generate_graph(Family::Graphon, 15, Some(&spec), 77).unwrap();
        let b = generate_graph(Family::Graphon, 15, Some(&spec), 77).unwrap();
        assert_eq!(a, b);
    }
}
