use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use hlmg_tensor::{Scalar, Tape, Tensor, MASK_FILL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, io_err, Result, TrainError};
use crate::dataset::{Dataset, DatasetError, Sample, Split};
use crate::graph::{bfs_distances, permute, Graph, Permutation, TaskQuery};
use crate::model::{attention_flops, Model, ModelConfig};
use crate::text::TokenizedSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub baseline: f64,
    /// Accuracy after each cumulative relabeling round.
    pub permuted: Vec<f64>,
    /// Baseline minus mean permuted accuracy; negative when relabeled
    /// inputs score higher.
    pub mean_drop: f64,
    /// Baseline minus the worst round.
    pub max_drop: f64,
}

/// Accuracy drop under `rounds` cumulative random relabelings of every test
/// graph: round `t` applies a fresh permutation to the graph of round
/// `t − 1`.
pub fn robustness_eval<T: Scalar>(
    dataset: &Dataset,
    model: &Model<T>,
    rounds: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    robustness_eval_with(dataset, model, rounds, |n| Permutation::random(n, &mut rng))
}

/// [`robustness_eval`] with caller-chosen permutations, drawn per sample and
/// round.
pub fn robustness_eval_with<T: Scalar>(
    dataset: &Dataset,
    model: &Model<T>,
    rounds: usize,
    mut next: impl FnMut(usize) -> Permutation,
) -> Result<RobustnessReport> {
    let test: Vec<&Sample> = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let base_tokens: Vec<&TokenizedSample> = test.iter().map(|s| &s.tokens).collect();
    let baseline = evaluate(&base_tokens, model)?;
    let mut current: Vec<(Graph, TaskQuery)> =
        test.iter().map(|s| (s.graph.clone(), s.query)).collect();
    let opts = dataset.options();
    let mut permuted = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut correct = 0;
        for ((g, q), s) in current.iter_mut().zip(&test) {
            let p = next(g.num_nodes());
            *g = permute(g, &p).map_err(DatasetError::from)?;
            *q = q.permuted(&p);
            let tokens = dataset.encode(g, q, &opts)?;
            if model.predict(&tokens)? == s.label() {
                correct += 1;
            }
        }
        permuted.push(correct as f64 / test.len() as f64);
    }
    let mean = permuted.iter().sum::<f64>() / permuted.len().max(1) as f64;
    let worst = permuted.iter().copied().fold(baseline, f64::min);
    Ok(RobustnessReport {
        baseline,
        mean_drop: if rounds == 0 { 0.0 } else { baseline - mean },
        max_drop: baseline - worst,
        permuted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGroup {
    /// 1, 2, or 3 for "three or more".
    pub hop: usize,
    pub common_neighbors: Option<usize>,
    pub degree_difference: Option<usize>,
    pub mean_cosine: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    /// Grouped by hop distance and common-neighbour count.
    pub by_common_neighbors: Vec<SimilarityGroup>,
    /// Pairs three or more hops apart, grouped by degree difference.
    pub by_degree_difference: Vec<SimilarityGroup>,
    /// Mean per hop class (1, 2, 3+) over all its pairs.
    pub by_hop: Vec<SimilarityGroup>,
    /// Mean over pairs three or more hops apart with no common neighbour.
    pub far_disjoint: Option<SimilarityGroup>,
    pub total_pairs: usize,
    pub notes: Vec<String>,
}

impl SimilarityTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,hop,common_neighbors,degree_difference,mean_cosine,pairs\n");
        let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        for (name, rows) in [
            ("hop", &self.by_hop),
            ("common_neighbors", &self.by_common_neighbors),
            ("degree_difference", &self.by_degree_difference),
        ] {
            for g in rows {
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{},{}",
                    g.hop,
                    opt(g.common_neighbors),
                    opt(g.degree_difference),
                    g.mean_cosine,
                    g.pairs
                );
            }
        }
        out
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap_or(0.0), y.to_f64().unwrap_or(0.0));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt()).max(1e-12)
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }
}

/// Cosine similarity of structure-span embeddings for every node pair of
/// every graph, grouped by hop distance (pairs in different components are
/// skipped), common-neighbour count and degree difference. Groups with fewer
/// than `min_pairs` pairs are omitted and listed in `notes`.
pub fn embedding_similarity_analysis<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    graphs: &[&Graph],
    min_pairs: usize,
) -> Result<SimilarityTable> {
    let query = TaskQuery::default_for(dataset.spec.task);
    let opts = dataset.options();
    let mut by_cn: BTreeMap<(usize, usize), Acc> = BTreeMap::new();
    let mut by_dd: BTreeMap<usize, Acc> = BTreeMap::new();
    let mut by_hop: BTreeMap<usize, Acc> = BTreeMap::new();
    let mut far_disjoint = Acc::default();
    let mut total = 0;
    for g in graphs {
        let tokens = dataset.encode(g, &query, &opts)?;
        let inspect = model.inspect(&tokens)?;
        let mut z: Vec<&[T]> = vec![&[]; g.num_nodes()];
        for (node, e) in inspect.node_order.iter().zip(&inspect.z_structure) {
            z[*node] = e;
        }
        let adj = g.adjacency();
        for i in 0..g.num_nodes() {
            let dist = bfs_distances(&adj, i);
            for j in i + 1..g.num_nodes() {
                let Some(d) = dist[j] else { continue };
                let hop = d.min(3);
                let common = adj[i].iter().filter(|x| adj[j].binary_search(x).is_ok()).count();
                let c = cosine(z[i], z[j]);
                by_cn.entry((hop, common)).or_default().add(c);
                by_hop.entry(hop).or_default().add(c);
                if hop == 3 {
                    by_dd.entry(adj[i].len().abs_diff(adj[j].len())).or_default().add(c);
                    if common == 0 {
                        far_disjoint.add(c);
                    }
                }
                total += 1;
            }
        }
    }
    let mut table = SimilarityTable {
        total_pairs: total,
        ..Default::default()
    };
    let keep = |acc: &Acc, g: SimilarityGroup, notes: &mut Vec<String>| {
        if acc.n >= min_pairs.max(1) {
            Some(g)
        } else {
            notes.push(format!(
                "omitted hop {} cn {:?} dd {:?}: {} pairs",
                g.hop, g.common_neighbors, g.degree_difference, acc.n
            ));
            None
        }
    };
    let mean = |a: &Acc| a.sum / a.n.max(1) as f64;
    let mut notes = Vec::new();
    for (&(hop, cn), acc) in &by_cn {
        let g = SimilarityGroup {
            hop,
            common_neighbors: Some(cn),
            degree_difference: None,
            mean_cosine: mean(acc),
            pairs: acc.n,
        };
        table.by_common_neighbors.extend(keep(acc, g, &mut notes));
    }
    for (&dd, acc) in &by_dd {
        let g = SimilarityGroup {
            hop: 3,
            common_neighbors: None,
            degree_difference: Some(dd),
            mean_cosine: mean(acc),
            pairs: acc.n,
        };
        table.by_degree_difference.extend(keep(acc, g, &mut notes));
    }
    for (&hop, acc) in &by_hop {
        let g = SimilarityGroup {
            hop,
            common_neighbors: None,
            degree_difference: None,
            mean_cosine: mean(acc),
            pairs: acc.n,
        };
        table.by_hop.extend(keep(acc, g, &mut notes));
    }
    let g = SimilarityGroup {
        hop: 3,
        common_neighbors: Some(0),
        degree_difference: None,
        mean_cosine: mean(&far_disjoint),
        pairs: far_disjoint.n,
    };
    table.far_disjoint = keep(&far_disjoint, g, &mut notes);
    table.notes = notes;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub nodes: usize,
    pub tokens_per_node: usize,
    pub local_ms: f64,
    pub full_ms: f64,
    pub local_flops: u128,
    pub full_flops: u128,
}

/// Dense attention over all rows with off-segment scores masked before the
/// softmax. Produces the same output as the segment-restricted kernel at
/// quadratic cost in the total row count.
pub fn masked_full_attention<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    q: hlmg_tensor::Var,
    k: hlmg_tensor::Var,
    v: hlmg_tensor::Var,
    segments: &[(usize, usize)],
    heads: usize,
) -> hlmg_tensor::Result<hlmg_tensor::Var> {
    let (n, d) = tape.dims(q);
    let hd = d / heads;
    let mut seg_of = vec![0; n];
    for (si, &(s, e)) in segments.iter().enumerate() {
        seg_of[s..e].iter_mut().for_each(|x| *x = si);
    }
    let mask: Vec<bool> = (0..n * n).map(|x| seg_of[x / n] != seg_of[x % n]).collect();
    let scale = T::one() / T::from_usize(hd).expect("usize fits").sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, (h + 1) * hd)?;
        let kh = tape.slice_cols(k, h * hd, (h + 1) * hd)?;
        let vh = tape.slice_cols(v, h * hd, (h + 1) * hd)?;
        let kt = tape.transpose(kh);
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let s = tape.masked_fill(s, &mask, T::of(MASK_FILL))?;
        let p = tape.softmax(s);
        outs.push(tape.matmul(p, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Times one local-attention layer (segment-restricted kernel) against the
/// masked full-attention reference for each node count, with
/// `tokens_per_node` rows per node. Times are the minimum over `reps`.
pub fn complexity_benchmark(
    cfg: &ModelConfig,
    node_counts: &[usize],
    tokens_per_node: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if node_counts.contains(&0) || tokens_per_node == 0 {
        return Err(TrainError::Config("node counts and tokens per node must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let mut rows = Vec::with_capacity(node_counts.len());
    for &nodes in node_counts {
        let n = nodes * tokens_per_node;
        let mut rand_t =
            || Tensor::<f32>::from_fn([n, d], |_| rng.random_range(-1.0f32..1.0));
        let (q, k, v) = (rand_t(), rand_t(), rand_t());
        let segments: Vec<(usize, usize)> = (0..nodes)
            .map(|i| (i * tokens_per_node, (i + 1) * tokens_per_node))
            .collect();
        let mut local_ms = f64::INFINITY;
        let mut full_ms = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.borrowed(&q), tape.borrowed(&k), tape.borrowed(&v));
            let t = Instant::now();
            tape.segment_attention(qv, kv, vv, &segments, cfg.heads, 0.0, false, 0)?;
            local_ms = local_ms.min(t.elapsed().as_secs_f64() * 1e3);

            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.borrowed(&q), tape.borrowed(&k), tape.borrowed(&v));
            let t = Instant::now();
            masked_full_attention(&mut tape, qv, kv, vv, &segments, cfg.heads)?;
            full_ms = full_ms.min(t.elapsed().as_secs_f64() * 1e3);
        }
        let one_layer = ModelConfig {
            local_layers: 1,
            ..cfg.clone()
        };
        let (local_flops, full_flops) = attention_flops(&one_layer, &vec![tokens_per_node; nodes]);
        rows.push(BenchRow {
            nodes,
            tokens_per_node,
            local_ms,
            full_ms,
            local_flops,
            full_flops,
        });
    }
    Ok(rows)
}

pub fn write_benchmark_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut out = String::from("nodes,tokens_per_node,local_ms,full_ms,local_flops,full_flops\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{},{}",
            r.nodes, r.tokens_per_node, r.local_ms, r.full_ms, r.local_flops, r.full_flops
        );
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, GenConfig, TaskSpec};
    use crate::graph::Task;

    #[test]
    fn identity_relabeling_has_no_drop() {
        let spec = TaskSpec {
            size: 40,
            ..TaskSpec::desk(Task::EdgeExistence)
        };
        let d = build_dataset(&spec, &GenConfig::default(), 3).unwrap();
        let cfg = ModelConfig::tiny(d.vocab.len(), 2);
        let m: Model<f32> = Model::init(cfg, 1).unwrap();
        let r = robustness_eval_with(&d, &m, 3, Permutation::identity).unwrap();
        assert_eq!(r.mean_drop, 0.0);
        assert_eq!(r.max_drop, 0.0);
        assert_eq!(r.permuted.len(), 3);
    }

    #[test]
    fn masked_reference_matches_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::<f64>::from_fn([7, 4], |_| rng.random_range(-1.0..1.0));
        let segs = [(0, 3), (3, 4), (4, 7)];
        let mut tape = Tape::new();
        let x = tape.borrowed(&t);
        let a = tape.segment_attention(x, x, x, &segs, 2, 0.0, false, 0).unwrap();
        let b = masked_full_attention(&mut tape, x, x, x, &segs, 2).unwrap();
        for (p, q) in tape.value(a).iter().zip(tape.value(b)) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn twin_nodes_have_cosine_one() {
        // Nodes 1 and 2 both neighbour only node 0; their structure texts
        // differ only in their own name, which an untrained model with
        // identical name embeddings cannot tell apart.
        let spec = TaskSpec {
            size: 40,
            ..TaskSpec::desk(Task::Cycle)
        };
        let d = build_dataset(&spec, &GenConfig::default(), 3).unwrap();
        let mut m: Model<f64> = Model::init(ModelConfig::tiny(d.vocab.len(), 2), 2).unwrap();
        let tok = m.param_index("local.token_embedding").unwrap();
        let dim = m.config.dim;
        let (one, two) = (d.vocab.id("1") as usize, d.vocab.id("2") as usize);
        let row: Vec<f64> = m.params[tok].data()[one * dim..(one + 1) * dim].to_vec();
        m.params[tok].data_mut()[two * dim..(two + 1) * dim].copy_from_slice(&row);
        let g = Graph::from_edges(3, [(0, 1), (0, 2)]).unwrap();
        let t = embedding_similarity_analysis(&m, &d, &[&g], 1).unwrap();
        let two_hop = t.by_hop.iter().find(|g| g.hop == 2).unwrap();
        assert!((two_hop.mean_cosine - 1.0).abs() < 1e-3);
    }
}
