//! Node-importance attribution, Recall@k, layerwise attention curves and the
//! fidelity metric.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use hlmg_tensor::{Scalar, Tape, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, Sample};
use crate::model::{argmax, Model, ModelError};
use crate::text::{Owner, TokenizedSample};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("ground-truth node set is empty")]
    EmptyGroundTruth,
    #[error("sample has no node segments")]
    NoNodes,
    #[error("global layer {layer} out of range ({layers} layers)")]
    BadLayer { layer: usize, layers: usize },
    #[error("sparsity {0} outside [0, 1]")]
    BadSparsity(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, InterpretError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    QueryAttention,
    Saliency,
    InputXGradient,
    /// Ground-truth nodes first; a reference ranking, not an explainer.
    Oracle,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::QueryAttention => "query_attention",
            Method::Saliency => "saliency",
            Method::InputXGradient => "input_x_gradient",
            Method::Oracle => "oracle",
            Method::Random => "random",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let all = [
            Method::QueryAttention,
            Method::Saliency,
            Method::InputXGradient,
            Method::Oracle,
            Method::Random,
        ];
        let key = s.replace('-', "_");
        all.into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    #[default]
    Last,
    MeanLayers,
    /// A single global layer, 0-based.
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationResult {
    /// Node ids in ascending order.
    pub nodes: Vec<usize>,
    /// Importance of `nodes[i]`.
    pub node_scores: Vec<f64>,
    /// Node ids by descending score, ties by node id.
    pub ranking: Vec<usize>,
    pub method: Method,
    pub layer: Option<usize>,
}

impl InterpretationResult {
    /// Builds a result from `(node, score)` pairs in any order.
    pub fn from_scores(mut scored: Vec<(usize, f64)>, method: Method, layer: Option<usize>) -> Self {
        scored.sort_by_key(|&(n, _)| n);
        let mut ranking: Vec<(usize, f64)> = scored.clone();
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            nodes: scored.iter().map(|&(n, _)| n).collect(),
            node_scores: scored.iter().map(|&(_, s)| s).collect(),
            ranking: ranking.into_iter().map(|(n, _)| n).collect(),
            method,
            layer,
        }
    }

    pub fn score(&self, node: usize) -> Option<f64> {
        self.nodes
            .binary_search(&node)
            .ok()
            .map(|i| self.node_scores[i])
    }

    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

/// Head-averaged query-row attention mass on each node's pooled embedding.
pub fn query_attention_importance<T: Scalar>(
    sample: &TokenizedSample,
    model: &Model<T>,
    policy: LayerPolicy,
) -> Result<InterpretationResult> {
    let inspect = model.inspect(sample)?;
    let layers = inspect.query_attention.len();
    let to_f64 = |x: &T| x.to_f64().unwrap_or(f64::NAN);
    let (row, layer): (Vec<f64>, Option<usize>) = match policy {
        LayerPolicy::Last => (
            inspect.query_attention[layers - 1].iter().map(to_f64).collect(),
            Some(layers - 1),
        ),
        LayerPolicy::Layer(l) => {
            let r = inspect
                .query_attention
                .get(l)
                .ok_or(InterpretError::BadLayer { layer: l, layers })?;
            (r.iter().map(to_f64).collect(), Some(l))
        }
        LayerPolicy::MeanLayers => {
            let mut acc = vec![0.0; inspect.query_attention[0].len()];
            for r in &inspect.query_attention {
                for (a, x) in acc.iter_mut().zip(r) {
                    *a += to_f64(x) / layers as f64;
                }
            }
            (acc, None)
        }
    };
    if inspect.node_order.is_empty() {
        return Err(InterpretError::NoNodes);
    }
    let scored = inspect.node_order.iter().copied().zip(row).collect();
    Ok(InterpretationResult::from_scores(scored, Method::QueryAttention, layer))
}

/// Gradient of the predicted-class logit with respect to the input token
/// embeddings, reduced per token (L2 norm or gradient·embedding) and then
/// averaged over each node's tokens.
pub fn gradient_importance<T: Scalar>(
    sample: &TokenizedSample,
    model: &Model<T>,
    method: Method,
) -> Result<InterpretationResult> {
    if !matches!(method, Method::Saliency | Method::InputXGradient) {
        return Err(InterpretError::Model(ModelError::Config(format!(
            "{} is not a gradient method",
            method.name()
        ))));
    }
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, sample, false, 0)?;
    let logits = tape.value(f.logits).to_vec();
    let mut seed = vec![T::zero(); logits.len()];
    seed[argmax(&logits)] = T::one();
    tape.backward_with(f.logits, seed)?;
    let (rows, dim) = tape.dims(f.embeddings);
    let zeros = vec![T::zero(); rows * dim];
    let grad = tape.grad(f.embeddings).unwrap_or(&zeros);
    let emb = tape.value(f.embeddings);
    let token_score = |t: usize| -> f64 {
        let g = &grad[t * dim..(t + 1) * dim];
        match method {
            Method::Saliency => g
                .iter()
                .map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2))
                .sum::<f64>()
                .sqrt(),
            _ => g
                .iter()
                .zip(&emb[t * dim..(t + 1) * dim])
                .map(|(a, b)| (*a * *b).to_f64().unwrap_or(f64::NAN))
                .sum(),
        }
    };
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for span in &sample.spans {
        if let Owner::Node(node) = span.owner {
            let e = sums.entry(node).or_default();
            for t in span.start..span.end {
                e.0 += token_score(t);
                e.1 += 1;
            }
        }
    }
    if sums.is_empty() {
        return Err(InterpretError::NoNodes);
    }
    let scored = sums
        .into_iter()
        .map(|(n, (s, c))| (n, s / c.max(1) as f64))
        .collect();
    Ok(InterpretationResult::from_scores(scored, method, None))
}

/// Ranking with the ground-truth nodes first, each group by node id.
pub fn oracle_ranking(sample: &TokenizedSample) -> Result<InterpretationResult> {
    let gt = sample.gt_nodes.as_ref().ok_or(InterpretError::EmptyGroundTruth)?;
    let scored = node_ids(sample)?
        .into_iter()
        .map(|n| (n, if gt.contains(&n) { 1.0 } else { 0.0 }))
        .collect();
    Ok(InterpretationResult::from_scores(scored, Method::Oracle, None))
}

/// Uniformly random ranking; scores are descending ranks.
pub fn random_ranking(sample: &TokenizedSample, seed: u64) -> Result<InterpretationResult> {
    let mut nodes = node_ids(sample)?;
    nodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = nodes.len();
    let scored = nodes
        .into_iter()
        .enumerate()
        .map(|(i, node)| (node, (n - i) as f64))
        .collect();
    Ok(InterpretationResult::from_scores(scored, Method::Random, None))
}

fn node_ids(sample: &TokenizedSample) -> Result<Vec<usize>> {
    let mut nodes = sample.nodes();
    nodes.sort_unstable();
    nodes.dedup();
    if nodes.is_empty() {
        return Err(InterpretError::NoNodes);
    }
    Ok(nodes)
}

/// Dispatches to the attribution for `method`. `seed` only affects
/// [`Method::Random`].
pub fn explain<T: Scalar>(
    sample: &TokenizedSample,
    model: &Model<T>,
    method: Method,
    policy: LayerPolicy,
    seed: u64,
) -> Result<InterpretationResult> {
    match method {
        Method::QueryAttention => query_attention_importance(sample, model, policy),
        Method::Saliency | Method::InputXGradient => gradient_importance(sample, model, method),
        Method::Oracle => oracle_ranking(sample),
        Method::Random => random_ranking(sample, seed),
    }
}

/// `Recall(k) = |top_k ∩ gt| / |gt|` for k = 1..n.
pub fn recall_at_k(result: &InterpretationResult, gt: &BTreeSet<usize>) -> Result<Vec<f64>> {
    if gt.is_empty() {
        return Err(InterpretError::EmptyGroundTruth);
    }
    let mut hits = 0;
    Ok(result
        .ranking
        .iter()
        .map(|n| {
            if gt.contains(n) {
                hits += 1;
            }
            hits as f64 / gt.len() as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityConfig {
    pub sparsity: Vec<f64>,
    /// Keep the queried nodes even when they rank outside the top k.
    pub retain_query_nodes: bool,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            sparsity: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            retain_query_nodes: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub sparsity: Vec<f64>,
    pub fidelity: Vec<f64>,
    /// Samples contributing to each point; samples whose k rounds to zero
    /// are skipped.
    pub counts: Vec<usize>,
    pub notes: Vec<String>,
}

/// Mean over samples of `1(ŷ = y) − 1(ŷᵏ = y)`, where `ŷᵏ` is the prediction
/// on the text of the subgraph induced by the top `k = round((1 − s)·n)`
/// ranked nodes.
pub fn fidelity<T: Scalar>(
    dataset: &Dataset,
    samples: &[&Sample],
    model: &Model<T>,
    mut provider: impl FnMut(&Sample) -> Result<InterpretationResult>,
    cfg: &FidelityConfig,
) -> Result<FidelityReport> {
    if let Some(&s) = cfg.sparsity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(InterpretError::BadSparsity(s));
    }
    let mut sums = vec![0.0; cfg.sparsity.len()];
    let mut counts = vec![0usize; cfg.sparsity.len()];
    let mut skipped = vec![0usize; cfg.sparsity.len()];
    let base_opts = dataset.options();
    for sample in samples {
        let n = sample.graph.num_nodes();
        let y = sample.label();
        let full_ok = model.predict(&sample.tokens)? == y;
        let ranking = provider(sample)?;
        for (i, &s) in cfg.sparsity.iter().enumerate() {
            let k = ((1.0 - s) * n as f64).round() as usize;
            if k == 0 {
                skipped[i] += 1;
                continue;
            }
            let mut keep: BTreeSet<usize> = ranking.top_k(k).iter().copied().collect();
            if cfg.retain_query_nodes {
                keep.extend(sample.query.nodes());
            }
            let kept_ok = if keep.len() >= n {
                full_ok
            } else {
                let opts = crate::text::SerializeOptions {
                    keep: Some(keep),
                    ..base_opts.clone()
                };
                let tokens = dataset.encode(&sample.graph, &sample.query, &opts)?;
                model.predict(&tokens)? == y
            };
            sums[i] += f64::from(u8::from(full_ok)) - f64::from(u8::from(kept_ok));
            counts[i] += 1;
        }
    }
    let notes = cfg
        .sparsity
        .iter()
        .zip(&skipped)
        .filter(|(_, &c)| c > 0)
        .map(|(s, c)| format!("sparsity {s}: {c} samples skipped (k = 0)"))
        .collect();
    Ok(FidelityReport {
        sparsity: cfg.sparsity.clone(),
        fidelity: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect(),
        counts,
        notes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub layer: usize,
    /// Per-node query attention on ground-truth nodes, averaged over nodes
    /// then samples.
    pub gt_mean: f64,
    pub non_gt_mean: f64,
    /// Total row mass on ground-truth nodes, non-ground-truth nodes and the
    /// query itself, averaged over samples.
    pub gt_mass: f64,
    pub non_gt_mass: f64,
    pub self_mass: f64,
    pub samples: usize,
}

/// Per global layer, mean query attention on ground-truth versus other
/// nodes. Samples without ground truth are skipped; samples where every node
/// is ground truth contribute nothing to `non_gt_mean`.
pub fn layerwise_attention_curve<T: Scalar>(
    samples: &[&TokenizedSample],
    model: &Model<T>,
) -> Result<Vec<LayerCurve>> {
    let layers = model.config.global_layers;
    let mut curves: Vec<LayerCurve> = (0..layers)
        .map(|layer| LayerCurve {
            layer,
            gt_mean: 0.0,
            non_gt_mean: 0.0,
            gt_mass: 0.0,
            non_gt_mass: 0.0,
            self_mass: 0.0,
            samples: 0,
        })
        .collect();
    let mut non_gt_samples = vec![0usize; layers];
    for sample in samples {
        let Some(gt) = sample.gt_nodes.as_ref().filter(|g| !g.is_empty()) else {
            continue;
        };
        let inspect = model.inspect(sample)?;
        for (l, row) in inspect.query_attention.iter().enumerate() {
            let row: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
            let (mut gs, mut gc, mut ns, mut nc) = (0.0, 0, 0.0, 0);
            for (node, w) in inspect.node_order.iter().zip(&row) {
                if gt.contains(node) {
                    gs += w;
                    gc += 1;
                } else {
                    ns += w;
                    nc += 1;
                }
            }
            let c = &mut curves[l];
            c.gt_mass += gs;
            c.non_gt_mass += ns;
            c.self_mass += row.last().copied().unwrap_or(0.0);
            if gc > 0 {
                c.gt_mean += gs / gc as f64;
            }
            if nc > 0 {
                c.non_gt_mean += ns / nc as f64;
                non_gt_samples[l] += 1;
            }
            c.samples += 1;
        }
    }
    for (c, &m) in curves.iter_mut().zip(&non_gt_samples) {
        let s = c.samples.max(1) as f64;
        c.gt_mean /= s;
        c.gt_mass /= s;
        c.non_gt_mass /= s;
        c.self_mass /= s;
        c.non_gt_mean /= m.max(1) as f64;
    }
    Ok(curves)
}

fn write_csv(path: &Path, body: String) -> Result<()> {
    std::fs::write(path, body).map_err(|source| InterpretError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Rows `sample_id,k,recall`.
pub fn write_recall_csv(curves: &[(usize, Vec<f64>)], path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,k,recall\n");
    for (id, curve) in curves {
        for (k, r) in curve.iter().enumerate() {
            let _ = writeln!(out, "{id},{},{r}", k + 1);
        }
    }
    write_csv(path, out)
}

/// Rows `sparsity,fidelity`.
pub fn write_fidelity_csv(report: &FidelityReport, path: &Path) -> Result<()> {
    let mut out = String::from("sparsity,fidelity\n");
    for ((s, f), &c) in report.sparsity.iter().zip(&report.fidelity).zip(&report.counts) {
        if c > 0 {
            let _ = writeln!(out, "{s},{f}");
        }
    }
    write_csv(path, out)
}

/// Rows `layer,group,mean_score` with groups `gt` and `non_gt`.
pub fn write_layer_csv(curves: &[LayerCurve], path: &Path) -> Result<()> {
    let mut out = String::from("layer,group,mean_score\n");
    for c in curves {
        let _ = writeln!(out, "{},gt,{}", c.layer, c.gt_mean);
        let _ = writeln!(out, "{},non_gt,{}", c.layer, c.non_gt_mean);
    }
    write_csv(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, GenConfig, Split, TaskSpec};
    use crate::graph::Task;
    use crate::model::ModelConfig;

    fn small(task: Task) -> Dataset {
        let spec = TaskSpec {
            size: 150,
            ..TaskSpec::desk(task)
        };
        build_dataset(&spec, &GenConfig::default(), 5).unwrap()
    }

    #[test]
    fn recall_examples() {
        let r = InterpretationResult::from_scores(
            vec![(0, 0.1), (1, 0.9), (2, 0.5), (3, 0.5)],
            Method::Oracle,
            None,
        );
        assert_eq!(r.ranking, vec![1, 2, 3, 0]);
        let curve = recall_at_k(&r, &BTreeSet::from([1, 2])).unwrap();
        assert_eq!(curve, vec![0.5, 1.0, 1.0, 1.0]);
        assert!(matches!(
            recall_at_k(&r, &BTreeSet::new()),
            Err(InterpretError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn attention_scores_and_self_sum_to_one() {
        let d = small(Task::EdgeExistence);
        let m: Model<f64> = Model::init(ModelConfig::tiny(d.vocab.len(), 2), 3).unwrap();
        let s = &d.samples[0].tokens;
        let inspect = m.inspect(s).unwrap();
        for row in &inspect.query_attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let r = query_attention_importance(s, &m, LayerPolicy::MeanLayers).unwrap();
        let mut ids = r.ranking.clone();
        ids.sort_unstable();
        assert_eq!(ids, r.nodes);
    }

    #[test]
    fn zero_head_gives_zero_gradient_scores() {
        let d = small(Task::NodeDegree);
        let mut m: Model<f64> = Model::init(ModelConfig::tiny(d.vocab.len(), 12), 3).unwrap();
        let out = m.param_index("head.out.weight").unwrap();
        m.params[out].data_mut().iter_mut().for_each(|x| *x = 0.0);
        for method in [Method::Saliency, Method::InputXGradient] {
            let r = gradient_importance(&d.samples[0].tokens, &m, method).unwrap();
            assert!(r.node_scores.iter().all(|&x| x == 0.0), "{method:?}");
        }
        m = Model::init(ModelConfig::tiny(d.vocab.len(), 12), 4).unwrap();
        let a = gradient_importance(&d.samples[1].tokens, &m, Method::Saliency).unwrap();
        let b = gradient_importance(&d.samples[1].tokens, &m, Method::Saliency).unwrap();
        assert_eq!(a, b);
        assert!(a.node_scores.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn fidelity_at_zero_sparsity_is_zero() {
        let d = small(Task::EdgeExistence);
        let m: Model<f32> = Model::init(ModelConfig::tiny(d.vocab.len(), 2), 3).unwrap();
        let test = d.split(Split::Test);
        let cfg = FidelityConfig::default();
        let r = fidelity(&d, &test, &m, |s| random_ranking(&s.tokens, s.id as u64), &cfg).unwrap();
        assert_eq!(r.fidelity[0], 0.0);
        assert!(r.fidelity.iter().all(|f| (-1.0..=1.0).contains(f)));
    }
}
