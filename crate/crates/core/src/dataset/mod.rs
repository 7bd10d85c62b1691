//! Balanced benchmark construction for the seven reasoning tasks, out-of-
//! distribution variants and JSON Lines persistence.

mod io;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    generate_graph, oracle, permute, Answer, Family, Graph, GraphError, GraphonKind, GraphonSpec,
    Permutation, Task, TaskQuery,
};
use crate::text::{
    serialize, tokenize, Dialect, NamePolicy, SerializeOptions, SerializedSample, TextError,
    TokenizedSample, Vocabulary,
};

pub use io::{load, save, vocab_path, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error(
        "{task} {split} split: class {class} still needs {missing} samples after {draws} draws"
    )]
    Starved {
        task: Task,
        split: Split,
        class: usize,
        missing: usize,
        draws: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {msg}")]
    Parse {
        line: usize,
        field: String,
        msg: String,
    },
    #[error("unsupported dataset version: expected {expected}, found {found}")]
    Version { expected: u64, found: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(format!("unknown preset `{s}` (expected desk or paper)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split `{s}` (expected train, val or test)"))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub num_classes: usize,
    /// Total samples over all three splits.
    pub size: usize,
    pub max_nodes: usize,
}

impl TaskSpec {
    /// Full-size settings: 40-node test graphs and the published class counts
    /// and dataset sizes.
    pub fn paper(task: Task) -> Self {
        let (num_classes, size) = match task {
            Task::ShortestDistance => (6, 20_000),
            Task::Cycle => (2, 4_000),
            Task::EdgeCount => (70, 14_000),
            Task::Reachable => (2, 4_000),
            Task::EdgeExistence => (2, 4_000),
            Task::Components => (38, 19_000),
            Task::NodeDegree => (39, 8_000),
        };
        Self {
            task,
            num_classes,
            size,
            max_nodes: 40,
        }
    }

    /// CPU-sized settings: at most 12 nodes, class ranges shrunk to what such
    /// graphs can express.
    pub fn desk(task: Task) -> Self {
        let max_nodes: usize = 12;
        let (num_classes, size) = match task {
            Task::ShortestDistance => (6, 4_000),
            Task::Cycle => (2, 2_000),
            Task::EdgeCount => ((max_nodes * (max_nodes - 1) / 2).div_ceil(10), 2_100),
            Task::Reachable => (2, 2_000),
            Task::EdgeExistence => (2, 2_000),
            Task::Components => (max_nodes, 2_400),
            Task::NodeDegree => (max_nodes, 2_400),
        };
        Self {
            task,
            num_classes,
            size,
            max_nodes,
        }
    }

    pub fn preset(preset: Preset, task: Task) -> Self {
        match preset {
            Preset::Desk => Self::desk(task),
            Preset::Paper => Self::paper(task),
        }
    }

    /// Class index of an oracle answer, or `None` when the answer falls
    /// outside the class range.
    pub fn class_of(&self, answer: Answer) -> Option<usize> {
        let class = match (self.task, answer) {
            (Task::ShortestDistance, Answer::Distance(None)) => 0,
            (Task::ShortestDistance, Answer::Distance(Some(0))) => return None,
            (Task::ShortestDistance, Answer::Distance(Some(d))) => d,
            (Task::Cycle | Task::Reachable | Task::EdgeExistence, Answer::Bool(b)) => b as usize,
            // 1..=10 edges is class 0, 11..=20 class 1, and so on; the empty
            // graph joins class 0.
            (Task::EdgeCount, Answer::Count(m)) => m.div_ceil(10).max(1) - 1,
            (Task::Components, Answer::Count(c)) => c.checked_sub(1)?,
            (Task::NodeDegree, Answer::Count(d)) => d,
            _ => return None,
        };
        (class < self.num_classes).then_some(class)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: &str| Err(DatasetError::InvalidSpec(msg.to_string()));
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.max_nodes < 2 {
            return bad("max_nodes must be at least 2");
        }
        if self.size < 10 * self.num_classes {
            return bad("size must give every split at least one sample per class");
        }
        Ok(())
    }
}

/// One entry of the generator mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Family(Family),
    Graphon(GraphonKind),
}

impl Source {
    /// The seven pre-defined families followed by the eleven graphons.
    pub fn all() -> Vec<Source> {
        Family::PREDEFINED
            .iter()
            .map(|&f| Source::Family(f))
            .chain(GraphonKind::ALL.iter().map(|&k| Source::Graphon(k)))
            .collect()
    }

    pub fn name(&self) -> String {
        match self {
            Source::Family(f) => f.name().to_string(),
            Source::Graphon(k) => format!("graphon_{}", k.name()),
        }
    }

    fn min_nodes(&self) -> usize {
        match self {
            Source::Family(f) => f.min_nodes(),
            Source::Graphon(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub min_nodes: usize,
    pub dialect: Dialect,
    /// Drawn uniformly per candidate graph.
    pub sources: Vec<Source>,
    /// Upper bound on sequence length passed to the tokenizer.
    pub max_positions: usize,
    /// Candidate draws allowed per requested sample before giving up.
    pub draws_per_sample: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            min_nodes: 4,
            dialect: Dialect::Cgdl,
            sources: Source::all(),
            max_positions: 4096,
            draws_per_sample: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub graph: Graph,
    pub query: TaskQuery,
    pub answer: Answer,
    pub source: String,
    pub serialized: SerializedSample,
    /// Token ids and segment map, with label and ground truth filled in.
    pub tokens: TokenizedSample,
}

impl Sample {
    pub fn label(&self) -> usize {
        self.tokens.label
    }

    pub fn gt_nodes(&self) -> Option<&BTreeSet<usize>> {
        self.tokens.gt_nodes.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub gen: GenConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn tokens(&self, split: Split) -> Vec<&TokenizedSample> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| &s.tokens)
            .collect()
    }

    /// Re-serializes a graph/query pair the way this dataset does and
    /// tokenizes it against the dataset vocabulary.
    pub fn encode(
        &self,
        graph: &Graph,
        query: &TaskQuery,
        opts: &SerializeOptions,
    ) -> Result<TokenizedSample, DatasetError> {
        let serialized = serialize(graph, query, opts)?;
        Ok(tokenize(&serialized, &self.vocab, self.gen.max_positions)?)
    }

    pub fn options(&self) -> SerializeOptions {
        SerializeOptions::new(self.gen.dialect)
    }
}

/// Sample counts per split: 80/10/10 with the remainder going to train.
pub fn split_sizes(size: usize) -> [(Split, usize); 3] {
    let val = size / 10;
    let test = size / 10;
    [
        (Split::Train, size - val - test),
        (Split::Val, val),
        (Split::Test, test),
    ]
}

fn per_class_quota(total: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| total / classes + usize::from(c < total % classes))
        .collect()
}

struct Candidate {
    graph: Graph,
    query: TaskQuery,
    answer: Answer,
    gt_nodes: Option<BTreeSet<usize>>,
    class: usize,
    source: String,
}

fn draw_candidate(
    spec: &TaskSpec,
    gen: &GenConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Candidate>, DatasetError> {
    let source = *gen
        .sources
        .choose(rng)
        .ok_or_else(|| DatasetError::InvalidSpec("empty source list".into()))?;
    if n < source.min_nodes() {
        return Ok(None);
    }
    let graph_seed = rng.random();
    let graph = match source {
        Source::Family(f) => generate_graph(f, n, None, graph_seed)?,
        Source::Graphon(kind) => {
            let g = GraphonSpec::sample(kind, rng);
            generate_graph(Family::Graphon, n, Some(&g), graph_seed)?
        }
    };
    let query = TaskQuery::default_for(spec.task);
    if query.nodes().iter().any(|&i| i >= n) {
        return Ok(None);
    }
    let answer = oracle(&graph, &query)?.answer;
    let Some(class) = spec.class_of(answer) else {
        return Ok(None);
    };
    // Hide the query's fixed node ids behind a random relabeling.
    let p = Permutation::random(n, rng);
    let graph = permute(&graph, &p)?;
    let query = query.permuted(&p);
    let truth = oracle(&graph, &query)?;
    Ok(Some(Candidate {
        graph,
        query,
        answer: truth.answer,
        gt_nodes: truth.gt_nodes,
        class,
        source: source.name(),
    }))
}

fn split_seed(seed: u64, split: Split) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Rejection-samples class-balanced train/val/test splits. Test graphs have
/// exactly `spec.max_nodes` nodes; the others between `gen.min_nodes` and
/// `spec.max_nodes`.
pub fn build_dataset(spec: &TaskSpec, gen: &GenConfig, seed: u64) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    if gen.min_nodes < 2 || gen.min_nodes > spec.max_nodes {
        return Err(DatasetError::InvalidSpec(format!(
            "min_nodes {} outside 2..={}",
            gen.min_nodes, spec.max_nodes
        )));
    }
    let mut candidates = Vec::with_capacity(spec.size);
    for (split, count) in split_sizes(spec.size) {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, split));
        let mut missing = per_class_quota(count, spec.num_classes);
        let mut remaining = count;
        let budget = gen.draws_per_sample.saturating_mul(count.max(1));
        let mut draws = 0;
        while remaining > 0 {
            if draws == budget {
                let class = missing.iter().position(|&m| m > 0).unwrap_or(0);
                return Err(DatasetError::Starved {
                    task: spec.task,
                    split,
                    class,
                    missing: missing[class],
                    draws,
                });
            }
            draws += 1;
            let n = if split == Split::Test {
                spec.max_nodes
            } else {
                rng.random_range(gen.min_nodes..=spec.max_nodes)
            };
            if let Some(c) = draw_candidate(spec, gen, n, &mut rng)? {
                if missing[c.class] > 0 {
                    missing[c.class] -= 1;
                    remaining -= 1;
                    candidates.push((split, c));
                }
            }
        }
    }
    let opts = SerializeOptions::new(gen.dialect);
    let serialized: Vec<SerializedSample> = candidates
        .iter()
        .map(|(_, c)| serialize(&c.graph, &c.query, &opts))
        .collect::<Result<_, _>>()?;
    let vocab = Vocabulary::build(&serialized)?;
    let mut samples = Vec::with_capacity(candidates.len());
    for (id, ((split, c), s)) in candidates.into_iter().zip(serialized).enumerate() {
        let mut tokens = tokenize(&s, &vocab, gen.max_positions)?;
        tokens.label = c.class;
        tokens.gt_nodes = c.gt_nodes;
        samples.push(Sample {
            id,
            split,
            graph: c.graph,
            query: c.query,
            answer: c.answer,
            source: c.source,
            serialized: s,
            tokens,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        gen: gen.clone(),
        seed,
        samples,
        vocab,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OodKind {
    /// Random alphanumeric node names of up to four characters.
    RenamedNodes,
    DialectShift(Dialect),
}

/// Re-serializes every test sample with `options(sample)`, extending the
/// vocabulary with any new words. Labels and ground truths are untouched.
pub fn reserialize_test_split(
    d: &Dataset,
    mut options: impl FnMut(&Sample) -> SerializeOptions,
) -> Result<Dataset, DatasetError> {
    let mut out = d.clone();
    let mut fresh = Vec::new();
    for (i, s) in d.samples.iter().enumerate() {
        if s.split == Split::Test {
            fresh.push((i, serialize(&s.graph, &s.query, &options(s))?));
        }
    }
    for (_, s) in &fresh {
        out.vocab.extend_from(s);
    }
    for (i, serialized) in fresh {
        let sample = &mut out.samples[i];
        let mut tokens = tokenize(&serialized, &out.vocab, d.gen.max_positions)?;
        tokens.label = sample.tokens.label;
        tokens.gt_nodes = sample.tokens.gt_nodes.clone();
        sample.tokens = tokens;
        sample.serialized = serialized;
    }
    Ok(out)
}

pub fn make_ood_variant(d: &Dataset, kind: &OodKind, seed: u64) -> Result<Dataset, DatasetError> {
    if d.split(Split::Test).is_empty() {
        return Err(DatasetError::InvalidSpec("dataset has no test split".into()));
    }
    match kind {
        OodKind::RenamedNodes => reserialize_test_split(d, |s| SerializeOptions {
            dialect: s.serialized.dialect,
            names: NamePolicy::RandomString {
                seed: seed ^ (s.id as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
            },
            ..Default::default()
        }),
        OodKind::DialectShift(dialect) => reserialize_test_split(d, |s| SerializeOptions {
            dialect: *dialect,
            names: NamePolicy::Explicit(s.serialized.names.clone()),
            ..Default::default()
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> Dataset {
        let spec = TaskSpec {
            size: 200,
            ..TaskSpec::desk(task)
        };
        build_dataset(&spec, &GenConfig::default(), 5).unwrap()
    }

    #[test]
    fn class_maps() {
        let ec = TaskSpec::desk(Task::EdgeCount);
        assert_eq!(ec.class_of(Answer::Count(10)), Some(0));
        assert_eq!(ec.class_of(Answer::Count(1)), Some(0));
        assert_eq!(ec.class_of(Answer::Count(11)), Some(1));
        assert_eq!(ec.class_of(Answer::Count(66)), Some(6));
        let comp = TaskSpec::desk(Task::Components);
        assert_eq!(comp.class_of(Answer::Count(1)), Some(0));
        let dist = TaskSpec::desk(Task::ShortestDistance);
        assert_eq!(dist.class_of(Answer::Distance(None)), Some(0));
        assert_eq!(dist.class_of(Answer::Distance(Some(5))), Some(5));
        assert_eq!(dist.class_of(Answer::Distance(Some(6))), None);
    }

    #[test]
    fn splits_are_balanced_and_sized() {
        let d = tiny(Task::ShortestDistance);
        assert_eq!(d.samples.len(), 200);
        for (split, count) in split_sizes(200) {
            let part = d.split(split);
            assert_eq!(part.len(), count);
            let mut hist = vec![0usize; d.spec.num_classes];
            for s in &part {
                hist[s.label()] += 1;
            }
            let lo = *hist.iter().min().unwrap();
            let hi = *hist.iter().max().unwrap();
            assert!(hi - lo <= 1, "{split}: {hist:?}");
        }
        for s in d.split(Split::Test) {
            assert_eq!(s.graph.num_nodes(), d.spec.max_nodes);
        }
    }

    #[test]
    fn starving_class_is_named() {
        let spec = TaskSpec {
            size: 60,
            max_nodes: 3,
            ..TaskSpec::desk(Task::ShortestDistance)
        };
        let gen = GenConfig {
            min_nodes: 3,
            draws_per_sample: 20,
            ..Default::default()
        };
        match build_dataset(&spec, &gen, 1) {
            Err(DatasetError::Starved { class, .. }) => assert!(class >= 3),
            other => panic!("expected starvation, got {other:?}"),
        }
    }

    #[test]
    fn ood_variants_keep_labels() {
        let d = tiny(Task::EdgeExistence);
        let renamed = make_ood_variant(&d, &OodKind::RenamedNodes, 3).unwrap();
        let shifted = make_ood_variant(&d, &OodKind::DialectShift(Dialect::Edges), 3).unwrap();
        for ((a, b), c) in d.samples.iter().zip(&renamed.samples).zip(&shifted.samples) {
            assert_eq!(a.label(), b.label());
            assert_eq!(a.gt_nodes(), b.gt_nodes());
            assert_eq!(a.label(), c.label());
            if a.split == Split::Test {
                assert_ne!(a.serialized.names, b.serialized.names);
                assert_eq!(c.serialized.dialect, Dialect::Edges);
                assert!(c.serialized.text().starts_with('('));
            } else {
                assert_eq!(a, b);
            }
        }
        let same = make_ood_variant(&d, &OodKind::DialectShift(Dialect::Cgdl), 3).unwrap();
        assert_eq!(same, d);
    }
}
