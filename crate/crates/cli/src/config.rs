//! Flat `key = value` run configuration. Values come from an optional config
//! file, then command-line flags, then `--set` pairs; later sources win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hlmg::dataset::{GenConfig, Preset, Split, TaskSpec};
use hlmg::graph::Task;
use hlmg::interpret::{FidelityConfig, LayerPolicy, Method};
use hlmg::model::{ModelConfig, Pooling};
use hlmg::train::{Precision, TrainConfig};
use serde::Serialize;

use crate::CliError;

/// Every accepted key with a one-line description, used for validation and
/// `--help` text.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "reasoning task, e.g. cycle or node_degree"),
    ("preset", "desk or paper"),
    ("seed", "master seed"),
    ("out", "output directory"),
    ("data", "dataset JSONL produced by gen"),
    ("checkpoint", "model checkpoint file"),
    ("split", "evaluation split (default test)"),
    ("size", "samples per task"),
    ("max_nodes", "largest graph size"),
    ("min_nodes", "smallest graph size"),
    ("dialect", "cgdl, adjlist or edges"),
    ("max_positions", "token limit per sequence"),
    ("draws_per_sample", "generator attempts per sample"),
    ("dim", "model width"),
    ("heads", "attention heads"),
    ("local_layers", "local block depth"),
    ("global_layers", "global block depth"),
    ("hidden_dim", "feed-forward width"),
    ("dropout", "dropout rate"),
    ("attn_dropout", "attention dropout rate"),
    ("pooling", "mean or concat"),
    ("alpha_init", "initial mixing weight"),
    ("use_global_positional", "node-order embeddings in the global block"),
    ("pre_norm", "pre-norm residual blocks"),
    ("lr", "peak learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "Adam beta1"),
    ("beta2", "Adam beta2"),
    ("eps", "Adam epsilon"),
    ("epochs", "training epochs"),
    ("batch_size", "samples per step"),
    ("clip_norm", "global gradient-norm clip, or none"),
    ("warmup_steps", "linear warmup steps"),
    ("linear_decay", "decay the learning rate to zero"),
    ("precision", "f32 or f64"),
    ("permutations", "relabeling rounds for robustness"),
    ("method", "query_attention, saliency, input_x_gradient, oracle or random"),
    ("layer_policy", "last, mean or a 0-based layer index"),
    ("sparsity", "comma-separated fidelity grid"),
    ("retain_query_nodes", "keep queried nodes in fidelity subgraphs"),
    ("max_samples", "cap on samples analysed"),
    ("nodes", "comma-separated node counts for bench"),
    ("tokens_per_node", "tokens per node for bench"),
    ("reps", "timing repetitions for bench"),
    ("samples", "samples for grad-check"),
    ("tolerance", "grad-check relative error bound"),
    ("coords", "coordinates checked per tensor"),
];

/// Parses a flat config file: `key = value` lines, `#` comments.
pub fn parse_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    parse_str(&text).map_err(|m| CliError::Usage(format!("{}: {m}", path.display())))
}

pub fn parse_str(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        out.insert(normalize_key(k), v.trim().to_string());
    }
    Ok(out)
}

pub fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

/// A resolved run: every setting the subcommand will use.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub preset: Preset,
    pub task: Option<Task>,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub spec: Option<TaskSpec>,
    pub gen: GenConfig,
    /// `vocab_size` and `num_classes` are filled in once data is known.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub permutations: usize,
    pub method: Method,
    pub layer_policy: LayerPolicy,
    pub fidelity: FidelityConfig,
    pub max_samples: Option<usize>,
    pub bench_nodes: Vec<usize>,
    pub tokens_per_node: usize,
    pub reps: usize,
    pub grad_samples: usize,
    pub tolerance: f64,
    pub coords: usize,
    /// Keys set explicitly, so checkpoint settings can be checked against
    /// them.
    pub explicit: Vec<String>,
}

struct Values(BTreeMap<String, String>);

impl Values {
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("invalid value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), CliError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim().parse::<T>().map_err(|e| {
                            CliError::Usage(format!("invalid list item `{x}` for `{key}`: {e}"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

impl RunConfig {
    pub fn resolve(command: &str, values: BTreeMap<String, String>) -> Result<Self, CliError> {
        if let Some(k) = values.keys().find(|k| !KEYS.iter().any(|(n, _)| n == k)) {
            return Err(CliError::Usage(format!("unknown config key `{k}`")));
        }
        let explicit = values.keys().cloned().collect();
        let v = Values(values);
        let preset: Preset = v.get("preset")?.unwrap_or_default();
        let task: Option<Task> = v.get("task")?;

        let spec = match task {
            Some(t) => {
                let mut s = TaskSpec::preset(preset, t);
                v.set("size", &mut s.size)?;
                v.set("max_nodes", &mut s.max_nodes)?;
                Some(s)
            }
            None => None,
        };
        let mut gen = GenConfig::default();
        v.set("min_nodes", &mut gen.min_nodes)?;
        v.set("dialect", &mut gen.dialect)?;
        v.set("max_positions", &mut gen.max_positions)?;
        v.set("draws_per_sample", &mut gen.draws_per_sample)?;

        let mut model = match preset {
            Preset::Desk => ModelConfig::desk(0, 0),
            Preset::Paper => ModelConfig::paper(0, 0),
        };
        v.set("dim", &mut model.dim)?;
        v.set("heads", &mut model.heads)?;
        v.set("local_layers", &mut model.local_layers)?;
        v.set("global_layers", &mut model.global_layers)?;
        v.set("hidden_dim", &mut model.hidden_dim)?;
        v.set("dropout", &mut model.dropout)?;
        v.set("attn_dropout", &mut model.attn_dropout)?;
        v.set::<Pooling>("pooling", &mut model.pooling)?;
        v.set("alpha_init", &mut model.alpha_init)?;
        v.set("use_global_positional", &mut model.use_global_positional)?;
        v.set("pre_norm", &mut model.pre_norm)?;
        v.set("max_positions", &mut model.max_positions)?;

        let mut train = TrainConfig::preset(preset);
        v.set("lr", &mut train.lr)?;
        v.set("weight_decay", &mut train.weight_decay)?;
        v.set("beta1", &mut train.beta1)?;
        v.set("beta2", &mut train.beta2)?;
        v.set("eps", &mut train.eps)?;
        v.set("epochs", &mut train.epochs)?;
        v.set("batch_size", &mut train.batch_size)?;
        v.set("warmup_steps", &mut train.warmup_steps)?;
        v.set("linear_decay", &mut train.linear_decay)?;
        v.set::<Precision>("precision", &mut train.precision)?;
        if let Some(c) = v.0.get("clip_norm") {
            train.clip_norm = match c.as_str() {
                "none" | "off" => None,
                _ => Some(v.get("clip_norm")?.expect("present")),
            };
        }
        let seed = v.get("seed")?.unwrap_or(0);
        train.seed = seed;
        train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;

        let layer_policy = match v.0.get("layer_policy").map(String::as_str) {
            None | Some("last") => LayerPolicy::Last,
            Some("mean") | Some("mean_layers") => LayerPolicy::MeanLayers,
            Some(_) => LayerPolicy::Layer(v.get("layer_policy")?.expect("present")),
        };
        let mut fidelity = FidelityConfig::default();
        if let Some(grid) = v.list("sparsity")? {
            fidelity.sparsity = grid;
        }
        v.set("retain_query_nodes", &mut fidelity.retain_query_nodes)?;

        Ok(Self {
            command: command.to_string(),
            version: crate::VERSION.to_string(),
            seed,
            preset,
            task,
            out: v.get("out")?.unwrap_or_else(|| PathBuf::from(format!("runs/{command}"))),
            data: v.get("data")?,
            checkpoint: v.get("checkpoint")?,
            split: v.get("split")?.unwrap_or(Split::Test),
            spec,
            gen,
            model,
            train,
            permutations: v.get("permutations")?.unwrap_or(10),
            method: v.get("method")?.unwrap_or(Method::QueryAttention),
            layer_policy,
            fidelity,
            max_samples: v.get("max_samples")?,
            bench_nodes: v.list("nodes")?.unwrap_or_else(|| vec![16, 32, 64, 128]),
            tokens_per_node: v.get("tokens_per_node")?.unwrap_or(16),
            reps: v.get("reps")?.unwrap_or(3),
            grad_samples: v.get("samples")?.unwrap_or(20),
            tolerance: v.get("tolerance")?.unwrap_or(1e-4),
            coords: v.get("coords")?.unwrap_or(16),
            explicit,
        })
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    /// Writes the resolved config and build version into `out`.
    pub fn write_provenance(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::from_io(&self.out, e))?;
        let path = self.out.join("run_config.json");
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, json + "\n").map_err(|e| CliError::from_io(&path, e))?;
        let path = self.out.join("VERSION");
        std::fs::write(&path, format!("{}\n", self.version)).map_err(|e| CliError::from_io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let m = parse_str("# run\nlr = 0.001  # peak\nbatch-size=8\n\n").unwrap();
        assert_eq!(m["lr"], "0.001");
        assert_eq!(m["batch_size"], "8");
        assert!(parse_str("lr 0.1").is_err());
    }

    #[test]
    fn later_values_win_and_unknown_keys_fail() {
        let mut m = parse_str("task = cycle\nepochs = 3").unwrap();
        m.insert("epochs".into(), "7".into());
        let rc = RunConfig::resolve("train", m).unwrap();
        assert_eq!(rc.train.epochs, 7);
        assert_eq!(rc.spec.unwrap().task, Task::Cycle);
        let bad = parse_str("colour = red").unwrap();
        assert!(matches!(RunConfig::resolve("train", bad), Err(CliError::Usage(_))));
    }

    #[test]
    fn clip_can_be_disabled() {
        let rc = RunConfig::resolve("train", parse_str("clip_norm = none").unwrap()).unwrap();
        assert_eq!(rc.train.clip_norm, None);
    }
}
