use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Dataset, DatasetError, GenConfig, Sample, Split, TaskSpec};
use crate::graph::{oracle, Graph, TaskQuery};
use crate::text::{
    serialize, tokenize, Dialect, NamePolicy, Owner, SerializeOptions, Span, SpanKind, Vocabulary,
};

pub const FORMAT_VERSION: u64 = 1;

/// The vocabulary lives next to the dataset: `data.jsonl` → `data.vocab.json`.
pub fn vocab_path(path: &Path) -> PathBuf {
    path.with_extension("vocab.json")
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_features: Option<Vec<Vec<(String, String)>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_features: Option<Vec<(usize, usize, String)>>,
}

impl GraphRecord {
    fn from_graph(g: &Graph) -> Self {
        let node_features = g.has_node_features().then(|| {
            (0..g.num_nodes())
                .map(|i| g.node_features(i).unwrap_or(&[]).to_vec())
                .collect()
        });
        let edge_features = g.has_edge_features().then(|| {
            g.edges()
                .filter_map(|(a, b)| g.edge_feature(a, b).map(|f| (a, b, f.to_string())))
                .collect()
        });
        Self {
            num_nodes: g.num_nodes(),
            edges: g.edges().collect(),
            node_features,
            edge_features,
        }
    }

    fn into_graph(self) -> Result<Graph, DatasetError> {
        let mut g = Graph::from_edges(self.num_nodes, self.edges)?;
        if let Some(features) = self.node_features {
            for (i, f) in features.into_iter().enumerate() {
                g.set_node_features(i, f)?;
            }
        }
        for (a, b, f) in self.edge_features.unwrap_or_default() {
            g.set_edge_feature(a, b, f)?;
        }
        Ok(g)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn segment_json(s: &Span) -> Value {
    let owner = match s.owner {
        Owner::Node(i) => json!(i),
        Owner::Query => json!("query"),
    };
    json!([s.start, s.end, owner, s.kind])
}

fn sample_json(s: &Sample) -> Value {
    json!({
        "id": s.id,
        "split": s.split,
        "text": s.serialized.text(),
        "segments": s.tokens.spans.iter().map(segment_json).collect::<Vec<_>>(),
        "label": s.tokens.label,
        "gt_nodes": s.tokens.gt_nodes,
        "graph": GraphRecord::from_graph(&s.graph),
        "query": s.query,
        "names": s.serialized.names,
        "dialect": s.serialized.dialect,
        "source": s.source,
    })
}

/// Writes the dataset as JSON Lines plus its vocabulary file.
pub fn save(d: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let header = json!({
        "version": FORMAT_VERSION,
        "task": d.spec.task,
        "num_classes": d.spec.num_classes,
        "dialect": d.gen.dialect,
        "seed": d.seed,
        "size": d.spec.size,
        "max_nodes": d.spec.max_nodes,
        "gen": d.gen,
    });
    let mut write_line = |v: &Value| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")
    };
    write_line(&header).map_err(|e| io_err(path, e))?;
    for s in &d.samples {
        write_line(&sample_json(s)).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    let vp = vocab_path(path);
    let json = serde_json::to_string(&d.vocab).expect("vocabulary serializes");
    std::fs::write(&vp, json).map_err(|e| io_err(&vp, e))
}

fn parse_err(line: usize, field: &str, msg: impl ToString) -> DatasetError {
    DatasetError::Parse {
        line,
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, line: usize) -> Result<T, DatasetError> {
    let v = obj.get(name).ok_or_else(|| parse_err(line, name, "missing"))?;
    serde_json::from_value(v.clone()).map_err(|e| parse_err(line, name, e))
}

fn object(text: &str, line: usize) -> Result<Map<String, Value>, DatasetError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(parse_err(line, "<line>", "expected a JSON object")),
        Err(e) => Err(parse_err(line, "<line>", e)),
    }
}

fn parse_segment(v: &Value, line: usize) -> Result<Span, DatasetError> {
    let bad = || parse_err(line, "segments", format!("malformed segment {v}"));
    let a = v.as_array().filter(|a| a.len() == 4).ok_or_else(bad)?;
    let start = a[0].as_u64().ok_or_else(bad)? as usize;
    let end = a[1].as_u64().ok_or_else(bad)? as usize;
    let owner = match &a[2] {
        Value::String(s) if s == "query" => Owner::Query,
        other => Owner::Node(other.as_u64().ok_or_else(bad)? as usize),
    };
    let kind: SpanKind = serde_json::from_value(a[3].clone()).map_err(|_| bad())?;
    Ok(Span {
        start,
        end,
        owner,
        kind,
    })
}

/// Reads a dataset written by [`save`]. Every sample is re-serialized and
/// re-tokenized against the stored vocabulary and its label recomputed, so a
/// file whose fields disagree is rejected with the offending line.
pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    let vp = vocab_path(path);
    let vocab_text = std::fs::read_to_string(&vp).map_err(|e| io_err(&vp, e))?;
    let vocab: Vocabulary = serde_json::from_str(&vocab_text).map_err(|e| parse_err(0, "vocab", e))?;

    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_text = lines
        .next()
        .ok_or_else(|| parse_err(1, "<header>", "empty file"))?
        .map_err(|e| io_err(path, e))?;
    let header = object(&header_text, 1)?;
    let version: u64 = field(&header, "version", 1)?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let spec = TaskSpec {
        task: field(&header, "task", 1)?,
        num_classes: field(&header, "num_classes", 1)?,
        size: field(&header, "size", 1)?,
        max_nodes: field(&header, "max_nodes", 1)?,
    };
    let gen: GenConfig = field(&header, "gen", 1)?;
    let seed: u64 = field(&header, "seed", 1)?;

    let mut samples = Vec::new();
    for (i, text) in lines.enumerate() {
        let line = i + 2;
        let text = text.map_err(|e| io_err(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let obj = object(&text, line)?;
        let graph = field::<GraphRecord>(&obj, "graph", line)?
            .into_graph()
            .map_err(|e| parse_err(line, "graph", e))?;
        let query: TaskQuery = field(&obj, "query", line)?;
        let names: Vec<String> = field(&obj, "names", line)?;
        let dialect: Dialect = field(&obj, "dialect", line)?;
        let opts = SerializeOptions {
            dialect,
            names: NamePolicy::Explicit(names),
            ..Default::default()
        };
        let serialized =
            serialize(&graph, &query, &opts).map_err(|e| parse_err(line, "names", e))?;
        let stored_text: String = field(&obj, "text", line)?;
        if stored_text != serialized.text() {
            return Err(parse_err(line, "text", "does not match the stored graph"));
        }
        let mut tokens = tokenize(&serialized, &vocab, gen.max_positions)
            .map_err(|e| parse_err(line, "text", e))?;
        let segments = obj
            .get("segments")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(line, "segments", "missing or not an array"))?
            .iter()
            .map(|v| parse_segment(v, line))
            .collect::<Result<Vec<_>, _>>()?;
        if segments != tokens.spans {
            return Err(parse_err(line, "segments", "do not match the tokenized text"));
        }
        let truth = oracle(&graph, &query).map_err(|e| parse_err(line, "query", e))?;
        let label: usize = field(&obj, "label", line)?;
        if spec.class_of(truth.answer) != Some(label) {
            return Err(parse_err(line, "label", "disagrees with the oracle"));
        }
        let gt_nodes = field(&obj, "gt_nodes", line)?;
        if gt_nodes != truth.gt_nodes {
            return Err(parse_err(line, "gt_nodes", "disagree with the oracle"));
        }
        tokens.label = label;
        tokens.gt_nodes = gt_nodes;
        samples.push(Sample {
            id: field(&obj, "id", line)?,
            split: field::<Split>(&obj, "split", line)?,
            graph,
            query,
            answer: truth.answer,
            source: field(&obj, "source", line)?,
            serialized,
            tokens,
        });
    }
    Ok(Dataset {
        spec,
        gen,
        seed,
        samples,
        vocab,
    })
}
