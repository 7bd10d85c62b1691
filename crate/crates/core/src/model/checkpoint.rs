//! Checkpoint format: one JSON header line, then the raw little-endian `f32`
//! data of every tensor at the offsets listed in the header's manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use hlmg_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::text::Vocabulary;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the blob section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u64,
    config: ModelConfig,
    #[serde(default)]
    vocab: Option<Vocabulary>,
    manifest: Vec<Entry>,
}

/// A model plus the vocabulary it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Option<Vocabulary>,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(model: &Model<f32>, vocab: Option<&Vocabulary>, path: &Path) -> Result<()> {
    let mut offset = 0;
    let manifest = model
        .names
        .iter()
        .zip(&model.params)
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab: vocab.cloned(),
        manifest,
    };
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for t in &model.params {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| io_err(path, e))
}

/// Loads a checkpoint. With `expected` set, a checkpoint built for a
/// different model configuration is rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| io_err(path, e))?;
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| bad(path, format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(
            path,
            format!(
                "version {} (expected {CHECKPOINT_VERSION})",
                header.version
            ),
        ));
    }
    if let Some(want) = expected {
        if want != &header.config {
            return Err(ModelError::Mismatch(format!(
                "expected {want:?}, checkpoint has {:?}",
                header.config
            )));
        }
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob).map_err(|e| io_err(path, e))?;
    if blob.len() % 4 != 0 {
        return Err(bad(path, "tensor data is not a whole number of f32 values"));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut named = Vec::with_capacity(header.manifest.len());
    for e in header.manifest {
        let len: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| bad(path, format!("tensor {} runs past end of file", e.name)))?
            .to_vec();
        let t = Tensor::new(e.shape, data).map_err(|err| bad(path, err.to_string()))?;
        named.push((e.name, t));
    }
    let model = Model::from_params(header.config, named)?;
    Ok(Checkpoint {
        model,
        vocab: header.vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: Model<f32> = Model::init(ModelConfig::tiny(20, 3), 7).unwrap();
        save_checkpoint(&model, None, &path).unwrap();
        let back = load_checkpoint(&path, Some(&model.config)).unwrap();
        assert_eq!(back.model, model);
        let other = ModelConfig::tiny(20, 4);
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(ModelError::Mismatch(_))
        ));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: Model<f32> = Model::init(ModelConfig::tiny(20, 3), 7).unwrap();
        save_checkpoint(&model, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(ModelError::Checkpoint { .. })
        ));
    }
}
