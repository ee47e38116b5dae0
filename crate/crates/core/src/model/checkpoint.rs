use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub step: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(format!("checkpoint {}", path.display()), e)
}

/// Writes `dir/manifest.json` plus one raw little-endian f32 file per
/// parameter (`<name>.bin`). Existing files are overwritten.
pub fn save_checkpoint(dir: &Path, model: &Model<f32>, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut params = Vec::with_capacity(model.params().len());
    for (_, entry) in model.params().iter() {
        let file = format!("{}.bin", entry.name());
        let bytes: Vec<u8> = entry
            .tensor()
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        params.push(ParamRecord {
            name: entry.name().to_string(),
            shape: entry.tensor().shape().to_vec(),
            file,
            trainable: entry.trainable(),
        });
    }
    let manifest = CheckpointManifest {
        dtype: "f32".into(),
        step,
        config: model.config().clone(),
        params,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

/// Rebuilds the model from the manifest's config and loads every parameter.
/// Returns the model and the stored step counter.
pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, u64)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let bad = |reason: String| Error::Format {
        path: dir.to_path_buf(),
        reason,
    };
    if manifest.dtype != "f32" {
        return Err(bad(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut model = Model::<f32>::build(&manifest.config, 0)?;
    if manifest.params.len() != model.params().len() {
        return Err(bad(format!(
            "manifest lists {} parameters, the configured model has {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    for rec in &manifest.params {
        let id = model
            .params()
            .id(&rec.name)
            .ok_or_else(|| bad(format!("unknown parameter {}", rec.name)))?;
        let expect = model.params().get(id).shape().to_vec();
        if expect != rec.shape {
            return Err(bad(format!("{} has shape {:?}, expected {expect:?}", rec.name, rec.shape)));
        }
        let p = dir.join(&rec.file);
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        let n: usize = rec.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(bad(format!("{} holds {} bytes, expected {}", rec.file, bytes.len(), 4 * n)));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let trainable = model.params().entry(id).trainable();
        *model.params_mut().get_mut(id) = Tensor::from_vec(rec.shape.clone(), values)?.with_requires_grad(trainable);
    }
    Ok((model, manifest.step))
}
