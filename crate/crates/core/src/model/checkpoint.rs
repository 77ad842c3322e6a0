//! `model.bin`: magic, format version, config JSON, then the `f32`
//! little-endian parameter blob. `model.json` carries the same config plus
//! free-form run metadata for humans and scripts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Regressor, Result};

pub const CHECKPOINT_BIN: &str = "model.bin";
pub const CHECKPOINT_JSON: &str = "model.json";
const MAGIC: &[u8; 8] = b"LNDVAL\x00M";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub param_count: usize,
    pub config: ModelConfig,
    #[serde(default)]
    pub run: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint(model: &Regressor<f32>, dir: &Path, run: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    let params = model.params_flat();
    let mut bytes = Vec::with_capacity(24 + config.len() + 4 * params.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&config);
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in &params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let bin = dir.join(CHECKPOINT_BIN);
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let meta = CheckpointMeta { version: VERSION, param_count: params.len(), config: model.config.clone(), run };
    let json = dir.join(CHECKPOINT_JSON);
    fs::write(&json, serde_json::to_string_pretty(&meta).expect("metadata serializes")).map_err(io_err(&json))
}

pub fn load_checkpoint(dir: &Path) -> Result<Regressor<f32>> {
    let bin = dir.join(CHECKPOINT_BIN);
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("file is truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config: ModelConfig =
        serde_json::from_slice(take(len)?).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let blob = take(count.checked_mul(4).ok_or_else(|| bad("parameter count overflows"))?)?;
    let params: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    let mut model = Regressor::zeros(config)?;
    model.set_params_flat(&params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RasterGrid;
    use crate::synthdata::LandmarkCounts;

    #[test]
    fn round_trip() {
        let mut cfg = ModelConfig::for_dataset(&LandmarkCounts::default(), RasterGrid { width: 8, height: 8 });
        cfg.hidden = vec![7];
        let model = Regressor::<f32>::init(cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), serde_json::json!({"seed": 5})).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), model);

        let bin = dir.path().join(CHECKPOINT_BIN);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(ModelError::Checkpoint(_))));
    }
}
