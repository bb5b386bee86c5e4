//! Checkpoint directory: one `<name>.pft` tensor per parameter plus
//! `config.json` holding the backbone config and caller metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{BackboneConfig, Layout};
use super::model::Backbone;
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::num::{load_tensor, save_tensor};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointConfig {
    backbone: BackboneConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Backbone<f32>, meta: &serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in model.params.to_tensors() {
        save_tensor(&t, dir.join(format!("{name}.pft")))?;
    }
    let cfg = CheckpointConfig {
        backbone: model.config.clone(),
        meta: meta.clone(),
    };
    let path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Backbone<f32>, serde_json::Value)> {
    let dir = dir.as_ref();
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: CheckpointConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    cfg.backbone.validate()?;
    let layout = Layout::new(&cfg.backbone);
    let mut tensors = BTreeMap::new();
    for s in &layout.specs {
        tensors.insert(s.name.clone(), load_tensor(dir.join(format!("{}.pft", s.name)))?);
    }
    let params = ParamSet::from_tensors(&layout, &tensors)?;
    Ok((Backbone::from_params(cfg.backbone, params)?, cfg.meta))
}
