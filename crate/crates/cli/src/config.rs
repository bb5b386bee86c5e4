//! Run configuration: one TOML document with a section per component.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use arfm::ar::ArSamplerConfig;
use arfm::backbone::BackboneConfig;
use arfm::bench::BenchPlan;
use arfm::fm::{FmSamplerConfig, MaskPolicy};
use arfm::train::{backbone_for, Paradigm, TrainConfig};
use arfm::world::{caption, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    pub seconds: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 1024,
            seconds: 10.0,
        }
    }
}

/// Size of the shared transformer; shapes tied to the world are filled in
/// from the world section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub cond_dim: usize,
    pub max_len: usize,
    /// Self-attention reach in positions; 0 attends to the whole sequence.
    pub attn_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            model_dim: 32,
            n_heads: 2,
            ff_dim: 64,
            cond_dim: 8,
            max_len: 1024,
            attn_window: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub seconds: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 50,
            seconds: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InpaintMethod {
    /// Inversion-based, any flow model.
    Zs,
    /// Context plug-in, flow model trained with inpainting examples.
    Sup,
    /// Fill-in-the-middle, token model trained with inpainting examples.
    Fim,
}

impl InpaintMethod {
    pub fn name(self) -> &'static str {
        match self {
            InpaintMethod::Zs => "zs",
            InpaintMethod::Sup => "sup",
            InpaintMethod::Fim => "fim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintConfig {
    pub method: InpaintMethod,
    pub n_samples: usize,
    pub seconds: f64,
    pub mask: MaskPolicy,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            method: InpaintMethod::Zs,
            n_samples: 8,
            seconds: 10.0,
            mask: MaskPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ar: ArSamplerConfig,
    pub fm: FmSamplerConfig,
    pub eval: EvalConfig,
    pub inpaint: InpaintConfig,
    pub bench: BenchPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldSpec::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ar: ArSamplerConfig::default(),
            fm: FmSamplerConfig::default(),
            eval: EvalConfig::default(),
            inpaint: InpaintConfig::default(),
            bench: BenchPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.ar.validate()?;
        self.fm.validate()?;
        self.bench.validate()?;
        if self.data.n_samples == 0 || self.eval.n_samples == 0 || self.inpaint.n_samples == 0 {
            bail!("sample counts must be positive");
        }
        for s in [self.data.seconds, self.eval.seconds, self.inpaint.seconds] {
            if !(s > 0.0) {
                bail!("durations must be positive");
            }
        }
        self.backbone(Paradigm::Ar).validate()?;
        Ok(())
    }

    pub fn backbone(&self, paradigm: Paradigm) -> BackboneConfig {
        let m = &self.model;
        let base = BackboneConfig {
            n_blocks: m.n_blocks,
            model_dim: m.model_dim,
            n_heads: m.n_heads,
            ff_dim: m.ff_dim,
            cond_dim: m.cond_dim,
            caption_vocab: caption::VOCAB,
            max_len: m.max_len,
            attn_window: (m.attn_window > 0).then_some(m.attn_window),
            ..BackboneConfig::default()
        };
        backbone_for(&self.world, paradigm, &base)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads `path` (defaults when absent) and applies `key=value`
    /// overrides on dotted keys.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("{}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            set_key(&mut doc, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Table::try_into(doc).context("config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with one dotted key replaced.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?)?;
        set_key(&mut doc, key, parse_value(value))?;
        let cfg: RunConfig = toml::Table::try_into(doc).with_context(|| format!("setting {key}"))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(v: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

fn set_key(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("{key}: {p} is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
