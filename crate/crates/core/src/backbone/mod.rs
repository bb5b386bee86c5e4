//! Small pre-norm transformer shared by both paradigms, with hand-written
//! gradients and an incremental decoding cache.

mod cache;
mod checkpoint;
mod config;
pub mod layers;
mod model;
mod optim;
mod params;

pub use cache::KvCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_FILE};
pub use config::{BackboneConfig, Init, Layout, Mode, ParamSpec, TIME_FEATURES};
pub use model::{Backbone, Input, SeqInput, Tape};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::ParamSet;

impl<T: crate::num::Real> Backbone<T> {
    pub fn optimizer(&self, config: AdamWConfig) -> AdamW<T> {
        AdamW::new(config, &self.params, self.layout.specs.iter().map(|s| s.decay).collect())
    }
}
