//! Auto-regressive token decoding and conditional flow matching over a
//! seeded synthetic latent world.

pub mod ar;
pub mod backbone;
pub mod bench;
pub mod cond;
pub mod delay;
pub mod error;
pub mod fm;
pub mod gen;
pub mod metrics;
pub mod num;
pub mod train;
pub mod world;

pub use error::{Error, Result};
