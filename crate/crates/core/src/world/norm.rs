use serde::{Deserialize, Serialize};

use super::{LatentSeq, World};
use crate::error::{Error, Result};
use crate::num::SeededRng;

pub const DEFAULT_SEGMENTS: usize = 2048;
pub const MIN_STD: f64 = 1e-6;
const SEGMENT_SECONDS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub mean_std: f64,
    pub n_segments: usize,
    /// Set when the measured spread was below `MIN_STD` and got clamped.
    #[serde(default)]
    pub clamped: bool,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: 0.0,
        mean_std: 1.0,
        n_segments: 0,
        clamped: false,
    };
}

/// Global mean, and the per-(segment, channel) temporal standard deviation
/// (unbiased) averaged over segments and channels.
pub fn norm_stats_of(latents: &[LatentSeq]) -> Result<NormStats> {
    if latents.is_empty() {
        return Err(Error::Invalid("need at least one segment".into()));
    }
    let mut total = 0f64;
    let mut count = 0usize;
    let mut std_sum = 0f64;
    let mut std_count = 0usize;
    for z in latents {
        let (d, l) = (z.dim(), z.len());
        for c in 0..d {
            let mean = (0..l).map(|j| z.frame(j)[c] as f64).sum::<f64>() / l as f64;
            let ss: f64 = (0..l).map(|j| (z.frame(j)[c] as f64 - mean).powi(2)).sum();
            let var = if l > 1 { ss / (l - 1) as f64 } else { 0.0 };
            std_sum += var.sqrt();
            std_count += 1;
            total += mean * l as f64;
            count += l;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("segments are empty".into()));
    }
    let raw = std_sum / std_count as f64;
    Ok(NormStats {
        mean: total / count as f64,
        mean_std: raw.max(MIN_STD),
        n_segments: latents.len(),
        clamped: raw < MIN_STD,
    })
}

/// Statistics over `n` fresh 10 s segments drawn from the world.
pub fn compute_norm_stats(world: &World, n: usize, rng: &mut SeededRng) -> Result<NormStats> {
    if n == 0 {
        return Err(Error::Invalid("need at least one segment".into()));
    }
    let mut segs = Vec::with_capacity(n);
    for i in 0..n {
        let (_, _, _, z) = world.synthesize(&mut rng.substream(i as u64), SEGMENT_SECONDS);
        segs.push(z);
    }
    norm_stats_of(&segs)
}

pub fn normalize(z: &LatentSeq, stats: &NormStats) -> LatentSeq {
    let (m, s) = (stats.mean, stats.mean_std);
    map(z, |x| ((x as f64 - m) / s) as f32)
}

pub fn unnormalize(z: &LatentSeq, stats: &NormStats) -> LatentSeq {
    let (m, s) = (stats.mean, stats.mean_std);
    map(z, |x| (x as f64 * s + m) as f32)
}

fn map(z: &LatentSeq, f: impl Fn(f32) -> f32) -> LatentSeq {
    LatentSeq {
        dim: z.dim,
        len: z.len,
        data: z.data.iter().map(|&x| f(x)).collect(),
    }
}
