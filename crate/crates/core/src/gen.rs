//! Latent-level generation and inpainting for trained models.

use rayon::prelude::*;

use crate::ar::{self, ArSamplerConfig};
use crate::backbone::Backbone;
use crate::cond::{cond_ids, Alignment, CondIds, ControlSet, DropMask};
use crate::error::{Error, Result};
use crate::fm::{self, replace_context, FmSamplerConfig, ModelField, TraceRow};
use crate::num::SeededRng;
use crate::world::{normalize, unnormalize, LatentSeq, NormStats, World};

/// What to generate: a caption (empty for none) and optional controls at
/// the latent frame rate.
#[derive(Debug, Clone, Copy)]
pub struct Request<'a> {
    pub caption: &'a [u32],
    pub controls: Option<&'a ControlSet>,
}

/// Token sampling followed by codec decoding. Element `i` draws from
/// `rng.substream(i)`.
pub fn ar_generate(
    model: &Backbone<f32>,
    world: &World,
    requests: &[Request<'_>],
    cfg: &ArSamplerConfig,
    rng: &SeededRng,
) -> Result<Vec<LatentSeq>> {
    let reqs: Vec<(&[u32], Option<&ControlSet>)> = requests.iter().map(|r| (r.caption, r.controls)).collect();
    ar::sample(model, &reqs, cfg, rng)?
        .iter()
        .map(|g| world.codec().detokenize(g))
        .collect()
}

fn flow_cond(model: &Backbone<f32>, controls: Option<&ControlSet>, len: usize) -> Result<CondIds> {
    let vocab = model.config.cond_vocab;
    match controls {
        Some(c) if c.len() != len => Err(Error::Shape(format!("{} control frames for {len} latent frames", c.len()))),
        Some(c) => Ok(cond_ids(c, &vocab, DropMask::NONE, Alignment::Flow)),
        None => Ok(CondIds::null(&vocab, len)),
    }
}

/// Output of [`fm_generate`].
#[derive(Debug, Clone)]
pub struct FmOutput {
    pub latents: Vec<LatentSeq>,
    pub traces: Vec<Vec<TraceRow>>,
    /// Backbone forwards per element.
    pub evals: Vec<usize>,
}

/// Integrates the guided field from Gaussian noise for each request, in
/// parallel. Element `i` draws its start from `rng.substream(i)`.
pub fn fm_generate(
    model: &Backbone<f32>,
    norm: &NormStats,
    requests: &[Request<'_>],
    len: usize,
    cfg: &FmSamplerConfig,
    rng: &SeededRng,
) -> Result<FmOutput> {
    cfg.validate()?;
    let dim = model.config.input_dim;
    let parts: Vec<(LatentSeq, Vec<TraceRow>, usize)> = requests
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut field = ModelField::new(model, flow_cond(model, r.controls, len)?, r.caption, cfg.cfg_coef);
            let y0 = rng.substream(i as u64).gauss_vec(len * dim);
            let mut trace = Vec::new();
            let y = fm::solve(&mut field, y0, cfg, Some(&mut trace))?;
            let z = unnormalize(&LatentSeq::new(dim, len, y)?, norm);
            Ok((z, trace, field.evals))
        })
        .collect::<Result<_>>()?;
    let mut out = FmOutput {
        latents: Vec::new(),
        traces: Vec::new(),
        evals: Vec::new(),
    };
    for (z, t, e) in parts {
        out.latents.push(z);
        out.traces.push(t);
        out.evals.push(e);
    }
    Ok(out)
}

fn finish_inpaint(y: Vec<f32>, z: &LatentSeq, norm: &NormStats, s: usize, e: usize) -> Result<LatentSeq> {
    let mut out = unnormalize(&LatentSeq::new(z.dim(), z.len(), y)?, norm).into_data();
    replace_context(&mut out, z.data(), z.dim(), s, e);
    LatentSeq::new(z.dim(), z.len(), out)
}

/// Zero-shot inpainting of frames `[s, e)` of the raw latent `z` by
/// inversion. Context frames of the result equal those of `z`.
#[allow(clippy::too_many_arguments)]
pub fn fm_zs_inpaint(
    model: &Backbone<f32>,
    norm: &NormStats,
    z: &LatentSeq,
    req: Request<'_>,
    s: usize,
    e: usize,
    cfg: &FmSamplerConfig,
    rng: &mut SeededRng,
) -> Result<LatentSeq> {
    cfg.validate()?;
    let cond = flow_cond(model, req.controls, z.len())?;
    let mut inv = ModelField::new(model, cond.clone(), req.caption, cfg.inversion_cfg_coef);
    let mut fwd = ModelField::new(model, cond, req.caption, cfg.cfg_coef);
    let zn = normalize(z, norm);
    let y0 = rng.gauss_vec(z.data().len());
    let y = fm::zs_inpaint(&mut inv, &mut fwd, zn.data(), z.dim(), s, e, cfg.n_steps, y0)?;
    finish_inpaint(y, z, norm, s, e)
}

/// Inpainting with a context-trained model.
#[allow(clippy::too_many_arguments)]
pub fn fm_sup_inpaint(
    model: &Backbone<f32>,
    norm: &NormStats,
    z: &LatentSeq,
    req: Request<'_>,
    s: usize,
    e: usize,
    cfg: &FmSamplerConfig,
    rng: &mut SeededRng,
) -> Result<LatentSeq> {
    cfg.validate()?;
    let mut field = ModelField::new(model, flow_cond(model, req.controls, z.len())?, req.caption, cfg.cfg_coef);
    let zn = normalize(z, norm);
    let y0 = rng.gauss_vec(z.data().len());
    let y = fm::sup_inpaint(&mut field, zn.data(), z.dim(), s, e, cfg.n_steps, y0)?;
    finish_inpaint(y, z, norm, s, e)
}
