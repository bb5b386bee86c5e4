//! Mini-batch training for both paradigms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::ArExample;
use crate::backbone::{AdamW, AdamWConfig, Backbone, BackboneConfig, LrSchedule, Mode, ParamSet};
use crate::cond::{cond_ids, drop_conditions, Alignment};
use crate::error::{Error, Result};
use crate::fm::{FmExample, MaskPolicy, OtPath};
use crate::num::SeededRng;
use crate::world::{normalize, NormStats, WorldSample, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Ar,
    Fm,
}

impl Paradigm {
    pub fn mode(self) -> Mode {
        match self {
            Paradigm::Ar => Mode::Causal,
            Paradigm::Fm => Mode::Bidirectional,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Ar => "ar",
            Paradigm::Fm => "fm",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(Paradigm::Ar),
            "fm" => Ok(Paradigm::Fm),
            _ => Err(Error::Invalid(format!("unknown paradigm {s:?}, expected ar or fm"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub adamw: AdamWConfig,
    /// Per-stream condition dropout.
    pub p_drop: f64,
    /// Probability of dropping every condition and the caption together.
    pub p_all: f64,
    /// Fraction of examples in inpainting format: fill-in-the-middle for
    /// token models, context plug-in for latent models.
    pub inpaint_prob: f64,
    pub mask: MaskPolicy,
    pub path: OtPath,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            segment_seconds: 10.0,
            steps: 2000,
            peak_lr: 2e-3,
            warmup: 200,
            adamw: AdamWConfig::default(),
            p_drop: 0.5,
            p_all: 0.1,
            inpaint_prob: 0.0,
            mask: MaskPolicy::default(),
            path: OtPath::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("train: {m}")));
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive");
        }
        if !(self.segment_seconds > 0.0) {
            return bad("segment_seconds must be positive");
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be positive");
        }
        for p in [self.p_drop, self.p_all, self.inpaint_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        self.path.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup: self.warmup,
            total: self.steps,
        }
    }
}

/// Backbone hyper-parameters matching a world's shapes for a paradigm.
pub fn backbone_for(world: &WorldSpec, paradigm: Paradigm, base: &BackboneConfig) -> BackboneConfig {
    BackboneConfig {
        mode: paradigm.mode(),
        n_books: world.n_codebooks,
        card: world.codebook_size,
        input_dim: world.latent_dim,
        cond_vocab: world.cond_vocab(),
        ..base.clone()
    }
}

/// Model, optimizer and step counter. Each step's randomness comes from
/// `rng.substream(step)`, and element `i` of the batch from a further
/// substream, so results do not depend on the thread count.
pub struct Trainer {
    pub paradigm: Paradigm,
    pub model: Backbone<f32>,
    pub config: TrainConfig,
    pub norm: NormStats,
    pub frame_rate: f64,
    pub step: usize,
    opt: AdamW<f32>,
    rng: SeededRng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(
        paradigm: Paradigm,
        model: Backbone<f32>,
        config: TrainConfig,
        norm: NormStats,
        frame_rate: f64,
        rng: SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        if model.config.mode != paradigm.mode() {
            return Err(Error::Invalid(format!(
                "{} training needs a {:?} backbone",
                paradigm.name(),
                paradigm.mode()
            )));
        }
        Ok(Self {
            opt: model.optimizer(config.adamw),
            paradigm,
            model,
            config,
            norm,
            frame_rate,
            step: 0,
            rng,
        })
    }

    /// Picks `batch_size` dataset indices for the current step.
    pub fn draw_batch(&self, n: usize) -> Vec<usize> {
        let mut r = self.rng.substream(self.step as u64).substream(u64::MAX);
        (0..self.config.batch_size).map(|_| r.below(n)).collect()
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&WorldSample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let step_rng = self.rng.substream(self.step as u64);
        let examples: Vec<Example> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| self.example(s, step_rng.substream(i as u64)))
            .collect::<Result<_>>()?;
        let model = &self.model;
        let path = self.config.path;
        let (loss, grads) = match self.paradigm {
            Paradigm::Ar => {
                let cells: usize = examples.iter().map(|e| e.ar().loss_cells()).sum();
                let scale = 1.0 / cells.max(1) as f32;
                let parts = run_parallel(model, &examples, |e, g| Ok(e.ar().nll_backward(model, scale, g)?.0))?;
                let (nll, grads) = reduce(parts);
                (nll / cells.max(1) as f64, grads)
            }
            Paradigm::Fm => {
                let scale = 1.0 / examples.len() as f32;
                let parts = run_parallel(model, &examples, |e, g| e.fm().loss_backward(model, &path, scale, g))?;
                let (sum, grads) = reduce(parts);
                (sum / examples.len() as f64, grads)
            }
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite { step: self.step });
        }
        let lr = self.config.schedule().lr(self.step + 1);
        let grad_norm = self.opt.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(StepStats { loss, lr, grad_norm })
    }

    /// Loss of `batch` without updating, using the randomness of the
    /// current step.
    pub fn eval_loss(&self, batch: &[&WorldSample]) -> Result<f64> {
        let step_rng = self.rng.substream(self.step as u64);
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, s) in batch.iter().enumerate() {
            match self.example(s, step_rng.substream(i as u64))? {
                Example::Ar(e) => {
                    let (nll, n) = e.nll(&self.model)?;
                    total += nll;
                    count += n;
                }
                Example::Fm(e) => {
                    total += e.loss(&self.model, &self.config.path)?;
                    count += 1;
                }
            }
        }
        Ok(total / count.max(1) as f64)
    }

    fn example(&self, sample: &WorldSample, mut rng: SeededRng) -> Result<Example> {
        let c = &self.config;
        let full = sample.latent.len();
        let seg = ((c.segment_seconds * self.frame_rate).round() as usize).min(full);
        if seg == 0 {
            return Err(Error::Invalid("segment shorter than one frame".into()));
        }
        let start = rng.below(full - seg + 1);
        let controls = sample.controls.slice(start, start + seg);
        let drop = drop_conditions(&mut rng, c.p_drop, c.p_all)?;
        let caption: &[u32] = if drop.all_dropped() { &[] } else { &sample.caption };
        let inpaint = rng.bernoulli(c.inpaint_prob);
        let vocab = self.model.config.cond_vocab;
        Ok(match self.paradigm {
            Paradigm::Ar => {
                let tokens = sample.tokens.slice_frames(start, start + seg);
                Example::Ar(if inpaint {
                    let (s, e) = c.mask.draw(seg, self.frame_rate, &mut rng)?;
                    ArExample::fim(&tokens, &controls, &vocab, caption, drop, s.max(1), e.min(seg - 1))?
                } else {
                    ArExample::plain(&tokens, &controls, &vocab, caption, drop)?
                })
            }
            Paradigm::Fm => {
                let span = if inpaint {
                    Some(c.mask.draw(seg, self.frame_rate, &mut rng)?)
                } else {
                    None
                };
                let dim = sample.latent.dim();
                let z = normalize(&sample.latent, &self.norm).into_data()[start * dim..(start + seg) * dim].to_vec();
                let tau = rng.uniform();
                let y0 = rng.gauss_vec(z.len());
                Example::Fm(FmExample {
                    z,
                    dim,
                    cond: cond_ids(&controls, &vocab, drop, Alignment::Flow),
                    caption: caption.to_vec(),
                    tau,
                    y0,
                    span,
                })
            }
        })
    }
}

enum Example {
    Ar(ArExample),
    Fm(FmExample),
}

impl Example {
    fn ar(&self) -> &ArExample {
        match self {
            Example::Ar(e) => e,
            Example::Fm(_) => unreachable!("paradigm mismatch"),
        }
    }

    fn fm(&self) -> &FmExample {
        match self {
            Example::Fm(e) => e,
            Example::Ar(_) => unreachable!("paradigm mismatch"),
        }
    }
}

fn run_parallel<F>(model: &Backbone<f32>, examples: &[Example], f: F) -> Result<Vec<(f64, ParamSet<f32>)>>
where
    F: Fn(&Example, &mut ParamSet<f32>) -> Result<f64> + Sync,
{
    examples
        .par_iter()
        .map(|e| {
            let mut g = model.params.zeros_like();
            let v = f(e, &mut g)?;
            Ok((v, g))
        })
        .collect()
}

/// Sums in batch order so the result is independent of scheduling.
fn reduce(parts: Vec<(f64, ParamSet<f32>)>) -> (f64, ParamSet<f32>) {
    let mut it = parts.into_iter();
    let (mut total, mut grads) = it.next().expect("non-empty batch");
    for (v, g) in it {
        total += v;
        grads.add(&g);
    }
    (total, grads)
}
