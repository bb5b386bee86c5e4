//! Latent-domain generation: the optimal-transport conditional path, the
//! weighted regression loss, fixed-step and adaptive ODE sampling with
//! guidance, inversion, and the two inpainting loops.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Input, ParamSet, SeqInput};
use crate::cond::CondIds;
use crate::error::{Error, Result};
use crate::num::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtPath {
    pub sigma_min: f64,
}

impl Default for OtPath {
    fn default() -> Self {
        Self { sigma_min: 1e-4 }
    }
}

impl OtPath {
    pub fn new(sigma_min: f64) -> Result<Self> {
        let p = Self { sigma_min };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Invalid(format!("sigma_min must lie in (0, 1), got {}", self.sigma_min)));
        }
        Ok(())
    }

    fn slope(&self) -> f64 {
        1.0 - self.sigma_min
    }

    /// `(1 - (1 - sigma_min) tau) y0 + tau y1`.
    pub fn psi(&self, tau: f64, y0: &[f32], y1: &[f32]) -> Vec<f32> {
        let a = 1.0 - self.slope() * tau;
        y0.iter()
            .zip(y1)
            .map(|(&x0, &x1)| (a * x0 as f64 + tau * x1 as f64) as f32)
            .collect()
    }

    /// `(y1 - (1 - sigma_min) y) / (1 - (1 - sigma_min) tau)`.
    pub fn target_field(&self, tau: f64, y: &[f32], y1: &[f32]) -> Result<Vec<f32>> {
        let den = 1.0 - self.slope() * tau;
        if den < 1e-8 {
            return Err(Error::Invalid(format!("tau={tau} leaves the path denominator at {den}")));
        }
        Ok(y.iter()
            .zip(y1)
            .map(|(&v, &x1)| ((x1 as f64 - self.slope() * v as f64) / den) as f32)
            .collect())
    }

    /// Regression target along the path, `y1 - (1 - sigma_min) y0`.
    pub fn velocity(&self, y0: &[f32], y1: &[f32]) -> Vec<f32> {
        y0.iter()
            .zip(y1)
            .map(|(&x0, &x1)| (x1 as f64 - self.slope() * x0 as f64) as f32)
            .collect()
    }
}

/// `(1 + tau) * mean((pred - target)^2)`.
pub fn weighted_mse(tau: f64, pred: &[f32], target: &[f32]) -> f64 {
    let sq: f64 = pred.iter().zip(target).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum();
    (1.0 + tau) * sq / pred.len() as f64
}

/// Batch loss with `tau ~ U[0, 1]` from `tau_rng` and Gaussian starts from
/// `noise_rng`. `model(i, y, tau)` predicts the field for element `i`.
pub fn fm_loss<F>(
    path: &OtPath,
    batch: &[&[f32]],
    mut model: F,
    tau_rng: &mut SeededRng,
    noise_rng: &mut SeededRng,
) -> Result<f64>
where
    F: FnMut(usize, &[f32], f64) -> Result<Vec<f32>>,
{
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = 0.0;
    for (i, z) in batch.iter().enumerate() {
        let tau = tau_rng.uniform();
        let y0 = noise_rng.gauss_vec(z.len());
        let y = path.psi(tau, &y0, z);
        let pred = model(i, &y, tau)?;
        if pred.len() != z.len() {
            return Err(Error::Shape(format!("model returned {} values for {}", pred.len(), z.len())));
        }
        total += weighted_mse(tau, &pred, &path.velocity(&y0, z));
    }
    Ok(total / batch.len() as f64)
}

/// A time-dependent vector field over flat states.
pub trait VectorField {
    fn eval(&mut self, y: &[f32], tau: f64) -> Result<Vec<f32>>;
}

impl<F> VectorField for F
where
    F: FnMut(&[f32], f64) -> Result<Vec<f32>>,
{
    fn eval(&mut self, y: &[f32], tau: f64) -> Result<Vec<f32>> {
        self(y, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Dopri5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmSamplerConfig {
    pub solver: Solver,
    pub n_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_evals: usize,
    pub cfg_coef: f64,
    /// Guidance used while inverting a latent for zero-shot inpainting.
    pub inversion_cfg_coef: f64,
}

impl Default for FmSamplerConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Euler,
            n_steps: 50,
            rtol: 1e-3,
            atol: 1e-5,
            max_evals: 1000,
            cfg_coef: 3.0,
            inversion_cfg_coef: 1.0,
        }
    }
}

impl FmSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("fm sampler: {m}")));
        if self.n_steps == 0 {
            return bad("n_steps must be positive".into());
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if self.max_evals == 0 {
            return bad("max_evals must be positive".into());
        }
        for a in [self.cfg_coef, self.inversion_cfg_coef] {
            if !(a >= 0.0) || !a.is_finite() {
                return bad(format!("guidance coefficients must be finite and non-negative, got {a}"));
            }
        }
        Ok(())
    }
}

/// One solver step attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub tau: f64,
    pub h: f64,
    /// Scaled error norm; NaN for fixed-step methods.
    pub err: f64,
    pub accepted: bool,
}

pub fn write_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("tau,h,err,accepted\n");
    for r in rows {
        s.push_str(&format!("{:.9},{:.9},{:.6e},{}\n", r.tau, r.h, r.err, r.accepted as u8));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(s.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

fn check_finite(y: &[f32], step: usize) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

fn eval_checked(field: &mut dyn VectorField, y: &[f32], tau: f64) -> Result<Vec<f32>> {
    let v = field.eval(y, tau)?;
    if v.len() != y.len() {
        return Err(Error::Shape(format!("field returned {} values for a state of {}", v.len(), y.len())));
    }
    Ok(v)
}

/// Fixed-grid Euler from `tau = 0` to 1; step `k` evaluates at
/// `(k - 1) / n_steps`.
pub fn euler(field: &mut dyn VectorField, mut y: Vec<f32>, n_steps: usize, mut trace: Option<&mut Vec<TraceRow>>) -> Result<Vec<f32>> {
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be positive".into()));
    }
    let h = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let tau = k as f64 / n_steps as f64;
        let v = eval_checked(field, &y, tau)?;
        for (yi, vi) in y.iter_mut().zip(v) {
            *yi += h as f32 * vi;
        }
        check_finite(&y, k + 1)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow {
                tau,
                h,
                err: f64::NAN,
                accepted: true,
            });
        }
    }
    Ok(y)
}

const DP_C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 6] = [
    &[0.2],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth- minus fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
pub const DOPRI_INITIAL_STEP: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct Dopri5Out {
    pub y: Vec<f32>,
    pub evals: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Adaptive Dormand–Prince 5(4) from `tau = 0` to 1 with first-same-as-last
/// stage reuse. Stage arithmetic is done in double precision.
pub fn dopri5(
    field: &mut dyn VectorField,
    y0: Vec<f32>,
    rtol: f64,
    atol: f64,
    max_evals: usize,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Dopri5Out> {
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::Invalid("tolerances must be positive".into()));
    }
    let n = y0.len();
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let to64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
    let mut y: Vec<f64> = y0.iter().map(|&x| x as f64).collect();
    let mut tau = 0.0;
    let mut h = DOPRI_INITIAL_STEP;
    let mut k1 = to64(eval_checked(field, &y0, 0.0)?);
    let mut out = Dopri5Out {
        y: Vec::new(),
        evals: 1,
        accepted: 0,
        rejected: 0,
    };
    let mut stage = vec![0f64; n];
    while tau < 1.0 {
        let last = h >= 1.0 - tau;
        if last {
            h = 1.0 - tau;
        }
        if out.evals + 6 > max_evals {
            return Err(Error::MaxEvals {
                max_evals,
                tau,
                state: to32(&y),
            });
        }
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(7);
        ks.push(k1.clone());
        for (s, row) in DP_A.iter().enumerate() {
            for (i, st) in stage.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (a, k) in row.iter().zip(&ks) {
                    acc += a * k[i];
                }
                *st = y[i] + h * acc;
            }
            ks.push(to64(eval_checked(field, &to32(&stage), tau + DP_C[s] * h)?));
        }
        out.evals += 6;
        // The sixth stage point is the fifth-order solution.
        let y5 = stage.clone();
        let mut sum = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (w, k) in DP_E.iter().zip(&ks) {
                e += w * k[i];
            }
            let sc = atol + rtol * y[i].abs().max(y5[i].abs());
            sum += (h * e / sc).powi(2);
        }
        let mut err = (sum / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            err = f64::INFINITY;
        }
        let accepted = err <= 1.0;
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow { tau, h, err, accepted });
        }
        let factor = if err == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if accepted {
            tau = if last { 1.0 } else { tau + h };
            y = y5;
            k1 = ks.pop().expect("seven stages");
            out.accepted += 1;
        } else {
            out.rejected += 1;
        }
        h *= factor;
    }
    out.y = to32(&y);
    Ok(out)
}

/// Runs the configured solver from `y0`.
pub fn solve(field: &mut dyn VectorField, y0: Vec<f32>, cfg: &FmSamplerConfig, trace: Option<&mut Vec<TraceRow>>) -> Result<Vec<f32>> {
    cfg.validate()?;
    match cfg.solver {
        Solver::Euler => euler(field, y0, cfg.n_steps, trace),
        Solver::Dopri5 => Ok(dopri5(field, y0, cfg.rtol, cfg.atol, cfg.max_evals, trace)?.y),
    }
}

/// Backward Euler unroll from `tau = 1` to 0. Returns the visited states in
/// reverse order of visit, so entry `k` belongs to forward step `k`.
pub fn invert(field: &mut dyn VectorField, z: &[f32], n_steps: usize) -> Result<Vec<Vec<f32>>> {
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be positive".into()));
    }
    let h = 1.0 / n_steps as f64;
    let mut y = z.to_vec();
    let mut states = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let t = (n_steps - i) as f64 / n_steps as f64;
        let v = eval_checked(field, &y, t)?;
        for (yi, vi) in y.iter_mut().zip(v) {
            *yi -= h as f32 * vi;
        }
        check_finite(&y, i + 1)?;
        states.push(y.clone());
    }
    states.reverse();
    Ok(states)
}

/// Copies frames outside `[s, e)` from `src` into `dst`.
pub fn replace_context(dst: &mut [f32], src: &[f32], dim: usize, s: usize, e: usize) {
    dst[..s * dim].copy_from_slice(&src[..s * dim]);
    dst[e * dim..].copy_from_slice(&src[e * dim..]);
}

fn check_mask(len_values: usize, dim: usize, s: usize, e: usize) -> Result<usize> {
    if dim == 0 || len_values % dim != 0 {
        return Err(Error::Shape(format!("{len_values} values do not form frames of {dim}")));
    }
    let len = len_values / dim;
    if s > e || e > len {
        return Err(Error::Invalid(format!("mask [{s}, {e}) does not fit {len} frames")));
    }
    Ok(len)
}

/// Zero-shot inpainting by inversion. `inv` is the field used to invert
/// `z0`, `fwd` the field used to regenerate; `y` is the starting noise.
/// Frames outside `[s, e)` of the result are those of `z0`.
#[allow(clippy::too_many_arguments)]
pub fn zs_inpaint(
    inv: &mut dyn VectorField,
    fwd: &mut dyn VectorField,
    z0: &[f32],
    dim: usize,
    s: usize,
    e: usize,
    n_steps: usize,
    mut y: Vec<f32>,
) -> Result<Vec<f32>> {
    let len = check_mask(z0.len(), dim, s, e)?;
    if y.len() != z0.len() {
        return Err(Error::Shape("start state and source differ in size".into()));
    }
    if s == e {
        return Ok(z0.to_vec());
    }
    if s == 0 && e == len {
        return euler(fwd, y, n_steps, None);
    }
    let noises = invert(inv, z0, n_steps)?;
    let h = 1.0 / n_steps as f64;
    for (k, n) in noises.iter().enumerate() {
        replace_context(&mut y, n, dim, s, e);
        let v = eval_checked(fwd, &y, k as f64 * h)?;
        for (yi, vi) in y.iter_mut().zip(v) {
            *yi += h as f32 * vi;
        }
        check_finite(&y, k + 1)?;
    }
    replace_context(&mut y, z0, dim, s, e);
    Ok(y)
}

/// Supervised inpainting: the context of the state is reset to `z0` before
/// every Euler step and once more at the end.
pub fn sup_inpaint(
    field: &mut dyn VectorField,
    z0: &[f32],
    dim: usize,
    s: usize,
    e: usize,
    n_steps: usize,
    mut y: Vec<f32>,
) -> Result<Vec<f32>> {
    check_mask(z0.len(), dim, s, e)?;
    if y.len() != z0.len() {
        return Err(Error::Shape("start state and source differ in size".into()));
    }
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be positive".into()));
    }
    let h = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        replace_context(&mut y, z0, dim, s, e);
        let v = eval_checked(field, &y, k as f64 * h)?;
        for (yi, vi) in y.iter_mut().zip(v) {
            *yi += h as f32 * vi;
        }
        check_finite(&y, k + 1)?;
    }
    replace_context(&mut y, z0, dim, s, e);
    Ok(y)
}

/// How inpainting spans are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum MaskPolicy {
    /// Width `L / 2`, start uniform in `[0.1 L, 0.9 L)` then lowered so the
    /// span ends by `0.9 L`.
    Half,
    /// Fixed width with a minimum margin on both sides, start uniform.
    Margin { mask_seconds: f64, margin_seconds: f64 },
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::Margin {
            mask_seconds: 5.0,
            margin_seconds: 1.0,
        }
    }
}

impl MaskPolicy {
    /// Draws `[s, e)` for a sequence of `len` frames at `frame_rate`.
    pub fn draw(&self, len: usize, frame_rate: f64, rng: &mut SeededRng) -> Result<(usize, usize)> {
        match *self {
            MaskPolicy::Half => {
                let m = len / 2;
                let hi = (0.9 * len as f64).floor() as usize;
                if m == 0 || hi < m {
                    return Err(Error::Invalid(format!("{len} frames are too short for a half mask")));
                }
                let x = 0.1 * len as f64 + rng.uniform() * 0.8 * len as f64;
                let s = (x.floor() as usize).min(hi - m);
                Ok((s, s + m))
            }
            MaskPolicy::Margin {
                mask_seconds,
                margin_seconds,
            } => {
                let m = (mask_seconds * frame_rate).round() as usize;
                let margin = (margin_seconds * frame_rate).round() as usize;
                if m == 0 || len < m + 2 * margin {
                    return Err(Error::Invalid(format!(
                        "{len} frames cannot hold a {mask_seconds} s mask with {margin_seconds} s margins"
                    )));
                }
                let s = margin + rng.below(len - m - 2 * margin + 1);
                Ok((s, s + m))
            }
        }
    }
}

/// Guided field of a bidirectional backbone over a `[len, dim]` state.
/// The unconditional branch uses null ids on every stream and the null
/// caption.
pub struct ModelField<'a> {
    pub model: &'a Backbone<f32>,
    pub cond: CondIds,
    pub caption: Vec<u32>,
    pub alpha: f64,
    /// Backbone forwards so far.
    pub evals: usize,
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a Backbone<f32>, cond: CondIds, caption: &[u32], alpha: f64) -> Self {
        Self {
            model,
            cond,
            caption: caption.to_vec(),
            alpha,
            evals: 0,
        }
    }

    fn forward(&mut self, y: &[f32], tau: f64, null: bool) -> Result<Vec<f32>> {
        self.evals += 1;
        let nulls;
        let (cond, caption): (&CondIds, &[u32]) = if null {
            nulls = CondIds::null(&self.model.config.cond_vocab, self.cond.len);
            (&nulls, &[])
        } else {
            (&self.cond, &self.caption)
        };
        Ok(self
            .model
            .forward(&SeqInput {
                input: Input::Latent(y),
                cond,
                caption,
                tau: Some(tau),
            })?
            .0)
    }
}

impl VectorField for ModelField<'_> {
    /// `(1 - alpha) u + alpha c`; one forward suffices at alpha 0 or 1.
    fn eval(&mut self, y: &[f32], tau: f64) -> Result<Vec<f32>> {
        if self.alpha == 1.0 {
            return self.forward(y, tau, false);
        }
        if self.alpha == 0.0 {
            return self.forward(y, tau, true);
        }
        let c = self.forward(y, tau, false)?;
        let u = self.forward(y, tau, true)?;
        Ok(crate::ar::guide(&c, &u, self.alpha))
    }
}

/// One flow-matching training sequence in normalized latent space.
#[derive(Debug, Clone)]
pub struct FmExample {
    /// `[len, dim]` target latent.
    pub z: Vec<f32>,
    pub dim: usize,
    pub cond: CondIds,
    pub caption: Vec<u32>,
    pub tau: f64,
    pub y0: Vec<f32>,
    /// When set, context frames of the state hold `z` and only frames of
    /// the span carry loss.
    pub span: Option<(usize, usize)>,
}

impl FmExample {
    fn state(&self, path: &OtPath) -> Vec<f32> {
        let mut y = path.psi(self.tau, &self.y0, &self.z);
        if let Some((s, e)) = self.span {
            replace_context(&mut y, &self.z, self.dim, s, e);
        }
        y
    }

    fn region(&self) -> std::ops::Range<usize> {
        match self.span {
            Some((s, e)) => s * self.dim..e * self.dim,
            None => 0..self.z.len(),
        }
    }

    /// `(1 + tau) * MSE` over the loss region.
    pub fn loss(&self, model: &Backbone<f32>, path: &OtPath) -> Result<f64> {
        let y = self.state(path);
        let (out, _) = model.forward(&self.seq_input(&y))?;
        let r = self.region();
        Ok(weighted_mse(self.tau, &out[r.clone()], &path.velocity(&self.y0[r.clone()], &self.z[r])))
    }

    /// Loss, accumulating `scale * d(loss)/d(params)` into `grads`.
    pub fn loss_backward(&self, model: &Backbone<f32>, path: &OtPath, scale: f32, grads: &mut ParamSet<f32>) -> Result<f64> {
        let y = self.state(path);
        let (out, tape) = model.forward(&self.seq_input(&y))?;
        let r = self.region();
        let target = path.velocity(&self.y0[r.clone()], &self.z[r.clone()]);
        let w = (1.0 + self.tau) / r.len() as f64;
        let mut dout = vec![0f32; out.len()];
        let mut sq = 0.0;
        for ((d, &o), &t) in dout[r.clone()].iter_mut().zip(&out[r]).zip(&target) {
            let diff = o as f64 - t as f64;
            sq += diff * diff;
            *d = scale * (2.0 * w * diff) as f32;
        }
        model.backward(&tape, &dout, grads);
        Ok(w * sq)
    }

    fn seq_input<'b>(&'b self, y: &'b [f32]) -> SeqInput<'b, f32> {
        SeqInput {
            input: Input::Latent(y),
            cond: &self.cond,
            caption: &self.caption,
            tau: Some(self.tau),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(c: Vec<f32>) -> impl FnMut(&[f32], f64) -> Result<Vec<f32>> {
        move |_: &[f32], _| Ok(c.clone())
    }

    #[test]
    fn psi_endpoints() {
        let p = OtPath::default();
        let y0 = [1.0f32, -2.0];
        let y1 = [0.5f32, 3.0];
        assert_eq!(p.psi(0.0, &y0, &y1), y0.to_vec());
        let end = p.psi(1.0, &y0, &y1);
        for i in 0..2 {
            assert!((end[i] as f64 - (1e-4 * y0[i] as f64 + y1[i] as f64)).abs() < 1e-6);
        }
        let p0 = OtPath { sigma_min: 0.0 };
        assert_eq!(p0.psi(0.5, &[0.0], &[2.0]), vec![1.0]);
    }

    #[test]
    fn target_field_cases() {
        let p = OtPath::default();
        let v = p.target_field(0.0, &[2.0], &[1.0]).unwrap();
        assert!((v[0] as f64 - (1.0 - 0.9999 * 2.0)).abs() < 1e-6);
        let p0 = OtPath { sigma_min: 0.0 };
        assert_eq!(p0.target_field(0.0, &[1.5], &[1.5]).unwrap(), vec![0.0]);
        assert!(p0.target_field(1.0, &[1.0], &[1.0]).is_err());
        assert!(OtPath::new(0.0).is_err() && OtPath::new(1.0).is_err());
    }

    #[test]
    fn field_constant_along_path() {
        let p = OtPath::default();
        let y0 = [0.3f32, -1.2, 2.0];
        let y1 = [1.0f32, 0.4, -0.7];
        let want = p.velocity(&y0, &y1);
        for tau in [0.0, 0.3, 0.9] {
            let v = p.target_field(tau, &p.psi(tau, &y0, &y1), &y1).unwrap();
            for (a, b) in v.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn loss_weighting() {
        assert!((weighted_mse(0.5, &[1.0, 3.0], &[0.0, 1.0]) - 1.5 * 2.5).abs() < 1e-12);
        assert_eq!(weighted_mse(0.0, &[1.0], &[0.0]), 1.0);
        assert_eq!(weighted_mse(1.0, &[1.0], &[0.0]), 2.0);
    }

    #[test]
    fn exact_model_has_zero_loss() {
        let p = OtPath::default();
        let z = vec![0.5f32; 6];
        let mut a = SeededRng::new(1);
        let mut b = SeededRng::new(2);
        // Replays the noise stream to know y0 inside the oracle.
        let mut replay = SeededRng::new(2);
        let loss = fm_loss(
            &p,
            &[&z],
            |_, y, tau| {
                let y0 = replay.gauss_vec(z.len());
                assert_eq!(p.psi(tau, &y0, &z), y);
                p.target_field(tau, y, &z)
            },
            &mut a,
            &mut b,
        )
        .unwrap();
        assert!(loss < 1e-9, "{loss}");
    }

    #[test]
    fn euler_cases() {
        let y = euler(&mut constant(vec![0.25, -1.5]), vec![1.0, 2.0], 8, None).unwrap();
        assert_eq!(y, vec![1.25, 0.5]);
        let mut lin = |y: &[f32], _| Ok(y.to_vec());
        let y = euler(&mut lin, vec![1.0], 10, None).unwrap();
        assert!((y[0] as f64 - 1.1f64.powi(10)).abs() < 1e-5);
        assert!((y[0] - 2.59374).abs() < 1e-4);
        let mut trace = Vec::new();
        euler(&mut constant(vec![0.0]), vec![0.0], 10, Some(&mut trace)).unwrap();
        assert_eq!(trace.len(), 10);
        assert_eq!(trace[3].tau, 0.3);
    }

    #[test]
    fn euler_reports_non_finite_step() {
        let mut boom = |_: &[f32], tau: f64| Ok(vec![if tau >= 0.5 { f32::INFINITY } else { 0.0 }]);
        match euler(&mut boom, vec![0.0], 4, None) {
            Err(Error::NonFinite { step }) => assert_eq!(step, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dopri5_exponential() {
        let mut f = |y: &[f32], _| Ok(y.to_vec());
        let out = dopri5(&mut f, vec![1.0], 1e-4, 1e-5, 1000, None).unwrap();
        assert!((out.y[0] as f64 - std::f64::consts::E).abs() < 1e-3);
    }

    #[test]
    fn dopri5_constant_single_step() {
        let mut trace = Vec::new();
        let out = dopri5(&mut constant(vec![2.0]), vec![1.0], 1e-3, 1e-5, 1000, Some(&mut trace)).unwrap();
        assert!(trace[0].accepted && trace[0].err == 0.0);
        assert_eq!(out.y, vec![3.0]);
        assert_eq!(out.rejected, 0);
    }

    #[test]
    fn dopri5_polynomial_exact() {
        // dy/dtau = 1 + 2 tau + 3 tau^2 - tau^4
        let mut f = |_: &[f32], t: f64| Ok(vec![(1.0 + 2.0 * t + 3.0 * t * t - t.powi(4)) as f32]);
        let out = dopri5(&mut f, vec![0.0], 1e-3, 1e-5, 1000, None).unwrap();
        assert!((out.y[0] as f64 - (1.0 + 1.0 + 1.0 - 0.2)).abs() < 1e-6);
        assert!(out.accepted <= 5, "{}", out.accepted);
    }

    #[test]
    fn dopri5_max_evals_keeps_state() {
        let mut f = |y: &[f32], _| Ok(y.to_vec());
        match dopri5(&mut f, vec![1.0], 1e-12, 1e-14, 20, None) {
            Err(Error::MaxEvals { state, tau, .. }) => {
                assert_eq!(state.len(), 1);
                assert!(tau < 1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inversion_round_trip_for_constant_field() {
        let c = vec![0.3f32, -0.2, 0.9];
        let z = [1.0f32, 2.0, -3.0];
        let states = invert(&mut constant(c.clone()), &z, 7).unwrap();
        assert_eq!(states.len(), 7);
        let back = euler(&mut constant(c), states[0].clone(), 7, None).unwrap();
        for (a, b) in back.iter().zip(&z) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn single_step_inversion() {
        let mut f = |y: &[f32], t: f64| Ok(y.iter().map(|v| v * t as f32 + 1.0).collect());
        let s = invert(&mut f, &[2.0], 1).unwrap();
        assert_eq!(s, vec![vec![2.0 - 3.0]]);
    }

    #[test]
    fn inpainting_keeps_context() {
        let dim = 2;
        let z0: Vec<f32> = (0..20).map(|i| i as f32 * 0.37 - 2.0).collect();
        let noise: Vec<f32> = (0..20).map(|i| (i as f32).sin()).collect();
        let mut f = |y: &[f32], t: f64| Ok(y.iter().map(|v| 0.5 - v * t as f32).collect());
        let mut g = |y: &[f32], _t: f64| Ok(y.iter().map(|v| v * 0.1).collect());
        let a = zs_inpaint(&mut f, &mut g, &z0, dim, 3, 7, 5, noise.clone()).unwrap();
        let b = sup_inpaint(&mut g, &z0, dim, 3, 7, 5, noise.clone()).unwrap();
        for out in [a, b] {
            assert_eq!(out[..6], z0[..6]);
            assert_eq!(out[14..], z0[14..]);
            assert_ne!(out[6..14], z0[6..14]);
        }
        assert_eq!(zs_inpaint(&mut f, &mut g, &z0, dim, 4, 4, 5, noise.clone()).unwrap(), z0);
        let full = zs_inpaint(&mut f, &mut g, &z0, dim, 0, 10, 5, noise.clone()).unwrap();
        assert_eq!(full, euler(&mut g, noise.clone(), 5, None).unwrap());
        assert!(sup_inpaint(&mut g, &z0, dim, 5, 11, 5, noise).is_err());
    }

    #[test]
    fn mask_policies() {
        let mut rng = SeededRng::new(3);
        for _ in 0..200 {
            let (s, e) = MaskPolicy::Half.draw(500, 50.0, &mut rng).unwrap();
            assert_eq!(e - s, 250);
            assert!(s >= 50 && e <= 450);
            let (s, e) = MaskPolicy::default().draw(500, 50.0, &mut rng).unwrap();
            assert_eq!(e - s, 250);
            assert!(s >= 50 && e <= 450);
        }
        assert!(MaskPolicy::default().draw(300, 50.0, &mut rng).is_err());
    }
}
