use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::num::Real;

/// Linear warmup to `peak` over `warmup` steps, then cosine decay reaching
/// zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 1e-4,
            warmup: 4000,
            total: 100_000,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total {
            return 0.0;
        }
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = (step - self.warmup) as f64 / span;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Updates applied so far.
    pub t: usize,
    m: ParamSet<T>,
    v: ParamSet<T>,
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>, decay: Vec<bool>) -> Self {
        assert_eq!(decay.len(), params.len());
        Self {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay,
        }
    }

    /// Applies one update with learning rate `lr`. Returns the gradient norm
    /// before clipping.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> f64 {
        let c = self.config;
        let norm = grads.sq_norm().sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (clip, lr_t, eps) = (T::of(clip), T::of(lr), T::of(c.eps));
        let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for i in 0..params.len() {
            let wd = T::of(if self.decay[i] { c.weight_decay } else { 0.0 });
            let (p, g) = (&mut params.data[i], &grads.data[i]);
            let (m, v) = (&mut self.m.data[i], &mut self.v.data[i]);
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let mh = m[j] * ibc1;
                let vh = v[j] * ibc2;
                let pj = p[j];
                p[j] = pj - lr_t * (mh / (vh.sqrt() + eps) + wd * pj);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.peak, 1e-4);
        assert_eq!(s.warmup, 4000);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(4000), 1e-4);
        assert!((s.lr(2000) - 5e-5).abs() < 1e-18);
        assert!(s.lr(s.total) <= 1e-9);
        assert!(s.lr(s.total - 1) <= 1e-9);
        let mid = s.warmup + (s.total - s.warmup) / 2;
        assert!((s.lr(mid) - 5e-5).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = LrSchedule {
            peak: 1e-3,
            warmup: 10,
            total: 100,
        };
        for t in 10..100 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    fn single(x: f64) -> ParamSet<f64> {
        ParamSet {
            names: vec!["x".into()],
            shapes: vec![vec![1]],
            data: vec![vec![x]],
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // After bias correction the first update is lr * sign(g).
        let mut p = single(1.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
            vec![true],
        );
        opt.step(&mut p, &single(0.3), 0.01);
        assert!((p.data[0][0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = single(3.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p, vec![false]);
        for _ in 0..2000 {
            let g = single(2.0 * (p.data[0][0] - 1.0));
            opt.step(&mut p, &g, 0.01);
        }
        assert!((p.data[0][0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &p,
            vec![true],
        );
        opt.step(&mut p, &single(0.0), 0.1);
        assert!((p.data[0][0] - 1.9).abs() < 1e-12);
    }
}
