//! AdamW with global-norm clipping and a warmup-then-cosine learning rate.

use crate::params::Layout;
use crate::real::Real;

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// `final_ratio · base` at step `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub final_ratio: f64,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let frac = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.base * (self.final_ratio + (1.0 - self.final_ratio) * cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-9,
            weight_decay: 0.02,
            clip_norm: Some(1.0),
        }
    }
}

/// Optimizer state: first and second moments in the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Updates applied so far.
    pub steps: usize,
    /// Per-parameter flag: decoupled decay applies (tensors of rank ≥ 2).
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, layout: &Layout) -> Self {
        let mut decay = vec![false; layout.total];
        for t in &layout.tensors {
            if t.shape.len() >= 2 {
                decay[t.range()].iter_mut().for_each(|d| *d = true);
            }
        }
        Self {
            cfg,
            m: vec![T::zero(); layout.total],
            v: vec![T::zero(); layout.total],
            steps: 0,
            decay,
        }
    }

    /// Applies one update with learning rate `lr`; returns the gradient norm
    /// before clipping.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) -> f64 {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let norm = grads
            .iter()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 / (1.0 - b1.powi(t));
        let c2 = 1.0 / (1.0 - b2.powi(t));
        let (tb1, tb2, tscale) = (T::of(b1), T::of(b2), T::of(scale));
        let (t1b1, t1b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (tc1, tc2, teps) = (T::of(c1), T::of(c2), T::of(self.cfg.eps));
        let tlr = T::of(lr);
        let tdecay = T::of(lr * self.cfg.weight_decay);
        for i in 0..params.len() {
            let g = grads[i] * tscale;
            self.m[i] = tb1 * self.m[i] + t1b1 * g;
            self.v[i] = tb2 * self.v[i] + t1b2 * g * g;
            let mhat = self.m[i] * tc1;
            let vhat = self.v[i] * tc2;
            if self.decay[i] {
                params[i] -= tdecay * params[i];
            }
            params[i] -= tlr * mhat / (vhat.sqrt() + teps);
        }
        norm
    }
}
