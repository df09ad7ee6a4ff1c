//! AdamW, the learning-rate schedule and the post-merge clipping ramp.

use std::f64::consts::PI;

use crate::error::{PoetError, Result};
use crate::scalar::{c, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        AdamWState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = T::zero());
        self.v.iter_mut().for_each(|x| *x = T::zero());
        self.step = 0;
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
/// A non-finite gradient aborts the step before anything is modified.
pub fn adamw_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamWState<T>, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(PoetError::shape(
            "adamw_step",
            format!("params {}, grads {}, state {}", params.len(), grads.len(), state.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(PoetError::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1: T = c(1.0 - b1.powi(t));
    let bc2: T = c(1.0 - b2.powi(t));
    let (b1t, b2t): (T, T) = (c(b1), c(b2));
    let (one_b1, one_b2): (T, T) = (c(1.0 - b1), c(1.0 - b2));
    let lr_t: T = c(lr);
    let eps: T = c(cfg.eps);
    let decay: T = c(1.0 - lr * cfg.weight_decay);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1t * *m + one_b1 * g;
        *v = b2t * *v + one_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn global_clip<T: Scalar>(grads: &mut [&mut [T]], threshold: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > threshold && norm > 0.0 {
        let s: T = c(threshold / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    /// Multiplier on the learning rate of orthogonal-factor parameters.
    pub poet_lr_scale: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub post_merge_clip_start: f64,
    pub post_merge_ramp_steps: u64,
    /// The post-merge ramp applies only while `global_step` is below this.
    pub post_merge_clip_active_steps: u64,
    pub merge_gap: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 1e-3,
            poet_lr_scale: 0.5,
            warmup_steps: 100,
            total_steps: 1000,
            min_lr_ratio: 0.01,
            weight_decay: 0.01,
            clip_norm: 1.0,
            post_merge_clip_start: 0.01,
            post_merge_ramp_steps: 10,
            post_merge_clip_active_steps: 2000,
            merge_gap: 400,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PoetError::Config(m));
        if !(self.poet_lr_scale > 0.0) {
            return bad(format!("poet_lr_scale must be > 0, got {}", self.poet_lr_scale));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!("min_lr_ratio must lie in [0, 1], got {}", self.min_lr_ratio));
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!("warmup_steps ({}) must be < total_steps ({})", self.warmup_steps, self.total_steps));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(self.clip_norm > 0.0) || !(self.post_merge_clip_start > 0.0) {
            return bad("clip thresholds must be > 0".into());
        }
        if self.post_merge_clip_start > self.clip_norm {
            return bad("post_merge_clip_start must not exceed clip_norm".into());
        }
        if self.post_merge_ramp_steps == 0 {
            return bad("post_merge_ramp_steps must be >= 1".into());
        }
        if self.merge_gap == 0 {
            return bad("merge_gap must be >= 1".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr_ratio * base_lr`
/// at `total_steps`. Steps past the end stay at the floor.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let cosine = 0.5 * (1.0 + (PI * progress).cos());
    cfg.base_lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine)
}

/// Learning rate of orthogonal-factor parameters.
pub fn poet_lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    cfg.poet_lr_scale * lr_at(step, cfg)
}

/// Clip threshold right after a merge: starts at `post_merge_clip_start`
/// and rises linearly to `clip_norm` over `post_merge_ramp_steps`, inclusive.
pub fn clip_threshold_at(global_step: u64, steps_since_merge: u64, cfg: &ScheduleConfig) -> f64 {
    if global_step < cfg.post_merge_clip_active_steps && steps_since_merge <= cfg.post_merge_ramp_steps {
        let frac = steps_since_merge as f64 / cfg.post_merge_ramp_steps as f64;
        cfg.post_merge_clip_start + (cfg.clip_norm - cfg.post_merge_clip_start) * frac
    } else {
        cfg.clip_norm
    }
}
