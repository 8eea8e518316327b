//! Adam with element-level protection.
//!
//! A protected element (gradient factor exactly zero) is skipped outright:
//! no moment decay, no parameter movement. Zeroed gradients alone would not
//! be enough, because Adam's moment normalization turns any residual
//! gradient into a near-full-size step and stale moments keep pushing a
//! parameter after its gradient dies.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotId(usize);

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    slots: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, slots: Vec::new() }
    }

    pub fn register(&mut self, len: usize) -> SlotId {
        self.slots.push(Moments { m: vec![0.0; len], v: vec![0.0; len] });
        SlotId(self.slots.len() - 1)
    }

    /// Zero the moments of elements whose protection factor is exactly
    /// zero. Called when a task finishes and its units become protected.
    pub fn reset_protected(&mut self, slot: SlotId, factors: &[f64]) {
        let s = &mut self.slots[slot.0];
        debug_assert_eq!(s.m.len(), factors.len());
        for (i, &f) in factors.iter().enumerate() {
            if f == 0.0 {
                s.m[i] = 0.0;
                s.v[i] = 0.0;
            }
        }
    }

    /// Advance the shared step counter; call once per optimization step
    /// before the per-slot updates.
    pub fn step_begin(&mut self) {
        self.step += 1;
    }

    /// Apply one Adam update. `factors`, when given, holds the per-element
    /// gradient scale from protection: elements at exactly zero are
    /// skipped entirely.
    pub fn update(&mut self, slot: SlotId, param: &mut [f64], grad: &[f64], factors: Option<&[f64]>) {
        let cfg = self.config;
        let s = &mut self.slots[slot.0];
        debug_assert_eq!(param.len(), grad.len());
        debug_assert_eq!(param.len(), s.m.len());
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..param.len() {
            if let Some(f) = factors {
                if f[i] == 0.0 {
                    continue;
                }
            }
            let g = grad[i];
            s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g;
            s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = s.m[i] / bc1;
            let v_hat = s.v[i] / bc2;
            param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Scale a gradient vector to unit L2 norm when it exceeds it.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad {
            *g *= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.05, ..AdamConfig::default() });
        let slot = opt.register(2);
        let mut x = vec![3.0, -2.0];
        for _ in 0..400 {
            let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step_begin();
            opt.update(slot, &mut x, &grad, None);
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn protected_elements_never_move() {
        let mut opt = Adam::new(AdamConfig::default());
        let slot = opt.register(3);
        let mut x = vec![1.0, 2.0, 3.0];
        let factors = vec![0.0, 1.0, 0.5];
        // give the protected element stale moments first
        opt.step_begin();
        opt.update(slot, &mut x, &[0.7, 0.7, 0.7], None);
        let before = x[0];
        opt.reset_protected(slot, &factors);
        for _ in 0..10 {
            opt.step_begin();
            opt.update(slot, &mut x, &[0.9, 0.9, 0.9], Some(&factors));
        }
        assert_eq!(x[0].to_bits(), before.to_bits());
        assert_ne!(x[1], 2.0);
    }

    #[test]
    fn zero_gradient_with_zero_moments_is_a_fixed_point() {
        let mut opt = Adam::new(AdamConfig::default());
        let slot = opt.register(1);
        let mut x = vec![5.0];
        for _ in 0..5 {
            opt.step_begin();
            opt.update(slot, &mut x, &[0.0], None);
        }
        assert_eq!(x[0], 5.0);
    }

    #[test]
    fn clip_caps_large_norms_only() {
        let mut g = vec![3.0, 4.0];
        clip_grad_norm(&mut g, 1.0);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut small = vec![0.1, 0.1];
        let before = small.clone();
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, before);
    }
}
