//! Adam with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Optimizer state: first/second moment per parameter tensor plus the step
/// counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Moments are allocated to match the given parameter shapes.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Adam {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Rebuilds an optimizer from checkpointed state.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Adam { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update over all parameters. Gradients are read from each tensor's
    /// `grad` buffer; parameters without a gradient are treated as zero-grad
    /// (moments still decay).
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} params vs {} states", params.len(), self.m.len()),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(CoreError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param {i}: {} elements vs state {}", p.numel(), self.m[i].len()),
                });
            }
            if let Some(g) = &p.grad {
                if g.len() != p.numel() {
                    return Err(CoreError::ShapeMismatch {
                        op: "adam_step",
                        detail: format!("param {i}: grad {} vs data {}", g.len(), p.numel()),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - math::powf(c.beta1, self.step as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.step as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= c.lr * mhat / (math::sqrt(vhat) + c.eps);
            }
            p.grad = grad;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        // Seed a first moment by taking one real step, then feed zero grads.
        p.grad = Some(vec![0.5, -0.5]);
        opt.step(&mut [&mut p]).unwrap();
        let m_after_one = opt.m[0][0];
        p.grad = Some(vec![0.0, 0.0]);
        let before = p.data().to_vec();
        // With g = 0 the moments decay geometrically.
        opt.step(&mut [&mut p]).unwrap();
        assert!((opt.m[0][0] - 0.9 * m_after_one).abs() < 1e-15);
        // Params still move while the decayed first moment is non-zero, but a
        // zero-initialized optimizer with zero grads moves nothing:
        let mut q = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut opt2 = Adam::new(AdamConfig::default(), &[&q]);
        q.grad = Some(vec![0.0, 0.0]);
        opt2.step(&mut [&mut q]).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
        assert_ne!(before, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_step_size_approaches_lr() {
        // With a fixed gradient g, bias-corrected Adam steps approach
        // lr·g/(|g| + eps) ≈ lr·sign(g).
        let lr = 1e-3;
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(lr), &[&p]);
        let mut last = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            p.grad = Some(vec![0.25]);
            opt.step(&mut [&mut p]).unwrap();
            step = last - p.data()[0];
            last = p.data()[0];
        }
        assert!((step - lr).abs() < 1e-6, "step {step} vs lr {lr}");
    }

    #[test]
    fn three_steps_match_hand_recursion() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let grads = [0.3, -0.7, 0.2];
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = Adam::new(cfg, &[&p]);

        // Hand recursion, written independently of the implementation.
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vhat = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            theta -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
        }

        for g in grads {
            p.grad = Some(vec![g]);
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.data()[0] - theta).abs() < 1e-12, "{} vs {theta}", p.data()[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Tensor::zeros(&[3]);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        let mut wrong = Tensor::zeros(&[4]);
        wrong.grad = Some(vec![0.0; 4]);
        let err = opt.step(&mut [&mut wrong]).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch { .. }));
    }
}
