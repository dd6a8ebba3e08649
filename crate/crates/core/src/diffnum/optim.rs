//! AdamW and RMSprop with the update rules of their standard definitions.

use alloc::{format, vec::Vec};

use super::tape::Tensor;
use crate::{num, Error, Result};

/// Common interface of the two optimizers.
pub trait Optimizer {
    /// Updates `params` in place from `grads` (one tensor each, same shapes).
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()>;
    /// Learning rate that the next step will use.
    fn learning_rate(&self) -> f64;
    fn steps_taken(&self) -> u64;
}

fn check(params: &[Tensor], grads: &[Tensor], moments: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.len() {
        return Err(Error::dim("optimizer parameter groups", moments.len(), grads.len()));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != moments[k].shape() {
            return Err(Error::dim("optimizer tensor", p.len(), g.len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in parameter group {k}")));
        }
    }
    Ok(())
}

fn zeros_like(shapes: &[(usize, usize)]) -> Vec<Tensor> {
    shapes.iter().map(|(r, c)| Tensor::zeros(*r, *c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            m: zeros_like(shapes),
            v: zeros_like(shapes),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check(params, grads, &self.m)?;
        self.t += 1;
        let c = self.cfg;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - num::powi(c.beta1, t);
        let bc2 = 1.0 - num::powi(c.beta2, t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                p[i] -= c.lr * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * m_hat / (num::sqrt(v_hat) + c.eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay applied after every step.
    pub decay: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            alpha: 0.99,
            eps: 1e-8,
            decay: 0.9999,
        }
    }
}

/// RMSprop with exponential learning-rate decay.
#[derive(Debug, Clone)]
pub struct RmsProp {
    cfg: RmsPropConfig,
    sq: Vec<Tensor>,
    lr: f64,
    t: u64,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            sq: zeros_like(shapes),
            lr: cfg.lr,
            t: 0,
        }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check(params, grads, &self.sq)?;
        let c = self.cfg;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(self.sq.iter_mut()) {
            for i in 0..p.len() {
                s[i] = c.alpha * s[i] + (1.0 - c.alpha) * g[i] * g[i];
                p[i] -= self.lr * g[i] / (num::sqrt(s[i]) + c.eps);
            }
        }
        self.t += 1;
        self.lr = c.lr * num::powi(c.decay, i32::try_from(self.t).unwrap_or(i32::MAX));
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &[(2, 1)]);
        let mut p = [Tensor::from_element(2, 1, 1.5)];
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(2, 1)]).unwrap();
        }
        assert_eq!(p[0], Tensor::from_element(2, 1, 1.5));

        let mut rms = RmsProp::new(RmsPropConfig::default(), &[(2, 1)]);
        rms.step(&mut p, &[Tensor::zeros(2, 1)]).unwrap();
        assert_eq!(p[0], Tensor::from_element(2, 1, 1.5));
    }

    #[test]
    fn rmsprop_learning_rate_schedule() {
        let mut rms = RmsProp::new(RmsPropConfig::default(), &[(1, 1)]);
        let mut p = [Tensor::zeros(1, 1)];
        for _ in 0..10_000 {
            rms.step(&mut p, &[Tensor::from_element(1, 1, 1e-3)]).unwrap();
        }
        assert_eq!(rms.steps_taken(), 10_000);
        let expected = 5e-4 * 0.9999f64.powi(10_000);
        assert!((rms.learning_rate() - expected).abs() < 1e-15);
        assert!((rms.learning_rate() - 1.839e-4).abs() < 1e-7);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &[(1, 1)]);
        let mut p = [Tensor::zeros(1, 1)];
        for _ in 0..5000 {
            let g = 2.0 * (p[0][0] - 3.0);
            opt.step(&mut p, &[Tensor::from_element(1, 1, g)]).unwrap();
        }
        assert!((p[0][0] - 3.0).abs() < 1e-6, "{}", p[0][0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[(1, 1)]);
        let mut p = [Tensor::zeros(1, 1)];
        assert!(matches!(
            opt.step(&mut p, &[Tensor::from_element(1, 1, f64::NAN)]),
            Err(Error::Numerical(_))
        ));
    }
}
