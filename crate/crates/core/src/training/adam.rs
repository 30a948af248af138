use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be finite and nonnegative", self.lr)));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros_like(t: &Tensor) -> Self {
        Self {
            m: Tensor::zeros(t.shape()),
            v: Tensor::zeros(t.shape()),
        }
    }
}

/// One bias-corrected Adam update of `param` at step `t` (1-based).
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut Moments, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam_step", "step count starts at 1"));
    }
    for other in [grad, &state.m, &state.v] {
        if other.shape() != param.shape() {
            return Err(Error::shape("adam_step", param.shape(), other.shape()));
        }
    }
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a fixed, ordered list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    moments: Vec<Moments>,
    t: u64,
}

impl Adam {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            cfg,
            moments: params.into_iter().map(Moments::zeros_like).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates `params` (same order and shapes as at construction).
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: impl IntoIterator<Item = &'a Tensor>,
    ) -> Result<()> {
        self.t += 1;
        let mut count = 0;
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.moments) {
            adam_step(p, g, s, &self.cfg, self.t)?;
            count += 1;
        }
        if count != self.moments.len() {
            return Err(Error::invalid("adam", format!("{count} tensors for {} moments", self.moments.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_no_update() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut s = Moments::zeros_like(&p);
        for t in 1..5 {
            adam_step(&mut p, &Tensor::zeros([3]), &mut s, &AdamConfig::default(), t).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_hand_value() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut p = Tensor::scalar(0.0);
        let mut s = Moments::zeros_like(&p);
        adam_step(&mut p, &Tensor::scalar(1.0), &mut s, &cfg, 1).unwrap();
        assert!((p.item() - (-0.01 / (1.0 + 1e-8))).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_converges_to_lr_sign_steps() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = Tensor::new([2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::new([2], vec![3.0, -0.5]).unwrap();
        let mut s = Moments::zeros_like(&p);
        let mut prev = p.clone();
        for t in 1..=200 {
            prev = p.clone();
            adam_step(&mut p, &g, &mut s, &cfg, t).unwrap();
        }
        let delta = p.sub(&prev).unwrap();
        assert!((delta.data()[0] + 0.1).abs() < 1e-6);
        assert!((delta.data()[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let mut p = Tensor::scalar(0.0);
        let mut s = Moments::zeros_like(&p);
        let cfg = AdamConfig::default();
        assert!(adam_step(&mut p, &Tensor::zeros([2]), &mut s, &cfg, 1).is_err());
        assert!(adam_step(&mut p, &Tensor::scalar(1.0), &mut s, &cfg, 0).is_err());
        assert!(AdamConfig { betas: (1.0, 0.9), ..cfg }.validate().is_err());
    }
}
