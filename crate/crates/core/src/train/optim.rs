//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            warmup_steps: 1000,
            betas: [0.9, 0.95],
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(self.max_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be nonnegative".into(),
            ));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!(
                "betas {:?} must lie in [0, 1)",
                self.betas
            )));
        }
        Ok(())
    }
}

/// Linear ramp `0 → max_lr` over the warmup, then cosine decay to zero at `total`.
pub fn lr_at(step: u64, total: u64, cfg: &OptimizerConfig) -> f64 {
    let w = cfg.warmup_steps.max(1);
    if step < w {
        return cfg.max_lr * step as f64 / w as f64;
    }
    if total <= w {
        return cfg.max_lr;
    }
    let progress = ((step - w) as f64 / (total - w) as f64).min(1.0);
    0.5 * cfg.max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments with the number of completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update with decoupled decay, `p ← p − lr (m̂/(√v̂+ε) + λ p)`.
    ///
    /// Non-finite gradients abort before any state changes.
    pub fn update(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[String],
        lr: f64,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                "parameter, gradient and moment counts differ",
            ));
        }
        for (k, g) in grads.iter().enumerate() {
            if g.shape() != params[k].shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient shape {:?} for `{}`", g.shape(), names[k]),
                ));
            }
            if !g.is_finite() {
                let bad = g.data().iter().filter(|x| !x.is_finite()).count();
                log::error!(
                    "{bad} non-finite gradient entries in `{}` at update {}",
                    names[k],
                    self.step + 1
                );
                return Err(Error::NonFiniteGradient {
                    param: names[k].clone(),
                    step: self.step + 1,
                });
            }
        }
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= lr * (mh / (vh.sqrt() + ADAM_EPS) + cfg.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig::default()
    }

    #[test]
    fn schedule_endpoints_and_junction() {
        let c = cfg();
        assert_eq!(lr_at(0, 5000, &c), 0.0);
        assert_eq!(lr_at(1, 5000, &c), 1e-6);
        assert_eq!(lr_at(1000, 5000, &c), 1e-3);
        assert!(lr_at(5000, 5000, &c).abs() < 1e-12);
        let left = c.max_lr * 999.999 / 1000.0;
        assert!((lr_at(1000, 5000, &c) - left).abs() / c.max_lr < 1e-5);
        let mid = lr_at(3000, 5000, &c);
        assert!((mid - 5e-4).abs() < 1e-15);
        assert!((0..=6000).all(|s| lr_at(s, 5000, &c) >= 0.0));
    }

    #[test]
    fn zero_gradient_zero_decay_keeps_params() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![0.5, -1.0]).unwrap()];
        let before = p.clone();
        let mut opt = AdamW::new(&p);
        let c = OptimizerConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        opt.update(&mut p, &[Tensor::zeros(1, 2)], &["w".into()], 1e-3, &c)
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decay_only_scales() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![0.5, -1.0]).unwrap()];
        let mut opt = AdamW::new(&p);
        opt.update(&mut p, &[Tensor::zeros(1, 2)], &["w".into()], 0.1, &cfg())
            .unwrap();
        assert_eq!(
            p[0].data(),
            &[0.5 * (1.0 - 0.1 * 0.01), -1.0 * (1.0 - 0.1 * 0.01)]
        );
    }

    #[test]
    fn hand_computed_scalar_steps() {
        let c = cfg();
        let mut p = vec![Tensor::scalar(2.0)];
        let mut opt = AdamW::new(&p);
        let lr = 0.01;
        opt.update(&mut p, &[Tensor::scalar(0.5)], &["x".into()], lr, &c)
            .unwrap();
        // m = 0.05, v = 0.0125, m̂ = 0.5, v̂ = 0.25.
        let expected1 = 2.0 - lr * (0.5 / (0.5 + ADAM_EPS) + 0.01 * 2.0);
        assert!((p[0].item() - expected1).abs() < 1e-15);
        opt.update(&mut p, &[Tensor::scalar(-1.0)], &["x".into()], lr, &c)
            .unwrap();
        let m: f64 = 0.9 * 0.05 + 0.1 * -1.0;
        let v: f64 = 0.95 * 0.0125 + 0.05 * 1.0;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.9025);
        let expected2 = expected1 - lr * (mh / (vh.sqrt() + ADAM_EPS) + 0.01 * expected1);
        assert!((p[0].item() - expected2).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(&p);
        let err = opt
            .update(
                &mut p,
                &[Tensor::scalar(f64::NAN)],
                &["bad".into()],
                0.1,
                &cfg(),
            )
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param, step: 1 } if param == "bad"));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.warmup_steps = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.betas = [0.9, 1.0];
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
