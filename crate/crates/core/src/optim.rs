//! AdamW with optional parameter-group masking, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradient, ModelParams, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_steps`, then cosine decay to zero at the
    /// final step.
    CosineWarmup {
        warmup_steps: usize,
    },
}

impl LrSchedule {
    /// Multiplier for 0-based `step` out of `total` steps.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::CosineWarmup { warmup_steps } => {
                if step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = total.saturating_sub(warmup_steps).max(1) as f64;
                    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
                    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "eps must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam. Coordinates outside the active group are left
/// untouched, including by weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimConfig,
    mask: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &ModelParams, group: ParamGroup) -> Self {
        let n = params.len();
        Self {
            config,
            mask: params.layout().mask(group),
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn set_state(&mut self, m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                got: m.len(),
            });
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// One update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ModelParams, grad: &Gradient, lr: f64) {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let p = params.values_mut();
        let g = grad.values();
        for i in 0..p.len() {
            if !self.mask[i] {
                continue;
            }
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= lr * c.weight_decay * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureConfig;

    #[test]
    fn cosine_warmup_shape() {
        let s = LrSchedule::CosineWarmup { warmup_steps: 500 };
        assert!((s.factor(0, 1500) - 1.0 / 500.0).abs() < 1e-15);
        assert_eq!(s.factor(499, 1500), 1.0);
        assert_eq!(s.factor(500, 1500), 1.0);
        assert!((s.factor(1000, 1500) - 0.5).abs() < 1e-12);
        assert!(s.factor(1499, 1500) < 1e-4);
        assert_eq!(LrSchedule::Constant.factor(10, 20), 1.0);
    }

    #[test]
    fn masked_update_leaves_other_group_bitwise() {
        let arch = ArchitectureConfig {
            hidden: 6,
            n_hidden: 1,
            embed_dim: 4,
            time_dim: 4,
            ..Default::default()
        };
        let mut rng = crate::rng::RngStream::new(0, 0);
        let mut p = ModelParams::init(arch, &mut rng).unwrap();
        let before = p.clone();
        let mut g = p.clone();
        g.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut opt = AdamW::new(OptimConfig::default(), &p, ParamGroup::Conditioning);
        opt.update(&mut p, &g, 1e-2);
        let mask = p.layout().mask(ParamGroup::Conditioning);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                assert_ne!(p.values()[i], before.values()[i]);
            } else {
                assert_eq!(p.values()[i].to_bits(), before.values()[i].to_bits());
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first Adam step is lr * sign(g) without decay
        let arch = ArchitectureConfig {
            hidden: 2,
            n_hidden: 0,
            embed_dim: 2,
            time_dim: 2,
            ..Default::default()
        };
        let mut p = ModelParams::zeros(arch).unwrap();
        let mut g = p.clone();
        g.values_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i % 2 == 0 { 3.0 } else { -0.5 });
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p, ParamGroup::All);
        opt.update(&mut p, &g, 0.1);
        for (i, v) in p.values().iter().enumerate() {
            let want = if i % 2 == 0 { -0.1 } else { 0.1 };
            assert!((v - want).abs() < 1e-8);
        }
    }
}
