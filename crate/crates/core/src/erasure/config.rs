use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamGroup;
use crate::optim::{LrSchedule, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EraseMethod {
    Sdd,
    /// ESD on the conditioning (cross-attention) group.
    EsdX,
    /// ESD on the trunk (non-conditioning) group.
    EsdU,
    EsdAll,
}

impl EraseMethod {
    pub fn default_group(self) -> ParamGroup {
        match self {
            EraseMethod::Sdd | EraseMethod::EsdX => ParamGroup::Conditioning,
            EraseMethod::EsdU => ParamGroup::Trunk,
            EraseMethod::EsdAll => ParamGroup::All,
        }
    }

    pub fn is_esd(self) -> bool {
        self != EraseMethod::Sdd
    }
}

impl std::str::FromStr for EraseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sdd" => Self::Sdd,
            "esd_x" => Self::EsdX,
            "esd_u" => Self::EsdU,
            "esd_all" => Self::EsdAll,
            other => return Err(Error::Config(format!("unknown erase method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EraseConfig {
    pub method: EraseMethod,
    /// Concept ids to remove, 1-based.
    pub targets: Vec<usize>,
    pub iterations: usize,
    /// DDIM steps used to generate training latents.
    pub sampler_steps: usize,
    /// EMA decay of the teacher.
    pub ema_decay: f64,
    /// CFG scale used when generating training latents.
    pub s_g: f64,
    /// ESD negative-guidance scale.
    pub s_s: f64,
    pub optim: OptimConfig,
    /// Parameter group to update; `None` picks the method's default.
    pub group: Option<ParamGroup>,
    /// Latents per iteration.
    pub micro_batch: usize,
    /// Iterations between checkpoints and metric readings.
    pub checkpoint_every: usize,
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self::sdd(vec![1])
    }
}

impl EraseConfig {
    pub fn sdd(targets: Vec<usize>) -> Self {
        let iterations = 1500;
        Self {
            method: EraseMethod::Sdd,
            targets,
            iterations,
            sampler_steps: 25,
            ema_decay: 0.999,
            s_g: 3.0,
            s_s: 3.0,
            optim: OptimConfig {
                lr: 3e-3,
                schedule: LrSchedule::CosineWarmup {
                    warmup_steps: iterations / 3,
                },
                ..OptimConfig::default()
            },
            group: None,
            micro_batch: 1,
            checkpoint_every: 100,
        }
    }

    pub fn esd(method: EraseMethod, targets: Vec<usize>) -> Self {
        Self {
            method,
            ..Self::sdd(targets)
        }
    }

    pub fn group(&self) -> ParamGroup {
        self.group.unwrap_or(self.method.default_group())
    }

    pub fn validate(&self, n_concepts: usize) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config(
                "erasure needs at least one target concept".into(),
            ));
        }
        if let Some(&bad) = self.targets.iter().find(|&&k| k == 0 || k > n_concepts) {
            return Err(Error::UnknownConcept {
                id: bad,
                k: n_concepts,
            });
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must be in [0, 1], got {}",
                self.ema_decay
            )));
        }
        if !self.s_g.is_finite() || !self.s_s.is_finite() {
            return Err(Error::Config("guidance scales must be finite".into()));
        }
        if self.sampler_steps == 0 || self.micro_batch == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "sampler_steps, micro_batch and checkpoint_every must be >= 1".into(),
            ));
        }
        self.optim.validate()
    }
}
