//! Concept removal: fine-tuning methods and inference-time guidance.

mod config;
mod finetune;
mod guidance;

pub use config::{EraseConfig, EraseMethod};
pub use finetune::{
    ema_update, ema_update_in_place, esd_finetune, esd_loss, esd_target, finetune, generate_latent,
    generate_latents, sdd_finetune, sdd_loss, EraseHistory, EraseOutcome, FinetuneObserver,
    IterationRecord, MetricRecord, NoObserver,
};
pub use guidance::*;
