//! Conditional noise predictor with a cross-attention conditioning pathway.

pub mod checkpoint;
mod net;
mod params;
mod train;
mod vocab;

use ndarray::Array2;

pub use net::{backward, forward, time_embedding, CondBatch, ForwardCache, TimeBatch};
pub use params::{
    select_group, Activation, ArchitectureConfig, Gradient, Layout, ModelParams, ParamGroup,
    ParamVec, TensorSpec,
};
pub use train::{denoising_loss, train_base, BaseTrainer, TrainConfig, TrainOutcome};
pub use vocab::{ConceptVocabulary, TokenSequence};

use crate::error::{check_dim, Result};
use crate::schedule::{NoisePredictor, NoiseSchedule};

fn single_row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// `eps_theta(x_t, cond, t)` for one sample.
pub fn predict_noise(
    params: &ModelParams,
    x_t: &[f64],
    t: usize,
    cond: &TokenSequence,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let (out, _) = forward(
        params,
        &single_row(x_t),
        TimeBatch::Shared(t),
        CondBatch::Shared(cond),
        sched.steps(),
    )?;
    Ok(out.row(0).to_vec())
}

/// Gradient of `<upstream, predict_noise(params, ...)>` over all parameters.
pub fn backprop_noise(
    params: &ModelParams,
    x_t: &[f64],
    t: usize,
    cond: &TokenSequence,
    sched: &NoiseSchedule,
    upstream: &[f64],
) -> Result<Gradient> {
    check_dim(params.arch().data_dim, upstream.len())?;
    let (_, cache) = forward(
        params,
        &single_row(x_t),
        TimeBatch::Shared(t),
        CondBatch::Shared(cond),
        sched.steps(),
    )?;
    backward(params, &cache, &single_row(upstream))
}

/// A parameter set bound to its vocabulary and schedule, usable by samplers.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a ConceptVocabulary,
    pub sched: &'a NoiseSchedule,
}

impl<'a> Denoiser<'a> {
    pub fn new(
        params: &'a ModelParams,
        vocab: &'a ConceptVocabulary,
        sched: &'a NoiseSchedule,
    ) -> Self {
        Self {
            params,
            vocab,
            sched,
        }
    }
}

impl NoisePredictor for Denoiser<'_> {
    fn data_dim(&self) -> usize {
        self.params.arch().data_dim
    }

    fn predict(&self, x: &Array2<f64>, t: usize, concepts: &[usize]) -> Result<Array2<f64>> {
        let cond = self.vocab.embed(concepts)?;
        let (out, _) = forward(
            self.params,
            x,
            TimeBatch::Shared(t),
            CondBatch::Shared(&cond),
            self.sched.steps(),
        )?;
        Ok(out)
    }
}
