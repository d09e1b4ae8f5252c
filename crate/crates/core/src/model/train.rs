use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::net::{backward, forward, CondBatch, TimeBatch};
use super::params::{ArchitectureConfig, ModelParams, ParamGroup};
use super::vocab::{ConceptVocabulary, TokenSequence};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::{AdamW, LrSchedule, OptimConfig};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

const INIT_STREAM: u64 = 0x696e_6974;
const STEP_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing the concept with the empty token.
    pub p_drop: f64,
    pub optim: OptimConfig,
    /// Steps between checkpoint boundaries (0 = none). The trainer state is
    /// rounded to `f32` at each boundary, so a run resumed from a checkpoint
    /// written there replays the uninterrupted run exactly.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            p_drop: 0.1,
            optim: OptimConfig {
                schedule: LrSchedule::CosineWarmup { warmup_steps: 1000 },
                ..OptimConfig::default()
            },
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!(
                "p_drop must be in [0, 1], got {}",
                self.p_drop
            )));
        }
        self.optim.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Minibatch loss of every step taken, in order.
    pub losses: Vec<f64>,
}

/// One minibatch of the denoising objective.
struct Batch {
    x_t: Array2<f64>,
    eps: Array2<f64>,
    ts: Vec<usize>,
    concepts: Vec<usize>,
}

fn draw_batch(
    data: &[f64],
    labels: &[u32],
    dim: usize,
    sched: &NoiseSchedule,
    size: usize,
    p_drop: f64,
    rng: &mut RngStream,
) -> Batch {
    let n = labels.len();
    let mut x_t = Array2::zeros((size, dim));
    let mut eps = Array2::zeros((size, dim));
    let mut ts = Vec::with_capacity(size);
    let mut concepts = Vec::with_capacity(size);
    for r in 0..size {
        let i = rng.int_inclusive(0, n - 1);
        let t = rng.int_inclusive(1, sched.steps());
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for d in 0..dim {
            let e = rng.normal();
            eps[[r, d]] = e;
            x_t[[r, d]] = a * data[i * dim + d] + b * e;
        }
        let dropped = rng.bernoulli(p_drop);
        ts.push(t);
        concepts.push(if dropped { 0 } else { labels[i] as usize });
    }
    Batch {
        x_t,
        eps,
        ts,
        concepts,
    }
}

/// Mean squared error over batch and coordinates, plus its upstream gradient.
fn mse_and_upstream(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let diff = pred - target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

fn embed_all(vocab: &ConceptVocabulary) -> Result<Vec<TokenSequence>> {
    (0..=vocab.len()).map(|k| vocab.embed(&[k])).collect()
}

fn batch_loss(
    params: &ModelParams,
    tokens: &[TokenSequence],
    sched: &NoiseSchedule,
    batch: &Batch,
) -> Result<(f64, Array2<f64>, super::net::ForwardCache)> {
    let cond: Vec<&TokenSequence> = batch.concepts.iter().map(|&k| &tokens[k]).collect();
    let (pred, cache) = forward(
        params,
        &batch.x_t,
        TimeBatch::PerRow(&batch.ts),
        CondBatch::PerRow(&cond),
        sched.steps(),
    )?;
    let (loss, upstream) = mse_and_upstream(&pred, &batch.eps);
    Ok((loss, upstream, cache))
}

/// Stateful base-model trainer for the conditional denoising objective with
/// conditioning dropout.
///
/// Every step draws from its own stream `(seed, step)`, so a run resumed from
/// a saved state replays the same minibatches.
pub struct BaseTrainer<'a> {
    data: Vec<f64>,
    labels: &'a [u32],
    dim: usize,
    tokens: Vec<TokenSequence>,
    sched: &'a NoiseSchedule,
    config: TrainConfig,
    seed: u64,
    params: ModelParams,
    opt: AdamW,
    step: usize,
    losses: Vec<f64>,
}

impl<'a> BaseTrainer<'a> {
    pub fn new(
        data: &'a LabeledDataset,
        vocab: &ConceptVocabulary,
        arch: ArchitectureConfig,
        sched: &'a NoiseSchedule,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let params = ModelParams::init(arch, &mut RngStream::new(seed, INIT_STREAM))?;
        Self::from_state(data, vocab, sched, config, seed, params, None, 0)
    }

    /// Continues from saved parameters and optional optimizer moments
    /// `(m, v)` after `step` completed steps.
    #[allow(clippy::too_many_arguments)]
    pub fn from_state(
        data: &'a LabeledDataset,
        vocab: &ConceptVocabulary,
        sched: &'a NoiseSchedule,
        config: TrainConfig,
        seed: u64,
        params: ModelParams,
        moments: Option<(Vec<f64>, Vec<f64>)>,
        step: usize,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let arch = *params.arch();
        if arch.data_dim != data.dim {
            return Err(Error::Dimension {
                expected: arch.data_dim,
                got: data.dim,
            });
        }
        if vocab.embed_dim() != arch.embed_dim {
            return Err(Error::Dimension {
                expected: arch.embed_dim,
                got: vocab.embed_dim(),
            });
        }
        if let Some(&bad) = data
            .labels
            .iter()
            .find(|&&l| l == 0 || l as usize > vocab.len())
        {
            return Err(Error::UnknownConcept {
                id: bad as usize,
                k: vocab.len(),
            });
        }
        let mut opt = AdamW::new(config.optim, &params, ParamGroup::All);
        if let Some((m, v)) = moments {
            opt.set_state(m, v, step as u64)?;
        }
        Ok(Self {
            data: data.points.iter().map(|&v| v as f64).collect(),
            labels: &data.labels,
            dim: data.dim,
            tokens: embed_all(vocab)?,
            sched,
            config,
            seed,
            params,
            opt,
            step,
            losses: Vec::new(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        self.opt.moments()
    }

    /// Losses of the steps taken by this trainer instance.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Rounds parameters and optimizer moments to `f32`, matching what a
    /// checkpoint round trip does.
    pub fn quantize(&mut self) {
        for v in self.params.values_mut() {
            *v = *v as f32 as f64;
        }
        let (m, v) = self.opt.moments();
        let q = |s: &[f64]| s.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        let (m, v) = (q(m), q(v));
        self.opt
            .set_state(m, v, self.step as u64)
            .expect("moment shapes unchanged");
    }

    /// Whether the completed step count sits on a checkpoint boundary.
    pub fn at_checkpoint(&self) -> bool {
        self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every)
    }

    /// Takes one optimizer step and returns its minibatch loss.
    pub fn step(&mut self) -> Result<f64> {
        let mut rng = RngStream::new(self.seed, STEP_STREAM_BASE + self.step as u64);
        let batch = draw_batch(
            &self.data,
            self.labels,
            self.dim,
            self.sched,
            self.config.batch_size,
            self.config.p_drop,
            &mut rng,
        );
        let diverged = |_: Error| Error::TrainingDiverged {
            iteration: self.step,
            last_good: self.step.checked_sub(1),
        };
        let (loss, upstream, cache) =
            batch_loss(&self.params, &self.tokens, self.sched, &batch).map_err(diverged)?;
        let grad = backward(&self.params, &cache, &upstream).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(diverged(Error::Divergence(
                "non-finite loss or parameters".into(),
            )));
        }
        let lr = self.config.optim.lr
            * self
                .config
                .optim
                .schedule
                .factor(self.step, self.config.steps);
        self.opt.update(&mut self.params, &grad, lr);
        if !self.params.is_finite() {
            return Err(diverged(Error::Divergence(
                "non-finite loss or parameters".into(),
            )));
        }
        self.step += 1;
        self.losses.push(loss);
        if self.at_checkpoint() {
            self.quantize();
        }
        Ok(loss)
    }

    /// Steps until `config.steps` steps have been completed in total.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.steps {
            let loss = self.step()?;
            if self.step.is_multiple_of(1000) {
                log::info!("base step {} loss {loss:.5}", self.step);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            losses: self.losses,
        }
    }
}

/// Trains a base model from scratch for `config.steps` steps.
pub fn train_base(
    data: &LabeledDataset,
    vocab: &ConceptVocabulary,
    arch: ArchitectureConfig,
    sched: &NoiseSchedule,
    config: TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut trainer = BaseTrainer::new(data, vocab, arch, sched, config, seed)?;
    trainer.run()?;
    Ok(trainer.finish())
}

/// Denoising loss on `n` draws from `data` made with `seed`, no dropout.
pub fn denoising_loss(
    params: &ModelParams,
    vocab: &ConceptVocabulary,
    sched: &NoiseSchedule,
    data: &LabeledDataset,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || n == 0 {
        return Err(Error::Empty("evaluation batch"));
    }
    let points: Vec<f64> = data.points.iter().map(|&v| v as f64).collect();
    let mut rng = RngStream::new(seed, 0x6576_616c);
    let batch = draw_batch(&points, &data.labels, data.dim, sched, n, 0.0, &mut rng);
    let (loss, _, _) = batch_loss(params, &embed_all(vocab)?, sched, &batch)?;
    Ok(loss)
}
