//! Fine-tuning based erasure: self-distillation with an EMA teacher (SDD) and
//! negatively guided distillation from a frozen model (ESD).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::{EraseConfig, EraseMethod};
use super::guidance::GuidanceConfig;
use crate::error::{Error, Result};
use crate::model::{
    backward, forward, ConceptVocabulary, CondBatch, Denoiser, Gradient, ModelParams, TimeBatch,
    TokenSequence,
};
use crate::optim::AdamW;
use crate::rng::RngStream;
use crate::schedule::{run_sampler, timestep_grid, NoisePredictor, NoiseSchedule, SamplerKind};

const ITER_STREAM_BASE: u64 = 1 << 40;
const ROW_SEED_SALT: u64 = 0x7a5f_1a7e_0000_0000;

/// `m * teacher + (1 - m) * student`, coordinatewise. Coordinates where the
/// two models agree are left bit-identical.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, m: f64) -> Result<ModelParams> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, m)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut ModelParams, student: &ModelParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!(
            "EMA decay must be in [0, 1], got {m}"
        )));
    }
    teacher.same_shape(student)?;
    for (a, &b) in teacher.values_mut().iter_mut().zip(student.values()) {
        if *a != b {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Training latents: `z_T ~ N(0, I)` per row from `rngs`, then DDIM with CFG
/// on `c_p` from grid index `n_steps` down to grid index `t`.
pub fn generate_latents<P: NoisePredictor>(
    teacher: &P,
    c_p: &[usize],
    t: usize,
    s_g: f64,
    sched: &NoiseSchedule,
    n_steps: usize,
    rngs: &mut [RngStream],
) -> Result<Array2<f64>> {
    let grid = timestep_grid(sched.steps(), n_steps)?;
    if t >= n_steps {
        return Err(Error::Timestep {
            t,
            lo: 0,
            hi: n_steps - 1,
        });
    }
    let dim = teacher.data_dim();
    let mut z = Array2::zeros((rngs.len(), dim));
    for (r, rng) in rngs.iter_mut().enumerate() {
        for d in 0..dim {
            z[[r, d]] = rng.normal();
        }
    }
    let guidance = GuidanceConfig::cfg(c_p.to_vec(), s_g);
    run_sampler(
        teacher,
        &guidance,
        SamplerKind::Ddim,
        sched,
        &grid,
        n_steps,
        t,
        &mut z,
        rngs,
    )?;
    Ok(z)
}

/// Single-latent form of [`generate_latents`].
pub fn generate_latent<P: NoisePredictor>(
    teacher: &P,
    c_p: &[usize],
    t: usize,
    s_g: f64,
    sched: &NoiseSchedule,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut rngs = [rng.clone()];
    let z = generate_latents(teacher, c_p, t, s_g, sched, n_steps, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(z.row(0).to_vec())
}

/// Mean squared distance between `eps_theta(z, c, t)` and a constant target,
/// with its gradient over the parameters.
fn regress_to(
    params: &ModelParams,
    z: &Array2<f64>,
    t: usize,
    cond: &TokenSequence,
    target: &Array2<f64>,
    total_steps: usize,
) -> Result<(f64, Gradient)> {
    let (pred, cache) = forward(
        params,
        z,
        TimeBatch::Shared(t),
        CondBatch::Shared(cond),
        total_steps,
    )?;
    let diff = &pred - target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let grad = backward(params, &cache, &(diff * (2.0 / n)))?;
    Ok((loss, grad))
}

/// Self-distillation loss `mean((eps(z, c_s, t) - sg(eps(z, c_0, t)))^2)`.
///
/// The unconditional estimate is evaluated first and enters only as a
/// constant, so the gradient flows through the conditional branch alone.
pub fn sdd_loss(
    params: &ModelParams,
    z: &Array2<f64>,
    t: usize,
    c_s: &TokenSequence,
    c_0: &TokenSequence,
    sched: &NoiseSchedule,
) -> Result<(f64, Gradient)> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Timestep {
            t,
            lo: 1,
            hi: sched.steps(),
        });
    }
    let (uncond, _) = forward(
        params,
        z,
        TimeBatch::Shared(t),
        CondBatch::Shared(c_0),
        sched.steps(),
    )?;
    regress_to(params, z, t, c_s, &uncond, sched.steps())
}

/// Negatively guided estimate `u - s_s (c - u)` of the frozen model.
pub fn esd_target(
    frozen: &ModelParams,
    z: &Array2<f64>,
    t: usize,
    c_s: &TokenSequence,
    c_0: &TokenSequence,
    s_s: f64,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let (u, _) = forward(
        frozen,
        z,
        TimeBatch::Shared(t),
        CondBatch::Shared(c_0),
        sched.steps(),
    )?;
    let (c, _) = forward(
        frozen,
        z,
        TimeBatch::Shared(t),
        CondBatch::Shared(c_s),
        sched.steps(),
    )?;
    Ok(&u - &((&c - &u) * s_s))
}

/// ESD regression loss of the student against [`esd_target`].
#[allow(clippy::too_many_arguments)]
pub fn esd_loss(
    student: &ModelParams,
    frozen: &ModelParams,
    z: &Array2<f64>,
    t: usize,
    c_s: &TokenSequence,
    c_0: &TokenSequence,
    s_s: f64,
    sched: &NoiseSchedule,
) -> Result<(f64, Gradient)> {
    let target = esd_target(frozen, z, t, c_s, c_0, s_s, sched)?;
    regress_to(student, z, t, c_s, &target, sched.steps())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0-based iteration index.
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// Drawn sampler-grid index in `0..sampler_steps`.
    pub t_index: usize,
    /// Diffusion timestep the loss was evaluated at.
    pub timestep: usize,
    /// Whether grid index 0 was clamped to timestep 1.
    pub clamped: bool,
    /// Concepts used to generate the latent.
    pub prompt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Number of completed iterations.
    pub iteration: usize,
    pub values: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EraseHistory {
    pub iterations: Vec<IterationRecord>,
    pub metrics: Vec<MetricRecord>,
}

impl EraseHistory {
    /// One row per iteration: `iteration,loss,lr,t_index,timestep,clamped,prompt`.
    pub fn iterations_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr,t_index,timestep,clamped,prompt\n");
        for r in &self.iterations {
            let prompt: Vec<String> = r.prompt.iter().map(|k| k.to_string()).collect();
            out.push_str(&format!(
                "{},{:e},{:e},{},{},{},{}\n",
                r.iteration,
                r.loss,
                r.lr,
                r.t_index,
                r.timestep,
                r.clamped,
                prompt.join(";")
            ));
        }
        out
    }

    /// One row per metric reading; columns follow the first reading.
    pub fn metrics_csv(&self) -> String {
        let names: Vec<&str> = self
            .metrics
            .first()
            .map(|m| m.values.iter().map(|(n, _)| n.as_str()).collect())
            .unwrap_or_default();
        let mut out = format!(
            "iteration{}\n",
            names.iter().map(|n| format!(",{n}")).collect::<String>()
        );
        for m in &self.metrics {
            out.push_str(&m.iteration.to_string());
            for (_, v) in &m.values {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Readings of one metric as `(iteration, value)`.
    pub fn metric(&self, name: &str) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter_map(|m| {
                m.values
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| (m.iteration, *v))
            })
            .collect()
    }
}

/// Hooks into a fine-tuning run.
pub trait FinetuneObserver {
    /// Called before the first iteration and every `checkpoint_every`
    /// iterations; returned pairs are recorded as metrics.
    fn on_checkpoint(
        &mut self,
        _iteration: usize,
        _student: &ModelParams,
        _teacher: Option<&ModelParams>,
    ) -> Result<Vec<(String, f64)>> {
        Ok(Vec::new())
    }

    /// Called after every iteration with the updated models.
    fn on_iteration(
        &mut self,
        _record: &IterationRecord,
        _student: &ModelParams,
        _teacher: Option<&ModelParams>,
    ) {
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl FinetuneObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct EraseOutcome {
    pub student: ModelParams,
    /// EMA teacher; present for SDD only.
    pub teacher: Option<ModelParams>,
    pub history: EraseHistory,
}

impl EraseOutcome {
    /// The model that should be deployed: the teacher for SDD, the student
    /// for ESD.
    pub fn erased_model(&self) -> &ModelParams {
        self.teacher.as_ref().unwrap_or(&self.student)
    }
}

/// Runs the configured fine-tuning method. A pure function of its inputs.
pub fn finetune(
    base: &ModelParams,
    cfg: &EraseConfig,
    vocab: &ConceptVocabulary,
    sched: &NoiseSchedule,
    seed: u64,
    observer: &mut dyn FinetuneObserver,
) -> Result<EraseOutcome> {
    cfg.validate(vocab.len())?;
    if cfg.sampler_steps > sched.steps() {
        return Err(Error::Config(format!(
            "sampler_steps {} exceeds schedule length {}",
            cfg.sampler_steps,
            sched.steps()
        )));
    }
    let grid = timestep_grid(sched.steps(), cfg.sampler_steps)?;
    let sdd = cfg.method == EraseMethod::Sdd;
    let c_s = vocab.embed(&cfg.targets)?;
    let c_0 = vocab.unconditional();
    let frozen = base.clone();
    let mut student = base.clone();
    let mut teacher = if sdd { Some(base.clone()) } else { None };
    let mut opt = AdamW::new(cfg.optim, &student, cfg.group());
    let mut history = EraseHistory::default();
    let mut last_good = None;

    for i in 0..cfg.iterations {
        if i % cfg.checkpoint_every == 0 {
            let values = observer.on_checkpoint(i, &student, teacher.as_ref())?;
            history.metrics.push(MetricRecord {
                iteration: i,
                values,
            });
            last_good = Some(i);
        }
        let diverged = |_: Error| Error::TrainingDiverged {
            iteration: i,
            last_good,
        };

        let mut rng = RngStream::new(seed, ITER_STREAM_BASE + i as u64);
        let t_index = rng.int_inclusive(0, cfg.sampler_steps - 1);
        // SDD draws one concept per iteration; ESD generates on all targets.
        let prompt = if sdd {
            vec![cfg.targets[rng.int_inclusive(0, cfg.targets.len() - 1)]]
        } else {
            cfg.targets.clone()
        };
        let mut rows: Vec<RngStream> = (0..cfg.micro_batch)
            .map(|r| RngStream::new(seed ^ ROW_SEED_SALT, (i * cfg.micro_batch + r) as u64))
            .collect();
        let generator = teacher.as_ref().unwrap_or(&student);
        let z = generate_latents(
            &Denoiser::new(generator, vocab, sched),
            &prompt,
            t_index,
            cfg.s_g,
            sched,
            cfg.sampler_steps,
            &mut rows,
        )
        .map_err(diverged)?;

        let timestep = grid[t_index].max(1);
        let clamped = grid[t_index] == 0;
        if clamped {
            log::debug!("iteration {i}: grid index 0 evaluated at timestep 1");
        }
        let (loss, grad) = if sdd {
            sdd_loss(&student, &z, timestep, &c_s, &c_0, sched)
        } else {
            esd_loss(&student, &frozen, &z, timestep, &c_s, &c_0, cfg.s_s, sched)
        }
        .map_err(diverged)?;
        if !loss.is_finite() {
            return Err(diverged(Error::Divergence("non-finite loss".into())));
        }
        let lr = cfg.optim.lr * cfg.optim.schedule.factor(i, cfg.iterations);
        opt.update(&mut student, &grad, lr);
        if !student.is_finite() {
            return Err(diverged(Error::Divergence("non-finite parameters".into())));
        }
        if let Some(teacher) = teacher.as_mut() {
            ema_update_in_place(teacher, &student, cfg.ema_decay)?;
        }
        let record = IterationRecord {
            iteration: i,
            loss,
            lr,
            t_index,
            timestep,
            clamped,
            prompt,
        };
        observer.on_iteration(&record, &student, teacher.as_ref());
        history.iterations.push(record);
    }
    let values = observer.on_checkpoint(cfg.iterations, &student, teacher.as_ref())?;
    history.metrics.push(MetricRecord {
        iteration: cfg.iterations,
        values,
    });
    Ok(EraseOutcome {
        student,
        teacher,
        history,
    })
}

/// SDD with the EMA teacher. Requires `cfg.method == Sdd`.
pub fn sdd_finetune(
    base: &ModelParams,
    cfg: &EraseConfig,
    vocab: &ConceptVocabulary,
    sched: &NoiseSchedule,
    seed: u64,
    observer: &mut dyn FinetuneObserver,
) -> Result<EraseOutcome> {
    if cfg.method != EraseMethod::Sdd {
        return Err(Error::Config(format!(
            "sdd_finetune called with {:?}",
            cfg.method
        )));
    }
    finetune(base, cfg, vocab, sched, seed, observer)
}

/// ESD against a frozen copy of `base`. Requires an ESD method.
pub fn esd_finetune(
    base: &ModelParams,
    cfg: &EraseConfig,
    vocab: &ConceptVocabulary,
    sched: &NoiseSchedule,
    seed: u64,
    observer: &mut dyn FinetuneObserver,
) -> Result<EraseOutcome> {
    if !cfg.method.is_esd() {
        return Err(Error::Config(format!(
            "esd_finetune called with {:?}",
            cfg.method
        )));
    }
    finetune(base, cfg, vocab, sched, seed, observer)
}
