//! The six subcommands. Each one writes its outputs plus `config.toml` and
//! `run.json` (resolved config, input hashes, seeds, output list) into the
//! output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use conceptlab::data::{load_dataset, make_mixture, save_dataset};
use conceptlab::erasure::{
    finetune, EraseConfig, EraseMethod, FinetuneObserver, GuidanceConfig, GuidanceMethod,
};
use conceptlab::eval::{
    alignment_score, erased_fraction, evaluate, frechet_distance, generate_samples,
    interference_matrix, paired_divergence, prototype_scorer_for, scatter_svg,
};
use conceptlab::model::checkpoint::{Checkpoint, OptimizerState};
use conceptlab::model::{BaseTrainer, ConceptVocabulary, Denoiser, ModelParams};
use conceptlab::oracle::MixtureSpec;
use conceptlab::schedule::{NoisePredictor, NoiseSchedule, SamplerConfig};
use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, OUT_ENV};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Datagen,
    TrainBase,
    Erase,
    Sample,
    Eval,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Datagen => "datagen",
            Command::TrainBase => "train-base",
            Command::Erase => "erase",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Compare => "compare",
        }
    }
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunRecord {
    command: &'static str,
    version: &'static str,
    config: RunConfig,
    inputs: BTreeMap<String, InputRecord>,
    seeds: BTreeMap<&'static str, u64>,
    metadata: BTreeMap<&'static str, serde_json::Value>,
    outputs: Vec<String>,
}

/// Output directory plus the replay record being assembled.
struct Run {
    out: PathBuf,
    record: RunRecord,
}

impl Run {
    fn new(command: Command, cfg: &RunConfig, out: PathBuf) -> Self {
        Self {
            out,
            record: RunRecord {
                command: command.name(),
                version: env!("CARGO_PKG_VERSION"),
                config: cfg.clone(),
                inputs: BTreeMap::new(),
                seeds: BTreeMap::new(),
                metadata: BTreeMap::new(),
                outputs: Vec::new(),
            },
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.record.outputs.push(name.to_string());
        Ok(path)
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<(), CliError> {
        self.write(name, &ck.encode()?)?;
        Ok(())
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.record.inputs.insert(
            role.to_string(),
            InputRecord {
                path: path.to_path_buf(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
        );
        Ok(bytes)
    }

    fn load_checkpoint(
        &mut self,
        role: &str,
        path: Option<&PathBuf>,
    ) -> Result<Checkpoint, CliError> {
        let path = path.ok_or_else(|| CliError::Config(format!("inputs.{role} is required")))?;
        let bytes = self.input(role, path)?;
        Ok(Checkpoint::decode(&bytes)?)
    }

    fn seed(&mut self, name: &'static str, seed: u64) {
        self.record.seeds.insert(name, seed);
    }

    fn meta(&mut self, key: &'static str, value: impl Serialize) {
        self.record.metadata.insert(
            key,
            serde_json::to_value(value).expect("metadata serializes"),
        );
    }

    fn finish(mut self) -> Result<PathBuf, CliError> {
        let toml = self.record.config.to_toml();
        self.write("config.toml", toml.as_bytes())?;
        self.record.outputs.push("run.json".into());
        let json = serde_json::to_string_pretty(&self.record).expect("record serializes");
        let path = self.out.join("run.json");
        std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(self.out)
    }
}

/// Flag, then config, then `$CONCEPTLAB_OUT/<command>`, then `runs/<command>`.
pub fn resolve_out_dir(cfg: &RunConfig, flag: Option<&Path>, command: Command) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return p.clone();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command.name()),
        _ => PathBuf::from("runs").join(command.name()),
    }
}

/// Validates `cfg`, runs `command` and returns the output directory.
pub fn execute(command: Command, cfg: &RunConfig, out: PathBuf) -> Result<PathBuf, CliError> {
    let mix = cfg.validate()?;
    let mut run = Run::new(command, cfg, out);
    match command {
        Command::Datagen => datagen(cfg, &mix, &mut run)?,
        Command::TrainBase => train_base(cfg, &mix, &mut run)?,
        Command::Erase => erase(cfg, &mix, &mut run)?,
        Command::Sample => sample(cfg, &mix, &mut run)?,
        Command::Eval => eval(cfg, &mix, &mut run)?,
        Command::Compare => compare(cfg, &mix, &mut run)?,
    }
    run.finish()
}

fn to_array(points: &[f32], dim: usize) -> Array2<f64> {
    Array2::from_shape_vec(
        (points.len() / dim, dim),
        points.iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("row-major points")
}

/// Most probable concept of every row.
fn classify(samples: &Array2<f64>, mix: &MixtureSpec) -> Result<Vec<usize>, CliError> {
    samples
        .rows()
        .into_iter()
        .map(|r| {
            let p = mix.bayes_posterior(&r.to_vec())?;
            Ok(1 + p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0))
        })
        .collect()
}

fn samples_csv(samples: &Array2<f64>, labels: &[usize]) -> String {
    let dims: Vec<String> = (0..samples.ncols()).map(|d| format!("x{d}")).collect();
    let mut out = format!("{},concept\n", dims.join(","));
    for (row, l) in samples.rows().into_iter().zip(labels) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{},{l}", vals.join(","));
    }
    out
}

fn datagen(cfg: &RunConfig, mix: &MixtureSpec, run: &mut Run) -> Result<(), CliError> {
    let data = make_mixture(mix, cfg.data.seed, cfg.data.n)?;
    run.seed("data", cfg.data.seed);
    let path = run.out.join("dataset.clds");
    save_dataset(&path, &data)?;
    run.record.outputs.push("dataset.clds".into());
    run.write("mixture.json", mix.to_json()?.as_bytes())?;
    let shown = data.len().min(2000);
    let points = to_array(&data.points[..shown * data.dim], data.dim);
    let labels: Vec<usize> = data.labels[..shown].iter().map(|&l| l as usize).collect();
    let svg = scatter_svg(points.view(), &labels, Some(mix), "dataset")?;
    run.write("dataset.svg", svg.as_bytes())?;
    log::info!("wrote {} points to {}", data.len(), path.display());
    Ok(())
}

fn train_base(cfg: &RunConfig, mix: &MixtureSpec, run: &mut Run) -> Result<(), CliError> {
    let data = match &cfg.inputs.dataset {
        Some(p) => {
            run.input("dataset", p)?;
            let d = load_dataset(p)?;
            d.validate_against(mix)?;
            d
        }
        None => {
            run.seed("data", cfg.data.seed);
            make_mixture(mix, cfg.data.seed, cfg.data.n)?
        }
    };
    run.seed("train", cfg.seed);
    let resumed = match &cfg.inputs.resume {
        Some(p) => {
            let ck = run.load_checkpoint("resume", Some(p))?;
            if ck.schedule != cfg.schedule {
                return Err(CliError::Config(
                    "resume checkpoint has a different schedule".into(),
                ));
            }
            if *ck.params.arch() != cfg.model {
                return Err(CliError::Config(
                    "resume checkpoint has a different architecture".into(),
                ));
            }
            Some(ck)
        }
        None => None,
    };
    let vocab = match &resumed {
        Some(ck) => ck.vocab.clone(),
        None => ConceptVocabulary::new(mix.names(), cfg.model.embed_dim, cfg.seed)?,
    };
    let sched = cfg.schedule.build()?;
    let mut trainer = match resumed {
        Some(ck) => {
            let opt = ck.optimizer.ok_or_else(|| {
                CliError::Config("resume checkpoint has no optimizer state".into())
            })?;
            BaseTrainer::from_state(
                &data,
                &vocab,
                &sched,
                cfg.train,
                cfg.seed,
                ck.params,
                Some((opt.m, opt.v)),
                opt.step as usize,
            )?
        }
        None => BaseTrainer::new(&data, &vocab, cfg.model, &sched, cfg.train, cfg.seed)?,
    };
    let first = trainer.steps_done();
    let save = |trainer: &BaseTrainer<'_>| {
        let (m, v) = trainer.moments();
        let mut ck = Checkpoint::new(trainer.params().clone(), vocab.clone(), cfg.schedule)
            .with_metadata(serde_json::json!({
                "kind": "base",
                "steps": trainer.steps_done(),
                "seed": cfg.seed,
                "mixture": mix,
            }));
        ck.optimizer = Some(OptimizerState {
            step: trainer.steps_done() as u64,
            m: m.to_vec(),
            v: v.to_vec(),
        });
        ck
    };
    while trainer.steps_done() < cfg.train.steps {
        let loss = trainer.step()?;
        let done = trainer.steps_done();
        if done % 1000 == 0 {
            log::info!("step {done} loss {loss:.5}");
        }
        if trainer.at_checkpoint() && done < cfg.train.steps {
            run.checkpoint(&format!("checkpoints/base_{done:06}.ck"), &save(&trainer))?;
        }
    }
    run.checkpoint("base.ck", &save(&trainer))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in trainer.losses().iter().enumerate() {
        let _ = writeln!(csv, "{},{l:e}", first + i + 1);
    }
    run.write("loss.csv", csv.as_bytes())?;
    run.meta("steps_done", trainer.steps_done());
    Ok(())
}

/// Records erasure metrics and intermediate checkpoints at the cadence.
struct Monitor<'a> {
    cfg: &'a RunConfig,
    mix: &'a MixtureSpec,
    vocab: &'a ConceptVocabulary,
    sched: &'a NoiseSchedule,
    out: PathBuf,
    written: Vec<String>,
}

impl Monitor<'_> {
    fn readings(
        &self,
        prefix: &str,
        params: &ModelParams,
        values: &mut Vec<(String, f64)>,
    ) -> conceptlab::Result<()> {
        let model = Denoiser::new(params, self.vocab, self.sched);
        let n = self.cfg.monitor.n_samples;
        let seed = self.cfg.eval.seed;
        let uncond = generate_samples(
            &model,
            &GuidanceConfig::unguided(Vec::new()),
            self.cfg.eval.sampler,
            self.sched,
            n,
            seed,
        )?;
        for &k in &self.cfg.erase.targets {
            let g = self.cfg.eval.guidance_for(vec![k]);
            let s = generate_samples(&model, &g, self.cfg.eval.sampler, self.sched, n, seed)?;
            let ef = erased_fraction(s.view(), self.mix, k, self.cfg.eval.threshold)?;
            values.push((format!("{prefix}_erased_fraction_{k}"), ef));
            values.push((
                format!("{prefix}_frechet_to_uncond_{k}"),
                frechet_distance(s.view(), uncond.view())?,
            ));
        }
        Ok(())
    }
}

impl FinetuneObserver for Monitor<'_> {
    fn on_checkpoint(
        &mut self,
        iteration: usize,
        student: &ModelParams,
        teacher: Option<&ModelParams>,
    ) -> conceptlab::Result<Vec<(String, f64)>> {
        if self.cfg.monitor.save_checkpoints {
            let mut models = vec![("student", student)];
            if let Some(t) = teacher {
                models.push(("teacher", t));
            }
            for (role, p) in models {
                let name = format!("checkpoints/{role}_{iteration:06}.ck");
                let ck = Checkpoint::new(p.clone(), self.vocab.clone(), self.cfg.schedule)
                    .with_metadata(serde_json::json!({ "kind": role, "iteration": iteration }));
                let path = self.out.join(&name);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(&path, ck.encode()?)?;
                self.written.push(name);
            }
        }
        let mut values = Vec::new();
        if self.cfg.monitor.enabled {
            if let Some(t) = teacher {
                self.readings("teacher", t, &mut values)?;
            }
            self.readings("student", student, &mut values)?;
        }
        Ok(values)
    }

    fn on_iteration(
        &mut self,
        record: &conceptlab::erasure::IterationRecord,
        _student: &ModelParams,
        _teacher: Option<&ModelParams>,
    ) {
        if (record.iteration + 1).is_multiple_of(100) {
            log::info!(
                "iteration {} loss {:.3e}",
                record.iteration + 1,
                record.loss
            );
        }
    }
}

fn base_for_erasure(
    cfg: &RunConfig,
    run: &mut Run,
) -> Result<(Checkpoint, NoiseSchedule), CliError> {
    let base = run.load_checkpoint("base", cfg.inputs.base.as_ref())?;
    if base.schedule != cfg.schedule {
        return Err(CliError::Config(
            "schedule section differs from the base checkpoint's schedule".into(),
        ));
    }
    let sched = base.schedule.build()?;
    Ok((base, sched))
}

fn erase(cfg: &RunConfig, mix: &MixtureSpec, run: &mut Run) -> Result<(), CliError> {
    let (base, sched) = base_for_erasure(cfg, run)?;
    cfg.erase.validate(base.vocab.len())?;
    run.seed("erase", cfg.seed);
    run.seed("eval", cfg.eval.seed);
    let mut monitor = Monitor {
        cfg,
        mix,
        vocab: &base.vocab,
        sched: &sched,
        out: run.out.clone(),
        written: Vec::new(),
    };
    let outcome = finetune(
        &base.params,
        &cfg.erase,
        &base.vocab,
        &sched,
        cfg.seed,
        &mut monitor,
    )?;
    let written = std::mem::take(&mut monitor.written);
    run.record.outputs.extend(written);
    let meta = |role: &str| {
        serde_json::json!({
            "kind": role,
            "iteration": cfg.erase.iterations,
            "method": cfg.erase.method,
            "targets": cfg.erase.targets,
        })
    };
    let ck = |p: &ModelParams, role: &str| {
        Checkpoint::new(p.clone(), base.vocab.clone(), base.schedule).with_metadata(meta(role))
    };
    run.checkpoint("student.ck", &ck(&outcome.student, "student"))?;
    if let Some(t) = &outcome.teacher {
        run.checkpoint("teacher.ck", &ck(t, "teacher"))?;
    }
    run.write("history.csv", outcome.history.iterations_csv().as_bytes())?;
    run.write("metrics.csv", outcome.history.metrics_csv().as_bytes())?;
    run.meta(
        "erased_model",
        if outcome.teacher.is_some() {
            "teacher.ck"
        } else {
            "student.ck"
        },
    );
    Ok(())
}

fn sample(cfg: &RunConfig, mix: &MixtureSpec, run: &mut Run) -> Result<(), CliError> {
    let ck = run.load_checkpoint("model", cfg.inputs.model.as_ref())?;
    let sched = ck.schedule.build()?;
    let model = Denoiser::new(&ck.params, &ck.vocab, &sched);
    run.seed("sample", cfg.seed);
    let s = &cfg.sample;
    let x = generate_samples(&model, &s.guidance, s.sampler, &sched, s.n, cfg.seed)?;
    let labels = classify(&x, mix)?;
    run.write("samples.csv", samples_csv(&x, &labels).as_bytes())?;
    let title = format!("{:?} prompt {:?}", s.guidance.method, s.guidance.prompt);
    run.write(
        "samples.svg",
        scatter_svg(x.view(), &labels, Some(mix), &title)?.as_bytes(),
    )?;
    run.meta("sampler", s.sampler);
    run.meta("guidance", &s.guidance);
    Ok(())
}

fn eval(cfg: &RunConfig, mix: &MixtureSpec, run: &mut Run) -> Result<(), CliError> {
    let ck = run.load_checkpoint("model", cfg.inputs.model.as_ref())?;
    let sched = ck.schedule.build()?;
    let model = Denoiser::new(&ck.params, &ck.vocab, &sched);
    let base = match &cfg.inputs.base {
        Some(p) => Some(run.load_checkpoint("base", Some(p))?),
        None => None,
    };
    let base_model = base
        .as_ref()
        .map(|b| Denoiser::new(&b.params, &b.vocab, &sched));
    run.seed("eval", cfg.eval.seed);
    let label = cfg
        .inputs
        .model
        .as_ref()
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut report = evaluate(&label, &model, base_model.as_ref(), mix, &sched, &cfg.eval)?;

    if !cfg.inputs.erased.is_empty() {
        let base_model = base_model
            .as_ref()
            .ok_or_else(|| CliError::Config("interference needs inputs.base".into()))?;
        if cfg.inputs.erased.len() != mix.n_concepts() {
            return Err(CliError::Config(format!(
                "inputs.erased lists {} models for {} concepts",
                cfg.inputs.erased.len(),
                mix.n_concepts()
            )));
        }
        let mut erased = Vec::new();
        for (i, p) in cfg.inputs.erased.iter().enumerate() {
            erased.push(run.load_checkpoint(&format!("erased_{}", i + 1), Some(p))?);
        }
        let denoisers: Vec<Denoiser<'_>> = erased
            .iter()
            .map(|c| Denoiser::new(&c.params, &c.vocab, &sched))
            .collect();
        let dyns: Vec<Option<&dyn NoisePredictor>> = denoisers
            .iter()
            .map(|d| Some(d as &dyn NoisePredictor))
            .collect();
        report.interference = Some(interference_matrix(
            base_model,
            &dyns,
            &cfg.eval.guidance,
            cfg.eval.sampler,
            &sched,
            cfg.eval.n_samples,
            cfg.eval.seed,
        )?);
    }

    run.write("report.json", (report.to_json()? + "\n").as_bytes())?;
    run.write("report.csv", report.to_csv().as_bytes())?;
    for k in 1..=mix.n_concepts() {
        let g = cfg.eval.guidance_for(vec![k]);
        let x = generate_samples(
            &model,
            &g,
            cfg.eval.sampler,
            &sched,
            cfg.eval.n_samples,
            cfg.eval.seed,
        )?;
        let labels = vec![k; x.nrows()];
        let title = format!("{label}: prompt {}", mix.concepts[k - 1].name);
        run.write(
            &format!("concept_{k}.svg"),
            scatter_svg(x.view(), &labels, Some(mix), &title)?.as_bytes(),
        )?;
    }
    Ok(())
}

/// One row of the comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub method: String,
    /// Target-prompted samples flagged by the Bayes classifier, percent.
    pub erased_pct: f64,
    /// Same under the prototype classifier, percent.
    pub prototype_pct: f64,
    /// The remaining columns average over the non-target concepts.
    pub frechet_to_reference: f64,
    pub paired_divergence: f64,
    pub alignment: f64,
}

fn erased_checkpoint(
    cfg: &RunConfig,
    method: EraseMethod,
    given: Option<&PathBuf>,
    base: &Checkpoint,
    sched: &NoiseSchedule,
    run: &mut Run,
) -> Result<ModelParams, CliError> {
    if let Some(p) = given {
        let ck = run.load_checkpoint(&format!("{method:?}").to_lowercase(), Some(p))?;
        return Ok(ck.params);
    }
    let erase = EraseConfig {
        method,
        ..cfg.erase.clone()
    };
    log::info!("training {method:?} for the comparison");
    let out = finetune(
        &base.params,
        &erase,
        &base.vocab,
        sched,
        cfg.seed,
        &mut conceptlab::erasure::NoObserver,
    )?;
    Ok(out.erased_model().clone())
}

#[allow(clippy::too_many_arguments)]
fn compare_row<P: NoisePredictor, B: NoisePredictor>(
    method: &str,
    model: &P,
    base: &B,
    guidance: &dyn Fn(usize) -> GuidanceConfig,
    cfg: &RunConfig,
    mix: &MixtureSpec,
    sched: &NoiseSchedule,
) -> Result<CompareRow, CliError> {
    let e = &cfg.eval;
    let sampler: SamplerConfig = e.sampler;
    let targets = &cfg.erase.targets;
    let mut erased = 0.0;
    let mut proto = 0.0;
    for &k in targets {
        let x = generate_samples(model, &guidance(k), sampler, sched, e.n_samples, e.seed)?;
        erased += erased_fraction(x.view(), mix, k, e.threshold)?;
        proto += prototype_scorer_for(mix, k, e.prototype_tau, e.threshold)?
            .flagged_fraction(x.view())?;
    }
    let mut others: Vec<usize> = (1..=mix.n_concepts())
        .filter(|k| !targets.contains(k))
        .collect();
    if others.is_empty() {
        others = targets.clone();
    }
    let seeds: Vec<u64> = (0..e.n_paired as u64)
        .map(|i| e.seed.wrapping_add(i))
        .collect();
    let (mut fr, mut pd, mut al) = (0.0, 0.0, 0.0);
    for &j in &others {
        let g = guidance(j);
        let x = generate_samples(model, &g, sampler, sched, e.n_samples, e.seed)?;
        let mut only_j = mix.clone();
        only_j.prior = (1..=mix.n_concepts())
            .map(|i| if i == j { 1.0 } else { 0.0 })
            .collect();
        let reference = make_mixture(&only_j, e.seed, e.n_samples)?;
        let reference = to_array(&reference.points, mix.dim);
        fr += frechet_distance(x.view(), reference.view())?;
        al += alignment_score(x.view(), &vec![j; x.nrows()], mix)?;
        let plain = e.guidance_for(vec![j]);
        pd += paired_divergence(model, base, &g, &plain, sampler, sampler, &seeds, sched)?;
    }
    let (nt, no) = (targets.len() as f64, others.len() as f64);
    Ok(CompareRow {
        method: method.to_string(),
        erased_pct: 100.0 * erased / nt,
        prototype_pct: 100.0 * proto / nt,
        frechet_to_reference: fr / no,
        paired_divergence: pd / no,
        alignment: al / no,
    })
}

fn compare(cfg: &RunConfig, mix: &MixtureSpec, run: &mut Run) -> Result<(), CliError> {
    let (base, sched) = base_for_erasure(cfg, run)?;
    cfg.erase.validate(base.vocab.len())?;
    run.seed("erase", cfg.seed);
    run.seed("eval", cfg.eval.seed);
    let base_model = Denoiser::new(&base.params, &base.vocab, &sched);
    let targets = cfg.erase.targets.clone();
    let template = cfg.eval.guidance.clone();
    let cfg_guidance = |k: usize| GuidanceConfig {
        method: GuidanceMethod::Cfg,
        prompt: vec![k],
        ..template.clone()
    };

    let mut methods = vec!["base".to_string()];
    methods.extend(cfg.compare.methods.iter().filter(|m| *m != "base").cloned());
    let mut rows = Vec::new();
    for m in &methods {
        let row = match m.as_str() {
            "base" => compare_row(m, &base_model, &base_model, &cfg_guidance, cfg, mix, &sched)?,
            "neg_prompt" | "sld" | "sega" => {
                let method = m.parse::<GuidanceMethod>()?;
                let g = |k: usize| GuidanceConfig {
                    method,
                    prompt: vec![k],
                    target: targets.clone(),
                    ..template.clone()
                };
                compare_row(m, &base_model, &base_model, &g, cfg, mix, &sched)?
            }
            other => {
                let method = other.parse::<EraseMethod>()?;
                let given = match method {
                    EraseMethod::Sdd => cfg.compare.sdd.as_ref(),
                    EraseMethod::EsdX => cfg.compare.esd_x.as_ref(),
                    EraseMethod::EsdU => cfg.compare.esd_u.as_ref(),
                    EraseMethod::EsdAll => cfg.compare.esd_all.as_ref(),
                };
                let params = erased_checkpoint(cfg, method, given, &base, &sched, run)?;
                let model = Denoiser::new(&params, &base.vocab, &sched);
                compare_row(m, &model, &base_model, &cfg_guidance, cfg, mix, &sched)?
            }
        };
        rows.push(row);
    }

    let mut csv = String::from(
        "method,erased_pct,prototype_pct,frechet_to_reference,paired_divergence,alignment\n",
    );
    let mut md = String::from(
        "| method | erased % | prototype % | Fréchet to reference | paired divergence | alignment |\n|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.method,
            r.erased_pct,
            r.prototype_pct,
            r.frechet_to_reference,
            r.paired_divergence,
            r.alignment
        );
        let _ = writeln!(
            md,
            "| {} | {:.2} | {:.2} | {:.4} | {:.4} | {:.4} |",
            r.method,
            r.erased_pct,
            r.prototype_pct,
            r.frechet_to_reference,
            r.paired_divergence,
            r.alignment
        );
    }
    run.write("compare.csv", csv.as_bytes())?;
    run.write("compare.md", md.as_bytes())?;
    run.meta("targets", &targets);
    Ok(())
}
