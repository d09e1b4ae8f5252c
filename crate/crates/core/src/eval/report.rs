use serde::{Deserialize, Serialize};

use super::metrics::{
    alignment_score, erased_fraction, frechet_distance, generate_samples, paired_divergence,
    PrototypeScorer,
};
use crate::data::make_mixture;
use crate::erasure::{GuidanceConfig, GuidanceMethod};
use crate::error::{Error, Result};
use crate::oracle::MixtureSpec;
use crate::schedule::{NoisePredictor, NoiseSchedule, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per conditioning concept.
    pub n_samples: usize,
    /// Seeds for the paired comparison against the base model.
    pub n_paired: usize,
    pub seed: u64,
    /// Posterior threshold of the reference classifier.
    pub threshold: f64,
    /// Bandwidth of the secondary prototype classifier.
    pub prototype_tau: f64,
    pub sampler: SamplerConfig,
    /// Guidance template; its prompt is replaced by each concept in turn.
    pub guidance: GuidanceConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_paired: 200,
            seed: 0,
            threshold: 0.7,
            prototype_tau: 1.0,
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 3 || self.n_paired == 0 {
            return Err(Error::Config(
                "n_samples must be >= 3 and n_paired >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must be in [0, 1]".into()));
        }
        if self.prototype_tau.is_nan() || self.prototype_tau <= 0.0 {
            return Err(Error::Config("prototype_tau must be > 0".into()));
        }
        self.guidance.validate()
    }

    /// Guidance template with the prompt set to `prompt`.
    pub fn guidance_for(&self, prompt: Vec<usize>) -> GuidanceConfig {
        GuidanceConfig {
            prompt,
            ..self.guidance.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub concept: usize,
    pub name: String,
    /// Share of concept-prompted samples the Bayes classifier assigns to the
    /// concept.
    pub erased_fraction: f64,
    /// Same share under the prototype classifier.
    pub prototype_fraction: f64,
    /// Against exact draws from the concept's data distribution.
    pub frechet_to_reference: f64,
    /// Against the same model's unconditional samples.
    pub frechet_to_uncond: f64,
    pub alignment: f64,
    /// Mean same-seed distance to the base model, when one is given.
    pub paired_divergence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub config: EvalConfig,
    pub concepts: Vec<ConceptMetrics>,
    /// Mean alignment over all concepts.
    pub alignment: f64,
    pub interference: Option<Vec<Vec<f64>>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn concept(&self, k: usize) -> Option<&ConceptMetrics> {
        self.concepts.iter().find(|c| c.concept == k)
    }

    /// Rows `model,metric,concept,value`.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for c in &self.concepts {
            let mut push = |metric: &str, v: f64| {
                rows.push(format!("{},{metric},{},{v:e}", self.model, c.concept));
            };
            push("erased_fraction", c.erased_fraction);
            push("prototype_fraction", c.prototype_fraction);
            push("frechet_to_reference", c.frechet_to_reference);
            push("frechet_to_uncond", c.frechet_to_uncond);
            push("alignment", c.alignment);
            if let Some(p) = c.paired_divergence {
                push("paired_divergence", p);
            }
        }
        if let Some(m) = &self.interference {
            for (k, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    rows.push(format!(
                        "{},interference_{},{},{v:e}",
                        self.model,
                        k + 1,
                        j + 1
                    ));
                }
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,metric,concept,value\n");
        for r in self.csv_rows() {
            out.push_str(&r);
            out.push('\n');
        }
        out
    }
}

/// Probability-weighted centroid of one concept (1-based).
fn centroid(mix: &MixtureSpec, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; mix.dim];
    for comp in &mix.concepts[k - 1].components {
        for (a, m) in c.iter_mut().zip(&comp.mean) {
            *a += comp.weight * m;
        }
    }
    c
}

/// Prototype classifier for concept `k`: its centroid against the
/// prior-weighted centroid of the remaining concepts.
pub fn prototype_scorer_for(
    mix: &MixtureSpec,
    k: usize,
    tau: f64,
    threshold: f64,
) -> Result<PrototypeScorer> {
    let minus = centroid(mix, k);
    let mut plus = vec![0.0; mix.dim];
    let rest: f64 = (1..=mix.n_concepts())
        .filter(|&j| j != k)
        .map(|j| mix.prior[j - 1])
        .sum();
    for j in (1..=mix.n_concepts()).filter(|&j| j != k) {
        let w = if rest > 0.0 {
            mix.prior[j - 1] / rest
        } else {
            0.0
        };
        for (a, m) in plus.iter_mut().zip(centroid(mix, j)) {
            *a += w * m;
        }
    }
    PrototypeScorer::new(plus, minus, tau, threshold)
}

/// Full metric suite for one model. Every metric is a pure function of the
/// inputs; sample `i` of every set is driven by stream `(seed, i)`.
pub fn evaluate<P: NoisePredictor, B: NoisePredictor>(
    label: &str,
    model: &P,
    base: Option<&B>,
    mix: &MixtureSpec,
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let uncond_guidance = GuidanceConfig {
        method: GuidanceMethod::None,
        prompt: Vec::new(),
        ..cfg.guidance.clone()
    };
    let uncond = generate_samples(model, &uncond_guidance, cfg.sampler, sched, n, cfg.seed)?;
    let paired_seeds: Vec<u64> = (0..cfg.n_paired as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    let mut concepts = Vec::with_capacity(mix.n_concepts());
    for k in 1..=mix.n_concepts() {
        let g = cfg.guidance_for(vec![k]);
        let samples = generate_samples(model, &g, cfg.sampler, sched, n, cfg.seed)?;
        let mut only_k = mix.clone();
        only_k.prior = (1..=mix.n_concepts())
            .map(|j| if j == k { 1.0 } else { 0.0 })
            .collect();
        let reference = make_mixture(&only_k, cfg.seed, n)?;
        let reference = ndarray::Array2::from_shape_vec(
            (n, mix.dim),
            reference.points.iter().map(|&v| v as f64).collect(),
        )
        .expect("reference shape");
        let scorer = prototype_scorer_for(mix, k, cfg.prototype_tau, cfg.threshold)?;
        let paired = match base {
            Some(b) => Some(paired_divergence(
                model,
                b,
                &g,
                &g,
                cfg.sampler,
                cfg.sampler,
                &paired_seeds,
                sched,
            )?),
            None => None,
        };
        concepts.push(ConceptMetrics {
            concept: k,
            name: mix.concepts[k - 1].name.clone(),
            erased_fraction: erased_fraction(samples.view(), mix, k, cfg.threshold)?,
            prototype_fraction: scorer.flagged_fraction(samples.view())?,
            frechet_to_reference: frechet_distance(samples.view(), reference.view())?,
            frechet_to_uncond: frechet_distance(samples.view(), uncond.view())?,
            alignment: alignment_score(samples.view(), &vec![k; n], mix)?,
            paired_divergence: paired,
        });
    }
    let alignment = concepts.iter().map(|c| c.alignment).sum::<f64>() / concepts.len() as f64;
    Ok(EvalReport {
        model: label.to_string(),
        config: cfg.clone(),
        concepts,
        alignment,
        interference: None,
    })
}
