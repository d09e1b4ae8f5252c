use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::erasure::GuidanceConfig;
use crate::error::{check_dim, Error, Result};
use crate::oracle::MixtureSpec;
use crate::schedule::{sample_batch, seed_streams, NoisePredictor, NoiseSchedule, SamplerConfig};

/// Eigenvalues above this (and below zero) are rounding noise.
const EIGEN_CLAMP: f64 = -1e-8;

/// Fraction of samples whose Bayes posterior for concept `k` (1-based) is at
/// least `threshold`.
pub fn erased_fraction(
    samples: ArrayView2<'_, f64>,
    mix: &MixtureSpec,
    k: usize,
    threshold: f64,
) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Empty("samples"));
    }
    if k == 0 || k > mix.n_concepts() {
        return Err(Error::UnknownConcept {
            id: k,
            k: mix.n_concepts(),
        });
    }
    let mut hits = 0usize;
    for row in samples.rows() {
        if mix.bayes_posterior(&row.to_vec())?[k - 1] >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.nrows() as f64)
}

/// Two-prototype ratio classifier with a Gaussian kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeScorer {
    /// Appropriate prototype.
    pub c_plus: Vec<f64>,
    /// Inappropriate prototype.
    pub c_minus: Vec<f64>,
    /// Kernel bandwidth.
    pub tau: f64,
    pub threshold: f64,
}

impl PrototypeScorer {
    pub fn new(c_plus: Vec<f64>, c_minus: Vec<f64>, tau: f64, threshold: f64) -> Result<Self> {
        let s = Self {
            c_plus,
            c_minus,
            tau,
            threshold,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.c_plus.len(), self.c_minus.len())?;
        if self.c_plus == self.c_minus {
            return Err(Error::Config("prototypes must differ".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// `s- / (s+ + s-)` with `s± = exp(-|x - c±|² / (2 tau²))`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.c_plus.len(), x.len())?;
        let d2 = |c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let scale = 2.0 * self.tau * self.tau;
        // logistic form of the ratio, stable for distant points
        let z = (d2(&self.c_minus) - d2(&self.c_plus)) / scale;
        Ok(1.0 / (1.0 + z.exp()))
    }

    /// Fraction of samples scoring at or above the threshold.
    pub fn flagged_fraction(&self, samples: ArrayView2<'_, f64>) -> Result<f64> {
        if samples.nrows() == 0 {
            return Err(Error::Empty("samples"));
        }
        let mut hits = 0usize;
        for row in samples.rows() {
            if self.score(&row.to_vec())? >= self.threshold {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.nrows() as f64)
    }
}

pub fn prototype_score(scorer: &PrototypeScorer, x: &[f64]) -> Result<f64> {
    scorer.score(x)
}

/// Mean and (unbiased) covariance of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    pub fn fit(samples: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, d) = samples.dim();
        if n < d + 1 {
            return Err(Error::Config(format!(
                "need at least {} samples to fit moments in {d} dimensions, got {n}",
                d + 1
            )));
        }
        let mean = DVector::from_iterator(d, (0..d).map(|j| samples.column(j).sum() / n as f64));
        let mut cov = DMatrix::zeros(d, d);
        for row in samples.rows() {
            let c = DVector::from_iterator(d, row.iter().zip(mean.iter()).map(|(x, m)| x - m));
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

/// Symmetric PSD square root via eigendecomposition.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < EIGEN_CLAMP {
            return Err(Error::DegenerateCovariance(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|² + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The cross term uses the symmetric form `(S_a^{1/2} S_b S_a^{1/2})^{1/2}`,
/// which has the same trace.
pub fn frechet_from_moments(a: &Moments, b: &Moments) -> Result<f64> {
    check_dim(a.mean.len(), b.mean.len())?;
    let ra = sqrt_psd(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let cross = sqrt_psd(&inner)?.trace();
    let dm = (&a.mean - &b.mean).norm_squared();
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_dim(a.ncols(), b.ncols())?;
    frechet_from_moments(&Moments::fit(a)?, &Moments::fit(b)?)
}

/// `n` samples from `predictor`, sample `i` driven by stream `(seed, i)`.
pub fn generate_samples<P: NoisePredictor>(
    predictor: &P,
    guidance: &GuidanceConfig,
    sampler: SamplerConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    sample_batch(
        predictor,
        guidance,
        sampler,
        sched,
        &mut seed_streams(seed, n),
    )
}

/// Mean Euclidean distance between same-seed samples of two models.
#[allow(clippy::too_many_arguments)]
pub fn paired_divergence<A: NoisePredictor, B: NoisePredictor>(
    model_a: &A,
    model_b: &B,
    guidance_a: &GuidanceConfig,
    guidance_b: &GuidanceConfig,
    sampler_a: SamplerConfig,
    sampler_b: SamplerConfig,
    seeds: &[u64],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    if sampler_a != sampler_b {
        return Err(Error::Config(
            "paired samples need identical sampler settings".into(),
        ));
    }
    let streams = || {
        seeds
            .iter()
            .map(|&s| crate::rng::RngStream::new(s, 0))
            .collect::<Vec<_>>()
    };
    let a = sample_batch(model_a, guidance_a, sampler_a, sched, &mut streams())?;
    let b = sample_batch(model_b, guidance_b, sampler_b, sched, &mut streams())?;
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / seeds.len() as f64)
}

/// Mean log Bayes posterior of each sample's prompt concept.
pub fn alignment_score(
    samples: ArrayView2<'_, f64>,
    prompts: &[usize],
    mix: &MixtureSpec,
) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Empty("samples"));
    }
    check_dim(samples.nrows(), prompts.len())?;
    let mut total = 0.0;
    for (row, &k) in samples.rows().into_iter().zip(prompts) {
        if k == 0 || k > mix.n_concepts() {
            return Err(Error::UnknownConcept {
                id: k,
                k: mix.n_concepts(),
            });
        }
        total += mix.log_posterior(&row.to_vec())?[k - 1];
    }
    Ok(total / samples.nrows() as f64)
}

/// Fréchet distance, per conditioning concept `j`, between `erased` and
/// `base` samples prompted on `j` with the same guidance and seeds.
#[allow(clippy::too_many_arguments)]
pub fn interference_row<A: NoisePredictor, B: NoisePredictor>(
    base: &A,
    erased: &B,
    guidance: &GuidanceConfig,
    sampler: SamplerConfig,
    sched: &NoiseSchedule,
    n_concepts: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(n_concepts);
    for j in 1..=n_concepts {
        let g = GuidanceConfig {
            prompt: vec![j],
            ..guidance.clone()
        };
        let a = generate_samples(erased, &g, sampler, sched, n, seed)?;
        let b = generate_samples(base, &g, sampler, sched, n, seed)?;
        row.push(frechet_distance(a.view(), b.view())?);
    }
    Ok(row)
}

/// `K x K` matrix whose row `k` compares the model erased on concept `k + 1`
/// against the base model, one column per conditioning concept.
pub fn interference_matrix<A: NoisePredictor>(
    base: &A,
    erased: &[Option<&dyn NoisePredictor>],
    guidance: &GuidanceConfig,
    sampler: SamplerConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let k = erased.len();
    erased
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let m =
                m.ok_or_else(|| Error::Config(format!("no erased model for concept {}", i + 1)))?;
            interference_row(base, &m, guidance, sampler, sched, k, n, seed)
        })
        .collect()
}
