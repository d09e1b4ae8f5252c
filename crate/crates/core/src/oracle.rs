//! Ground-truth Gaussian-mixture data distributions.
//!
//! A [`MixtureSpec`] is at once the data generator, the closed-form optimal
//! noise predictor and the Bayes reference classifier.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::{NoisePredictor, NoiseSchedule};

pub const MIXTURE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub name: String,
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub version: u32,
    pub dim: usize,
    pub concepts: Vec<Concept>,
    /// Global concept prior.
    pub prior: Vec<f64>,
}

const WEIGHT_TOL: f64 = 1e-9;

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64], scale: f64) -> f64 {
    a.iter().zip(b).map(|(x, m)| (x - scale * m).powi(2)).sum()
}

/// Log-density terms of one isotropic component under the noised marginal.
struct NoisedComponent<'a> {
    log_weight: f64,
    mean: &'a [f64],
    var: f64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.version != MIXTURE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported mixture version {} (expected {MIXTURE_FORMAT_VERSION})",
                self.version
            )));
        }
        if self.dim == 0 || self.concepts.is_empty() {
            return Err(Error::Config(
                "mixture needs dim > 0 and at least one concept".into(),
            ));
        }
        if self.prior.len() != self.concepts.len() {
            return Err(Error::Config(
                "prior length must equal concept count".into(),
            ));
        }
        check_weights(&self.prior, "concept prior")?;
        for c in &self.concepts {
            if c.components.is_empty() {
                return Err(Error::Config(format!(
                    "concept {:?} has no components",
                    c.name
                )));
            }
            let w: Vec<f64> = c.components.iter().map(|k| k.weight).collect();
            check_weights(&w, &c.name)?;
            for k in &c.components {
                check_dim(self.dim, k.mean.len())?;
                if !(k.variance > 0.0 && k.variance.is_finite()) {
                    return Err(Error::Config(format!(
                        "component variance must be > 0 in concept {:?}",
                        c.name
                    )));
                }
                if k.mean.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("component mean must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    fn concept(&self, id: usize) -> Result<&Concept> {
        if id == 0 || id > self.concepts.len() {
            return Err(Error::UnknownConcept {
                id,
                k: self.concepts.len(),
            });
        }
        Ok(&self.concepts[id - 1])
    }

    /// Components of the marginal (`None`) or of one concept, with their
    /// variances after noising to level `alpha_bar`.
    fn noised<'a>(
        &'a self,
        concept: Option<usize>,
        alpha_bar: f64,
    ) -> Result<Vec<NoisedComponent<'a>>> {
        let mut out = Vec::new();
        let mut push = |prior: f64, c: &'a Concept| {
            for k in &c.components {
                if prior > 0.0 && k.weight > 0.0 {
                    out.push(NoisedComponent {
                        log_weight: prior.ln() + k.weight.ln(),
                        mean: &k.mean,
                        var: alpha_bar * k.variance + 1.0 - alpha_bar,
                    });
                }
            }
        };
        match concept {
            Some(id) => push(1.0, self.concept(id)?),
            None => {
                for (p, c) in self.prior.iter().zip(&self.concepts) {
                    push(*p, c);
                }
            }
        }
        Ok(out)
    }

    /// `log p_t(x)` of the (conditional or marginal) noised mixture.
    pub fn log_density(&self, x: &[f64], alpha_bar: f64, concept: Option<usize>) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let sa = alpha_bar.sqrt();
        let d = self.dim as f64;
        let terms: Vec<f64> = self
            .noised(concept, alpha_bar)?
            .iter()
            .map(|c| {
                c.log_weight
                    - 0.5 * d * (2.0 * std::f64::consts::PI * c.var).ln()
                    - 0.5 * sq_dist(x, c.mean, sa) / c.var
            })
            .collect();
        Ok(logsumexp(&terms))
    }

    /// Score `grad_x log p_t(x)` via log-domain responsibilities.
    pub fn score(&self, x: &[f64], alpha_bar: f64, concept: Option<usize>) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let sa = alpha_bar.sqrt();
        let d = self.dim as f64;
        let comps = self.noised(concept, alpha_bar)?;
        let logs: Vec<f64> = comps
            .iter()
            .map(|c| c.log_weight - 0.5 * d * c.var.ln() - 0.5 * sq_dist(x, c.mean, sa) / c.var)
            .collect();
        let norm = logsumexp(&logs);
        let mut grad = vec![0.0; self.dim];
        for (c, l) in comps.iter().zip(&logs) {
            let r = (l - norm).exp();
            for i in 0..self.dim {
                grad[i] -= r * (x[i] - sa * c.mean[i]) / c.var;
            }
        }
        Ok(grad)
    }

    /// Posterior over concepts `p(k | x)` at noise level zero.
    pub fn bayes_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_posterior(x)?.into_iter().map(f64::exp).collect())
    }

    /// `log p(k | x)`, exact in the tails where the posterior underflows.
    pub fn log_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let logs: Vec<f64> = (1..=self.n_concepts())
            .map(|k| {
                let prior = self.prior[k - 1];
                if prior <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    prior.ln() + self.log_density(x, 1.0, Some(k)).expect("valid concept")
                }
            })
            .collect();
        let norm = logsumexp(&logs);
        Ok(logs.iter().map(|l| l - norm).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Config(format!(
            "{what}: weights must be nonnegative"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Config(format!(
            "{what}: weights sum to {s}, expected 1"
        )));
    }
    Ok(())
}

/// `eps*(x_t, t) = -sqrt(1 - ab_t) grad log p_t(x_t)`: the minimizer of the
/// denoising loss for this mixture.
pub fn optimal_noise(
    mix: &MixtureSpec,
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    concept: Option<usize>,
) -> Result<Vec<f64>> {
    if t < 1 || t > sched.steps() {
        return Err(Error::Timestep {
            t,
            lo: 1,
            hi: sched.steps(),
        });
    }
    let ab = sched.alpha_bar(t);
    let s = (1.0 - ab).sqrt();
    Ok(mix
        .score(x_t, ab, concept)?
        .into_iter()
        .map(|g| -s * g)
        .collect())
}

pub fn bayes_posterior(mix: &MixtureSpec, x: &[f64]) -> Result<Vec<f64>> {
    mix.bayes_posterior(x)
}

/// The closed-form optimal denoiser as a sampler-compatible predictor.
///
/// A multi-concept conditioning uses the prior-weighted union of the listed
/// concepts.
pub struct OraclePredictor<'a> {
    pub mix: &'a MixtureSpec,
    pub sched: &'a NoiseSchedule,
}

impl OraclePredictor<'_> {
    fn restricted(&self, concepts: &[usize]) -> Result<MixtureSpec> {
        let mut spec = self.mix.clone();
        let mut prior = vec![0.0; spec.n_concepts()];
        for &c in concepts {
            self.mix.concept(c)?;
            prior[c - 1] = self.mix.prior[c - 1];
        }
        let total: f64 = prior.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config(
                "conditioning concepts have zero prior mass".into(),
            ));
        }
        prior.iter_mut().for_each(|p| *p /= total);
        spec.prior = prior;
        Ok(spec)
    }
}

impl NoisePredictor for OraclePredictor<'_> {
    fn data_dim(&self) -> usize {
        self.mix.dim
    }

    fn predict(&self, x: &Array2<f64>, t: usize, concepts: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        let restricted;
        let (mix, concept) = match concepts {
            [] => (self.mix, None),
            [one] => (self.mix, Some(*one)),
            many => {
                restricted = self.restricted(many)?;
                (&restricted, None)
            }
        };
        for r in 0..x.nrows() {
            let e = optimal_noise(mix, &x.row(r).to_vec(), t, self.sched, concept)?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&e));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::schedule::ScheduleConfig;

    fn single(mean: Vec<f64>, var: f64) -> MixtureSpec {
        MixtureSpec {
            version: 1,
            dim: mean.len(),
            concepts: vec![Concept {
                name: "a".into(),
                components: vec![Component {
                    weight: 1.0,
                    mean,
                    variance: var,
                }],
            }],
            prior: vec![1.0],
        }
    }

    fn three_component() -> MixtureSpec {
        MixtureSpec {
            version: 1,
            dim: 2,
            concepts: vec![
                Concept {
                    name: "a".into(),
                    components: vec![
                        Component {
                            weight: 0.3,
                            mean: vec![1.0, 2.0],
                            variance: 0.2,
                        },
                        Component {
                            weight: 0.7,
                            mean: vec![-1.5, 0.5],
                            variance: 0.6,
                        },
                    ],
                },
                Concept {
                    name: "b".into(),
                    components: vec![Component {
                        weight: 1.0,
                        mean: vec![0.0, -2.0],
                        variance: 1.3,
                    }],
                },
            ],
            prior: vec![0.4, 0.6],
        }
    }

    /// 1-D Simpson quadrature of the noised density and its derivative.
    fn quadrature_score_1d(ab: f64, x: f64) -> f64 {
        // p_t(x) = int N(x; sqrt(ab) y, 1 - ab) N(y; 0, 1) dy
        let (lo, hi, n) = (-12.0, 12.0, 20_000usize);
        let h = (hi - lo) / n as f64;
        let s2 = 1.0 - ab;
        let (mut p, mut dp) = (0.0, 0.0);
        for i in 0..=n {
            let y = lo + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let prior = (-0.5 * y * y).exp();
            let r = x - ab.sqrt() * y;
            let lik = (-0.5 * r * r / s2).exp();
            p += w * prior * lik;
            dp += w * prior * lik * (-r / s2);
        }
        dp / p
    }

    #[test]
    fn standard_normal_data_gives_scaled_identity() {
        let sched = ScheduleConfig::default().build().unwrap();
        let mix = single(vec![0.0], 1.0);
        for &t in &[1usize, 10, 50, 100] {
            for &x in &[-2.0, 0.3, 1.7] {
                let e = optimal_noise(&mix, &[x], t, &sched, None).unwrap();
                let ab = sched.alpha_bar(t);
                assert!((e[0] - (1.0 - ab).sqrt() * x).abs() < 1e-12);
                let q = -(1.0 - ab).sqrt() * quadrature_score_1d(ab, x);
                assert!((e[0] - q).abs() < 1e-8, "t={t} x={x}: {} vs {q}", e[0]);
            }
        }
    }

    #[test]
    fn symmetric_pair_at_origin_is_zero() {
        let sched = ScheduleConfig::default().build().unwrap();
        let mut mix = single(vec![2.0, -1.0], 0.4);
        mix.concepts[0].components = vec![
            Component {
                weight: 0.5,
                mean: vec![2.0, -1.0],
                variance: 0.4,
            },
            Component {
                weight: 0.5,
                mean: vec![-2.0, 1.0],
                variance: 0.4,
            },
        ];
        for t in [1, 30, 100] {
            let e = optimal_noise(&mix, &[0.0, 0.0], t, &sched, None).unwrap();
            assert!(e.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn matches_finite_differences_of_log_density() {
        let sched = ScheduleConfig::default().build().unwrap();
        let mix = three_component();
        let mut rng = RngStream::new(17, 0);
        for _ in 0..10 {
            let x = vec![3.0 * rng.normal(), 3.0 * rng.normal()];
            let t = rng.int_inclusive(1, 100);
            let concept = match rng.int_inclusive(0, 2) {
                0 => None,
                k => Some(k),
            };
            let ab = sched.alpha_bar(t);
            let e = optimal_noise(&mix, &x, t, &sched, concept).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (mix.log_density(&xp, ab, concept).unwrap()
                    - mix.log_density(&xm, ab, concept).unwrap())
                    / (2.0 * h);
                let want = -(1.0 - ab).sqrt() * fd;
                let rel = (e[i] - want).abs() / want.abs().max(1e-3);
                assert!(rel < 1e-6, "coord {i}: {} vs {want}", e[i]);
            }
        }
    }

    #[test]
    fn responsibilities_survive_huge_inputs() {
        let sched = ScheduleConfig::default().build().unwrap();
        let mix = three_component();
        for x in [[1e6, -1e6], [-1e6, 3.0], [5e5, 5e5]] {
            for t in [1, 50, 100] {
                let e = optimal_noise(&mix, &x, t, &sched, None).unwrap();
                assert!(e.iter().all(|v| v.is_finite()));
            }
            let p = mix.bayes_posterior(&x).unwrap();
            assert!(p.iter().all(|v| v.is_finite()));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_cases() {
        let mut mix = three_component();
        let mut rng = RngStream::new(3, 0);
        for _ in 0..100 {
            let x = [5.0 * rng.normal(), 5.0 * rng.normal()];
            let p = mix.bayes_posterior(&x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // two symmetric single-component concepts
        mix.concepts[0].components = vec![Component {
            weight: 1.0,
            mean: vec![1.0, 1.0],
            variance: 0.5,
        }];
        mix.concepts[1].components = vec![Component {
            weight: 1.0,
            mean: vec![-1.0, -1.0],
            variance: 0.5,
        }];
        mix.prior = vec![0.5, 0.5];
        let p = mix.bayes_posterior(&[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        // far-separated means
        mix.concepts[1].components[0].mean = vec![-20.0, -20.0];
        let p = mix.bayes_posterior(&[1.0, 1.0]).unwrap();
        assert!(p[0] > 1.0 - 1e-9);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut m = three_component();
        assert!(m.validate().is_ok());
        m.concepts[1].components[0].variance = -1.0;
        assert!(m.validate().is_err());
        let mut m = three_component();
        m.prior = vec![0.5, 0.6];
        assert!(m.validate().is_err());
        let mut m = three_component();
        m.concepts[0].components[0].weight = -0.3;
        m.concepts[0].components[1].weight = 1.3;
        assert!(m.validate().is_err());
        let mut m = three_component();
        m.version = 9;
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let m = three_component();
        let back = MixtureSpec::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(MixtureSpec::from_json(
            r#"{"version":1,"dim":2,"concepts":[],"prior":[],"extra":1}"#
        )
        .is_err());
    }

    #[test]
    fn oracle_out_of_range_t() {
        let sched = ScheduleConfig::default().build().unwrap();
        let m = three_component();
        assert!(optimal_noise(&m, &[0.0, 0.0], 0, &sched, None).is_err());
        assert!(optimal_noise(&m, &[0.0, 0.0], 101, &sched, None).is_err());
        assert!(optimal_noise(&m, &[0.0, 0.0], 5, &sched, Some(3)).is_err());
    }
}
