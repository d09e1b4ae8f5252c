use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{cfg_combine, ddim_step, ddpm_step_between, NoiseSchedule};
use crate::erasure::{
    neg_prompt_guidance, sega_guidance, sld_guidance, GuidanceConfig, GuidanceMethod,
};
use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;

/// Anything that maps noisy samples to noise estimates.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;

    /// Noise estimates for every row of `x` at timestep `t`, conditioned on
    /// `concepts` (empty slice = unconditional).
    fn predict(&self, x: &Array2<f64>, t: usize, concepts: &[usize]) -> Result<Array2<f64>>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }

    fn predict(&self, x: &Array2<f64>, t: usize, concepts: &[usize]) -> Result<Array2<f64>> {
        (**self).predict(x, t, concepts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            n_steps: 25,
        }
    }
}

/// Evenly spaced timesteps `floor(i T / n)` for `i = 0..=n`; starts at 0 and
/// ends at `T`.
pub fn timestep_grid(total_steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps < 1 || n_steps > total_steps {
        return Err(Error::Config(format!(
            "sampler steps must be in [1, {total_steps}], got {n_steps}"
        )));
    }
    Ok((0..=n_steps).map(|i| i * total_steps / n_steps).collect())
}

/// Noise estimate after applying the configured guidance combination.
/// Per-row guidance rule: conditional, unconditional, optional extra.
type RowRule<'a> = dyn Fn(&[f64], &[f64], Option<&[f64]>) -> Result<Vec<f64>> + 'a;

pub fn guided_estimate<P: NoisePredictor>(
    predictor: &P,
    x: &Array2<f64>,
    t: usize,
    guidance: &GuidanceConfig,
) -> Result<Array2<f64>> {
    let g = guidance;
    let combine = |a: &Array2<f64>,
                   b: &Array2<f64>,
                   c: Option<&Array2<f64>>,
                   f: &RowRule<'_>|
     -> Result<Array2<f64>> {
        let mut out = Array2::zeros(a.raw_dim());
        for r in 0..a.nrows() {
            let ar = a.row(r).to_vec();
            let br = b.row(r).to_vec();
            let cr = c.map(|c| c.row(r).to_vec());
            let v = f(&ar, &br, cr.as_deref())?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    };
    match g.method {
        GuidanceMethod::None => predictor.predict(x, t, &g.prompt),
        GuidanceMethod::Cfg => {
            let u = predictor.predict(x, t, &[])?;
            let c = predictor.predict(x, t, &g.prompt)?;
            combine(&u, &c, None, &|u, c, _| cfg_combine(u, c, g.s_g))
        }
        GuidanceMethod::NegPrompt => {
            let n = predictor.predict(x, t, &g.target)?;
            let c = predictor.predict(x, t, &g.prompt)?;
            combine(&n, &c, None, &|n, c, _| neg_prompt_guidance(n, c, g.s_g))
        }
        GuidanceMethod::Sld | GuidanceMethod::Sega => {
            let u = predictor.predict(x, t, &[])?;
            let c = predictor.predict(x, t, &g.prompt)?;
            let s = predictor.predict(x, t, &g.target)?;
            let sld = g.method == GuidanceMethod::Sld;
            combine(&u, &c, Some(&s), &|u, c, s| {
                let s = s.expect("target estimate present");
                if sld {
                    sld_guidance(u, c, s, g.s_g, g.s_s, g.lambda_sld)
                } else {
                    sega_guidance(u, c, s, g.s_g, g.s_s, g.lambda_sega)
                }
            })
        }
    }
}

/// Runs the reverse process on `x` (in place) from `grid[start]` down to
/// `grid[stop]`, `stop < start`. Row `r` draws any ancestral noise from
/// `rngs[r]`.
#[allow(clippy::too_many_arguments)]
pub fn run_sampler<P: NoisePredictor>(
    predictor: &P,
    guidance: &GuidanceConfig,
    kind: SamplerKind,
    sched: &NoiseSchedule,
    grid: &[usize],
    start: usize,
    stop: usize,
    x: &mut Array2<f64>,
    rngs: &mut [RngStream],
) -> Result<()> {
    check_dim(x.nrows(), rngs.len())?;
    for i in (stop + 1..=start).rev() {
        let (t, t_prev) = (grid[i], grid[i - 1]);
        let eps = guided_estimate(predictor, x, t, guidance)?;
        #[allow(clippy::needless_range_loop)]
        for r in 0..x.nrows() {
            let xr = x.row(r).to_vec();
            let er = eps.row(r).to_vec();
            let next = match kind {
                SamplerKind::Ddim => ddim_step(&xr, &er, t, t_prev, sched)?,
                SamplerKind::Ddpm => ddpm_step_between(&xr, &er, t, t_prev, sched, &mut rngs[r])?,
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite sample at t={t}")));
            }
            x.row_mut(r).assign(&ndarray::ArrayView1::from(&next));
        }
    }
    Ok(())
}

/// Draws one sample per stream: `x_T ~ N(0, I)` from `rngs[r]`, then the full
/// reverse trajectory to `t = 0`.
pub fn sample_batch<P: NoisePredictor>(
    predictor: &P,
    guidance: &GuidanceConfig,
    sampler: SamplerConfig,
    sched: &NoiseSchedule,
    rngs: &mut [RngStream],
) -> Result<Array2<f64>> {
    guidance.validate()?;
    let grid = timestep_grid(sched.steps(), sampler.n_steps)?;
    let dim = predictor.data_dim();
    let mut x = Array2::zeros((rngs.len(), dim));
    for (r, rng) in rngs.iter_mut().enumerate() {
        for d in 0..dim {
            x[[r, d]] = rng.normal();
        }
    }
    run_sampler(
        predictor,
        guidance,
        sampler.kind,
        sched,
        &grid,
        sampler.n_steps,
        0,
        &mut x,
        rngs,
    )?;
    Ok(x)
}

/// Single-sample convenience over [`sample_batch`].
pub fn sample_trajectory<P: NoisePredictor>(
    predictor: &P,
    guidance: &GuidanceConfig,
    sampler: SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut rngs = [rng.clone()];
    let out = sample_batch(predictor, guidance, sampler, sched, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.row(0).to_vec())
}

/// Streams `(seed, 0..n)`, one per sample.
pub fn seed_streams(seed: u64, n: usize) -> Vec<RngStream> {
    (0..n as u64).map(|i| RngStream::new(seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;

    struct Zero;

    impl NoisePredictor for Zero {
        fn data_dim(&self) -> usize {
            2
        }

        fn predict(&self, x: &Array2<f64>, _t: usize, _c: &[usize]) -> Result<Array2<f64>> {
            Ok(Array2::zeros(x.raw_dim()))
        }
    }

    #[test]
    fn grid_is_even_and_anchored() {
        assert_eq!(timestep_grid(100, 4).unwrap(), vec![0, 25, 50, 75, 100]);
        assert_eq!(timestep_grid(10, 10).unwrap(), (0..=10).collect::<Vec<_>>());
        let g = timestep_grid(100, 30).unwrap();
        assert_eq!((g[0], *g.last().unwrap()), (0, 100));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(timestep_grid(100, 0).is_err());
        assert!(timestep_grid(100, 101).is_err());
    }

    #[test]
    fn zero_predictor_ddim_is_deterministic_scaling() {
        let sched = ScheduleConfig::default().build().unwrap();
        let g = GuidanceConfig::unguided(vec![]);
        let sampler = SamplerConfig {
            kind: SamplerKind::Ddim,
            n_steps: 100,
        };
        let mut r1 = RngStream::new(3, 0);
        let mut r2 = RngStream::new(3, 0);
        let a = sample_trajectory(&Zero, &g, sampler, &sched, &mut r1).unwrap();
        let b = sample_trajectory(&Zero, &g, sampler, &sched, &mut r2).unwrap();
        assert_eq!(a, b);
        // with eps = 0 every step rescales by sqrt(ab_prev / ab_t)
        let mut r3 = RngStream::new(3, 0);
        let x_t = r3.normal_vec(2);
        let factor = 1.0 / sched.alpha_bar(100).sqrt();
        for d in 0..2 {
            assert!((a[d] - x_t[d] * factor).abs() < 1e-9 * factor.abs());
        }
    }
}
