//! Noise schedules, forward diffusion and single reverse steps.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1` by convention.

mod sampler;

pub use sampler::{
    guided_estimate, run_sampler, sample_batch, sample_trajectory, seed_streams, timestep_grid,
    NoisePredictor, SamplerConfig, SamplerKind,
};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;

/// Endpoints of a linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    /// The (1e-4, 0.02) @ T=1000 linear schedule rescaled by `1000 / steps`,
    /// which keeps the terminal signal level comparable at reduced `T`.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        Self {
            steps,
            beta_min: 1e-4 * scale,
            beta_max: 0.02 * scale,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::scaled_linear(100)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    let sched = NoiseSchedule::linear(steps, beta_min, beta_max)?;
    let terminal = sched.alpha_bar(steps);
    if terminal >= 0.05 {
        return Err(Error::Config(format!(
            "terminal alpha_bar {terminal:.4} >= 0.05: x_T is far from N(0, I)"
        )));
    }
    if terminal >= 0.01 {
        log::warn!("terminal alpha_bar {terminal:.4} is above 0.01");
    }
    Ok(sched)
}

impl NoiseSchedule {
    /// Linear beta tables without the terminal-noise check applied by
    /// [`build_schedule`].
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let span = beta_max - beta_min;
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_min + (i as f64) / ((steps - 1) as f64) * span)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            Err(Error::Timestep {
                t,
                lo,
                hi: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// Closed-form forward marginal `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t, 1)?;
    check_dim(x0.len(), eps.len())?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One step of the forward Markov kernel `q(x_t | x_{t-1})`.
pub fn q_step(x_prev: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t, 1)?;
    check_dim(x_prev.len(), noise.len())?;
    let a = sched.alpha(t).sqrt();
    let s = sched.beta(t).sqrt();
    Ok(x_prev
        .iter()
        .zip(noise)
        .map(|(x, z)| a * x + s * z)
        .collect())
}

/// Classifier-free guidance: `u + s_g (c - u)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], s_g: f64) -> Result<Vec<f64>> {
    check_dim(eps_uncond.len(), eps_cond.len())?;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + s_g * (c - u))
        .collect())
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_t(t, 1)?;
    if t_prev >= t {
        return Err(Error::Config(format!(
            "ddim step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    check_dim(x_t.len(), eps_hat.len())?;
    let ab_t = sched.alpha_bar(t);
    if ab_t <= 0.0 {
        return Err(Error::Divergence(format!("alpha_bar({t}) is zero")));
    }
    let ab_prev = sched.alpha_bar(t_prev);
    let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_p, sb_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0 = (x - sb_t * e) / sa_t;
            sa_p * x0 + sb_p * e
        })
        .collect())
}

/// Ancestral DDPM step from `t` to `t - 1`; no noise is added at `t = 1`.
pub fn ddpm_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    sched.check_t(t, 1)?;
    check_dim(x_t.len(), eps_hat.len())?;
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let sigma = beta.sqrt();
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let mean = (x - coef * e) * inv_sqrt_alpha;
            if t > 1 {
                mean + sigma * rng.normal()
            } else {
                mean
            }
        })
        .collect())
}

/// Ancestral step across a strided pair `t -> t_prev` using the respaced
/// beta `1 - ab(t) / ab(t_prev)`. Consecutive pairs defer to [`ddpm_step`].
pub fn ddpm_step_between(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if t_prev + 1 == t {
        return ddpm_step(x_t, eps_hat, t, sched, rng);
    }
    sched.check_t(t, 1)?;
    if t_prev >= t {
        return Err(Error::Config(format!(
            "ddpm step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    check_dim(x_t.len(), eps_hat.len())?;
    let ab_t = sched.alpha_bar(t);
    let alpha = ab_t / sched.alpha_bar(t_prev);
    let beta = 1.0 - alpha;
    let coef = beta / (1.0 - ab_t).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = beta.sqrt();
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let mean = (x - coef * e) * inv_sqrt_alpha;
            if t_prev > 0 {
                mean + sigma * rng.normal()
            } else {
                mean
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_schedule_two_steps() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5, 0.5]);
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        // alpha_bar_T = 0.25 is too far from pure noise for a usable schedule
        let err = build_schedule(2, 0.5, 0.5).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn constant_schedule_tables() {
        let s = build_schedule(8, 0.5, 0.5).unwrap();
        assert_eq!(s.betas()[..2], [0.5, 0.5]);
        assert_eq!(s.alpha_bars()[..2], [0.5, 0.25]);
    }

    #[test]
    fn scaled_linear_t100() {
        // independent running product of (1 - beta_t)
        let mut prod = 1.0f64;
        for i in 0..100 {
            let b = 1e-3 + (i as f64) / 99.0 * (0.2 - 1e-3);
            prod *= 1.0 - b;
        }
        assert!(prod < 0.01);
        let s = ScheduleConfig::scaled_linear(100).build().unwrap();
        assert_abs_diff_eq!(s.alpha_bar(100), prod, epsilon = 1e-15);
        assert!(s.alpha_bar(100) < 0.01);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_schedule(1, 1e-3, 0.2).is_err());
        assert!(build_schedule(0, 1e-3, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
        // terminal alpha_bar far too large
        assert!(build_schedule(10, 1e-4, 1e-3).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = ScheduleConfig::default().build().unwrap();
        let ab = s.alpha_bar(10);
        let x = q_sample(&[1.0, -2.0], 10, &[0.0, 0.0], &s).unwrap();
        assert_eq!(x, vec![ab.sqrt(), -2.0 * ab.sqrt()]);
        let x = q_sample(&[0.0, 0.0], 10, &[0.5, 1.5], &s).unwrap();
        assert_eq!(x, vec![(1.0 - ab).sqrt() * 0.5, (1.0 - ab).sqrt() * 1.5]);
        assert!(q_sample(&[0.0], 0, &[0.0], &s).is_err());
        assert!(q_sample(&[0.0], 101, &[0.0], &s).is_err());
        assert!(q_sample(&[0.0, 1.0], 3, &[0.0], &s).is_err());
    }

    #[test]
    fn q_sample_hand_arithmetic() {
        let s = NoiseSchedule {
            betas: vec![0.36, 0.5],
            alphas: vec![0.64, 0.5],
            alpha_bars: vec![0.64, 0.32],
        };
        let x = q_sample(&[2.0, 0.0], 1, &[1.0, 1.0], &s).unwrap();
        assert_abs_diff_eq!(x[0], 2.2, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn cfg_cases() {
        assert_eq!(
            cfg_combine(&[1.0, 2.0], &[3.0, 5.0], 0.0).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            cfg_combine(&[1.0, 2.0], &[3.0, 5.0], 1.0).unwrap(),
            vec![3.0, 5.0]
        );
        assert_eq!(
            cfg_combine(&[1.0, 1.0], &[2.0, 0.0], 7.5).unwrap(),
            vec![8.5, -6.5]
        );
        assert!(cfg_combine(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn ddim_final_step_and_roundtrip() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = [1.25, -0.5];
        let eps = [0.3, -1.1];
        for t in [1, 17, 63, 100] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = ddim_step(&xt, &eps, t, 0, &s).unwrap();
            assert_abs_diff_eq!(back[0], x0[0], epsilon = 1e-9);
            assert_abs_diff_eq!(back[1], x0[1], epsilon = 1e-9);
        }
        let xt = [0.7, 0.2];
        let out = ddim_step(&xt, &[0.0, 0.0], 40, 20, &s).unwrap();
        let r = (s.alpha_bar(20) / s.alpha_bar(40)).sqrt();
        assert_abs_diff_eq!(out[0], 0.7 * r, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 0.2 * r, epsilon = 1e-12);
        assert!(ddim_step(&xt, &[0.0, 0.0], 20, 20, &s).is_err());
        assert!(ddim_step(&xt, &[0.0, 0.0], 20, 30, &s).is_err());
    }

    #[test]
    fn ddpm_terminal_step_is_deterministic() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut r1 = RngStream::new(1, 0);
        let mut r2 = RngStream::new(2, 0);
        let a = ddpm_step(&[0.3, 0.4], &[0.1, 0.2], 1, &s, &mut r1).unwrap();
        let b = ddpm_step(&[0.3, 0.4], &[0.1, 0.2], 1, &s, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddpm_zero_inputs_is_pure_noise_and_reproducible() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut r1 = RngStream::new(9, 4);
        let mut r2 = RngStream::new(9, 4);
        let a = ddpm_step(&[0.0, 0.0], &[0.0, 0.0], 50, &s, &mut r1).unwrap();
        let b = ddpm_step(&[0.0, 0.0], &[0.0, 0.0], 50, &s, &mut r2).unwrap();
        assert_eq!(a, b);
        let mut r3 = RngStream::new(9, 4);
        let sigma = s.beta(50).sqrt();
        assert_abs_diff_eq!(a[0], sigma * r3.normal(), epsilon = 0.0);
        assert!(ddpm_step(&[0.0], &[0.0], 0, &s, &mut r1).is_err());
    }

    #[test]
    fn alpha_bar_monotone_and_in_unit_interval() {
        for steps in [25usize, 50, 100, 1000] {
            let s = ScheduleConfig::scaled_linear(steps).build().unwrap();
            let ab = s.alpha_bars();
            for w in ab.windows(2) {
                assert!(w[1] < w[0]);
            }
            assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
            for t in 2..=steps {
                assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            }
        }
    }

    #[test]
    fn stepwise_kernel_matches_closed_form_marginal() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = [1.5, -2.0];
        let n = 100_000usize;
        let mut rng = RngStream::new(11, 0);
        for &t in &[5usize, 40, 100] {
            let (mut sum, mut sumsq) = ([0.0; 2], [0.0; 2]);
            for _ in 0..n {
                let mut x = x0.to_vec();
                for step in 1..=t {
                    let z = rng.normal_vec(2);
                    x = q_step(&x, step, &z, &s).unwrap();
                }
                for d in 0..2 {
                    sum[d] += x[d];
                    sumsq[d] += x[d] * x[d];
                }
            }
            let ab = s.alpha_bar(t);
            for d in 0..2 {
                let mean = sum[d] / n as f64;
                let var = sumsq[d] / n as f64 - mean * mean;
                let want_mean = ab.sqrt() * x0[d];
                let want_var = 1.0 - ab;
                let se_mean = (want_var / n as f64).sqrt();
                let se_var = want_var * (2.0 / n as f64).sqrt();
                assert!(
                    (mean - want_mean).abs() < 3.0 * se_mean,
                    "t={t} mean {mean} vs {want_mean}"
                );
                assert!(
                    (var - want_var).abs() < 3.0 * se_var,
                    "t={t} var {var} vs {want_var}"
                );
            }
        }
    }
}
