//! Inference-time guidance operators: CFG, negative prompt, SLD and SEGA.
//!
//! All operators act on single noise-estimate vectors.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::cfg_combine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMethod {
    /// Plain conditional estimate on the prompt.
    None,
    Cfg,
    NegPrompt,
    Sld,
    Sega,
}

impl std::str::FromStr for GuidanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "cfg" => Self::Cfg,
            "neg_prompt" => Self::NegPrompt,
            "sld" => Self::Sld,
            "sega" => Self::Sega,
            other => return Err(Error::Config(format!("unknown guidance method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub method: GuidanceMethod,
    /// CFG scale.
    pub s_g: f64,
    /// Safety scale.
    pub s_s: f64,
    /// SLD threshold.
    pub lambda_sld: f64,
    /// SEGA percentile in (0, 100].
    pub lambda_sega: f64,
    /// Concepts to steer away from (`c_s`).
    pub target: Vec<usize>,
    /// Prompt concepts (`c_p`); empty means unconditional.
    pub prompt: Vec<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            method: GuidanceMethod::Cfg,
            s_g: 7.5,
            s_s: 1.0,
            lambda_sld: 1.0,
            lambda_sega: 10.0,
            target: Vec::new(),
            prompt: Vec::new(),
        }
    }
}

impl GuidanceConfig {
    pub fn cfg(prompt: Vec<usize>, s_g: f64) -> Self {
        Self {
            method: GuidanceMethod::Cfg,
            s_g,
            prompt,
            ..Default::default()
        }
    }

    pub fn unguided(prompt: Vec<usize>) -> Self {
        Self {
            method: GuidanceMethod::None,
            prompt,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("s_g", self.s_g),
            ("s_s", self.s_s),
            ("lambda_sld", self.lambda_sld),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if self.lambda_sld < 0.0 {
            return Err(Error::Config("lambda_sld must be >= 0".into()));
        }
        if !(self.lambda_sega > 0.0 && self.lambda_sega <= 100.0) {
            return Err(Error::Config(format!(
                "lambda_sega must be in (0, 100], got {}",
                self.lambda_sega
            )));
        }
        let needs_target = matches!(
            self.method,
            GuidanceMethod::NegPrompt | GuidanceMethod::Sld | GuidanceMethod::Sega
        );
        if needs_target && self.target.is_empty() {
            return Err(Error::Config(format!(
                "guidance method {:?} needs target concepts",
                self.method
            )));
        }
        Ok(())
    }
}

/// CFG with the unconditional slot replaced by the target-concept estimate.
pub fn neg_prompt_guidance(eps_cs: &[f64], eps_cp: &[f64], s_g: f64) -> Result<Vec<f64>> {
    check_dim(eps_cs.len(), eps_cp.len())?;
    Ok(eps_cs
        .iter()
        .zip(eps_cp)
        .map(|(n, p)| n + s_g * (p - n))
        .collect())
}

/// SLD element-wise scale: `max(1, |D_i|)` where `|D_i| < lam`, else 0.
pub fn sld_mu(d: &[f64], lam: f64) -> Vec<f64> {
    d.iter()
        .map(|v| if v.abs() < lam { v.abs().max(1.0) } else { 0.0 })
        .collect()
}

pub fn sld_guidance(
    eps_u: &[f64],
    eps_cp: &[f64],
    eps_cs: &[f64],
    s_g: f64,
    s_s: f64,
    lam: f64,
) -> Result<Vec<f64>> {
    check_dim(eps_u.len(), eps_cp.len())?;
    check_dim(eps_u.len(), eps_cs.len())?;
    let cfg = cfg_combine(eps_u, eps_cp, s_g)?;
    let d: Vec<f64> = eps_cs
        .iter()
        .zip(eps_cp)
        .map(|(s, p)| s_s * (s - p))
        .collect();
    let mu = sld_mu(&d, lam);
    Ok((0..cfg.len())
        .map(|i| cfg[i] - mu[i] * (eps_cs[i] - eps_u[i]))
        .collect())
}

/// Smallest of the `ceil(lam/100 * n)` largest entries of `v`.
pub fn sega_eta(v: &[f64], lam: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("sega_eta input"));
    }
    if !(lam > 0.0 && lam <= 100.0) {
        return Err(Error::Config(format!(
            "percentile must be in (0, 100], got {lam}"
        )));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let keep = ((lam / 100.0) * v.len() as f64).ceil() as usize;
    Ok(sorted[keep.clamp(1, v.len()) - 1])
}

pub fn sega_guidance(
    eps_u: &[f64],
    eps_cp: &[f64],
    eps_cs: &[f64],
    s_g: f64,
    s_s: f64,
    lam: f64,
) -> Result<Vec<f64>> {
    check_dim(eps_u.len(), eps_cp.len())?;
    check_dim(eps_u.len(), eps_cs.len())?;
    let cfg = cfg_combine(eps_u, eps_cp, s_g)?;
    let d_abs: Vec<f64> = eps_cs
        .iter()
        .zip(eps_u)
        .map(|(s, u)| (s_s * (s - u)).abs())
        .collect();
    let eta = sega_eta(&d_abs, lam)?;
    Ok((0..cfg.len())
        .map(|i| {
            let mask = if d_abs[i] >= eta { 1.0 } else { 0.0 };
            cfg[i] - mask * (eps_cs[i] - eps_u[i])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neg_prompt_cases() {
        assert_eq!(
            neg_prompt_guidance(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(),
            vec![0.0, 1.0]
        );
        assert_eq!(
            neg_prompt_guidance(&[1.0, 0.0], &[0.0, 1.0], 0.0).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            neg_prompt_guidance(&[1.0, 0.0], &[0.0, 1.0], 7.5).unwrap(),
            vec![-6.5, 7.5]
        );
        let e = [0.3, -1.2];
        assert_eq!(neg_prompt_guidance(&e, &e, 4.0).unwrap(), e.to_vec());
    }

    #[test]
    fn sld_mu_cases() {
        assert_eq!(sld_mu(&[0.5, 2.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(sld_mu(&[0.0, 0.0, 0.0], 0.5), vec![1.0; 3]);
        assert_eq!(sld_mu(&[0.0, 0.3, -4.0], 0.0), vec![0.0; 3]);
        assert_eq!(sld_mu(&[-1.5, 2.5], 3.0), vec![1.5, 2.5]);
    }

    #[test]
    fn sld_hand_example() {
        let out = sld_guidance(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], 1.0, 1.0, 3.0).unwrap();
        assert_eq!(out, vec![1.0, -4.0]);
    }

    #[test]
    fn sld_reduces_to_cfg() {
        let u = [0.2, -0.4];
        let c = [1.0, 0.5];
        let cfg = cfg_combine(&u, &c, 7.5).unwrap();
        assert_eq!(sld_guidance(&u, &c, &u, 7.5, 1.0, 1.0).unwrap(), cfg);
        // every |D_i| >= lam saturates mu to zero
        let cs = [5.0, -5.0];
        assert_eq!(sld_guidance(&u, &c, &cs, 7.5, 100.0, 1.0).unwrap(), cfg);
    }

    #[test]
    fn sega_eta_cases() {
        assert_eq!(sega_eta(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 3.0);
        assert_eq!(sega_eta(&[4.0, 1.0, 3.0, 2.0], 100.0).unwrap(), 1.0);
        for lam in [1.0, 10.0, 37.5, 100.0] {
            assert_eq!(sega_eta(&[2.5; 5], lam).unwrap(), 2.5);
        }
        assert!(sega_eta(&[], 10.0).is_err());
        assert!(sega_eta(&[1.0], 0.0).is_err());
        assert!(sega_eta(&[1.0], 100.5).is_err());
    }

    #[test]
    fn sega_cases() {
        let u = [0.1, 0.2, 0.3, 0.4];
        let c = [1.0, 1.0, 1.0, 1.0];
        let cs = [0.5, -0.5, 0.25, 2.0];
        let cfg = cfg_combine(&u, &c, 7.5).unwrap();
        let full = sega_guidance(&u, &c, &cs, 7.5, 1.0, 100.0).unwrap();
        for i in 0..4 {
            assert_eq!(full[i], cfg[i] - (cs[i] - u[i]));
        }
        assert_eq!(sega_guidance(&u, &c, &u, 7.5, 1.0, 10.0).unwrap(), cfg);

        let zero = [0.0; 4];
        let cs = [3.0, 1.0, 0.0, 0.0];
        let out = sega_guidance(&zero, &c, &cs, 7.5, 1.0, 25.0).unwrap();
        let cfg = cfg_combine(&zero, &c, 7.5).unwrap();
        assert_eq!(out, vec![cfg[0] - 3.0, cfg[1], cfg[2], cfg[3]]);
    }

    #[test]
    fn config_validation() {
        let mut g = GuidanceConfig::default();
        assert!(g.validate().is_ok());
        g.lambda_sega = 0.0;
        assert!(g.validate().is_err());
        g.lambda_sega = 10.0;
        g.method = GuidanceMethod::Sld;
        assert!(g.validate().is_err());
        g.target = vec![1];
        assert!(g.validate().is_ok());
        g.s_g = f64::NAN;
        assert!(g.validate().is_err());
    }
}
