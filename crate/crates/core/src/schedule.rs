//! Discrete DDPM noise schedule and the forward noising map.
//!
//! Timesteps are 1-indexed: `t` ranges over `1..=total_steps`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// The factor `w(t)` multiplying the distillation residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    ConstantOne,
    SigmaSquared,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant-one" => Ok(Self::ConstantOne),
            "sigma-squared" => Ok(Self::SigmaSquared),
            other => Err(Error::InvalidArgument(format!("unknown weight mode `{other}`"))),
        }
    }
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` over `total_steps` steps.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "total_steps must be at least 2, got {total_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let span = (total_steps - 1) as f64;
        let betas = (0..total_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Builds a schedule directly from cumulative products, which must be
    /// strictly decreasing inside (0, 1).
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::InvalidSchedule("empty alpha_bar sequence".into()));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        for &a in &alpha_bars {
            if !(a > 0.0 && a < prev) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bars must be strictly decreasing in (0, 1); got {a} after {prev}"
                )));
            }
            betas.push(1.0 - a / prev);
            prev = a;
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            Err(Error::TimestepOutOfRange { t, total: self.total_steps() })
        } else {
            Ok(())
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Noise level `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// `sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps`.
    pub fn add_noise(&self, z: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(z.len(), eps.len())?;
        let ab = self.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
    }

    /// Signal-to-noise ratio of the amplitudes, `sqrt(alpha_bar_t) / sqrt(1 - alpha_bar_t)`.
    pub fn eta(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab.sqrt() / (1.0 - ab).sqrt())
    }

    pub fn weight(&self, t: usize, mode: WeightMode) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(match mode {
            WeightMode::ConstantOne => 1.0,
            WeightMode::SigmaSquared => 1.0 - ab,
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}
