//! Exactly solvable diffusion prior: an isotropic Gaussian mixture whose
//! noised, text-restricted and image-conditioned marginals stay Gaussian
//! mixtures, so every noise prediction has a closed form.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vecops::{all_finite, log_sum_exp};

/// Text half of a condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "label")]
pub enum TextCondition {
    Null,
    Label(String),
    /// Restricts the prior to the components *outside* the label's subset.
    Negative(String),
}

/// A pair (text, optional image) fed to a noise predictor. `(Null, None)` is
/// the unconditional prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub text: TextCondition,
    pub image: Option<Vec<f64>>,
}

impl Condition {
    pub fn null() -> Self {
        Self { text: TextCondition::Null, image: None }
    }

    pub fn label(y: impl Into<String>) -> Self {
        Self { text: TextCondition::Label(y.into()), image: None }
    }

    pub fn negative(y: impl Into<String>) -> Self {
        Self { text: TextCondition::Negative(y.into()), image: None }
    }

    pub fn with_image(mut self, image: &[f64]) -> Self {
        self.image = Some(image.to_vec());
        self
    }
}

/// Anything that predicts the noise in `z_t` under a condition.
pub trait NoisePredictor {
    fn dim(&self) -> usize;

    fn predict_noise(
        &self,
        z_t: &[f64],
        t: usize,
        cond: &Condition,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance; zero is a point mass.
    pub variance: f64,
}

/// A normalized isotropic mixture; the result of conditioning and/or noising.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub components: Vec<Component>,
}

impl Mixture {
    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn log_terms(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len() as f64;
        self.components
            .iter()
            .map(|c| {
                let sq: f64 = z.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight.ln() - 0.5 * d * (2.0 * PI * c.variance).ln() - sq / (2.0 * c.variance)
            })
            .collect()
    }

    /// Log density; requires every variance to be positive.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        Ok(log_sum_exp(&self.log_terms(z)))
    }

    /// Gradient of the log density.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        let terms = self.log_terms(z);
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::NonFinite(format!("mixture log density at {z:?}")));
        }
        let mut out = vec![0.0; z.len()];
        for (c, l) in self.components.iter().zip(&terms) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for (o, (zi, mi)) in out.iter_mut().zip(z.iter().zip(&c.mean)) {
                *o += r * (mi - zi) / c.variance;
            }
        }
        Ok(out)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let sd = c.variance.sqrt();
        c.mean
            .iter()
            .map(|m| {
                let n: f64 = rng.sample(StandardNormal);
                m + sd * n
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    dim: usize,
    components: Vec<Component>,
    text_map: BTreeMap<String, Vec<usize>>,
    image_bandwidth: f64,
}

impl GmmPrior {
    pub fn new(
        components: Vec<Component>,
        text_map: BTreeMap<String, Vec<usize>>,
        image_bandwidth: f64,
    ) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidPrior("no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidPrior("zero-dimensional component mean".into()));
        }
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::InvalidPrior(format!(
                    "component {k} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidPrior(format!("component {k} weight must be > 0")));
            }
            if !(c.variance >= 0.0 && c.variance.is_finite()) || !all_finite(&c.mean) {
                return Err(Error::InvalidPrior(format!(
                    "component {k} needs a finite mean and variance >= 0"
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPrior(format!("weights sum to {total}, expected 1")));
        }
        for (label, idx) in &text_map {
            if idx.is_empty() {
                return Err(Error::InvalidPrior(format!("label `{label}` maps to no component")));
            }
            if let Some(bad) = idx.iter().find(|&&i| i >= components.len()) {
                return Err(Error::InvalidPrior(format!(
                    "label `{label}` references component {bad}, only {} exist",
                    components.len()
                )));
            }
        }
        if !(image_bandwidth > 0.0 && image_bandwidth.is_finite()) {
            return Err(Error::InvalidPrior("image bandwidth must be > 0".into()));
        }
        Ok(Self { dim, components, text_map, image_bandwidth })
    }

    /// Same components and labels, different image bandwidth.
    pub fn with_bandwidth(&self, rho: f64) -> Result<Self> {
        Self::new(self.components.clone(), self.text_map.clone(), rho)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn text_map(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.text_map
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.text_map.keys().map(String::as_str)
    }

    pub fn image_bandwidth(&self) -> f64 {
        self.image_bandwidth
    }

    /// Component indices selected by the text half of a condition, ascending.
    pub fn subset(&self, text: &TextCondition) -> Result<Vec<usize>> {
        match text {
            TextCondition::Null => Ok((0..self.components.len()).collect()),
            TextCondition::Label(y) => {
                let mut idx = self
                    .text_map
                    .get(y)
                    .cloned()
                    .ok_or_else(|| Error::UnknownLabel(y.clone()))?;
                idx.sort_unstable();
                idx.dedup();
                Ok(idx)
            }
            TextCondition::Negative(y) => {
                let inside = self
                    .text_map
                    .get(y)
                    .ok_or_else(|| Error::UnknownLabel(y.clone()))?;
                let rest: Vec<usize> =
                    (0..self.components.len()).filter(|i| !inside.contains(i)).collect();
                if rest.is_empty() {
                    Err(Error::EmptyComplement(y.clone()))
                } else {
                    Ok(rest)
                }
            }
        }
    }

    /// The clean distribution `p(z | c)`: text restriction followed by the
    /// Gaussian-kernel product with `N(z; image, rho^2 I)` when an image is given.
    pub fn condition(&self, cond: &Condition) -> Result<Mixture> {
        let subset = self.subset(&cond.text)?;
        let picked: Vec<&Component> = subset.iter().map(|&i| &self.components[i]).collect();
        let components = match &cond.image {
            None => {
                let total: f64 = picked.iter().map(|c| c.weight).sum();
                picked
                    .into_iter()
                    .map(|c| Component { weight: c.weight / total, ..c.clone() })
                    .collect()
            }
            Some(image) => {
                check_dim(self.dim, image.len())?;
                if !all_finite(image) {
                    return Err(Error::NonFinite("image condition".into()));
                }
                let r2 = self.image_bandwidth * self.image_bandwidth;
                let d = self.dim as f64;
                let log_w: Vec<f64> = picked
                    .iter()
                    .map(|c| {
                        let s = c.variance + r2;
                        let sq: f64 =
                            image.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                        c.weight.ln() - 0.5 * d * (2.0 * PI * s).ln() - sq / (2.0 * s)
                    })
                    .collect();
                let lse = log_sum_exp(&log_w);
                picked
                    .iter()
                    .zip(&log_w)
                    .map(|(c, lw)| {
                        let s = c.variance + r2;
                        Component {
                            weight: (lw - lse).exp(),
                            mean: c
                                .mean
                                .iter()
                                .zip(image)
                                .map(|(m, i)| (r2 * m + c.variance * i) / s)
                                .collect(),
                            variance: c.variance * r2 / s,
                        }
                    })
                    .collect()
            }
        };
        Ok(Mixture { components })
    }

    /// The mixture describing `z_t` under condition `cond`.
    pub fn noised_mixture(
        &self,
        t: usize,
        cond: &Condition,
        sched: &NoiseSchedule,
    ) -> Result<Mixture> {
        let ab = sched.alpha_bar(t)?;
        let clean = self.condition(cond)?;
        let a = ab.sqrt();
        let components = clean
            .components
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                let variance = ab * c.variance + (1.0 - ab);
                if variance <= 0.0 {
                    return Err(Error::DegenerateVariance { component: k, t });
                }
                Ok(Component {
                    weight: c.weight,
                    mean: c.mean.iter().map(|m| a * m).collect(),
                    variance,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mixture { components })
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, cond: &Condition, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.condition(cond)?.sample_with(rng))
    }

    pub fn sample(&self, cond: &Condition, seed: u64) -> Result<Vec<f64>> {
        self.sample_with(cond, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

impl NoisePredictor for GmmPrior {
    fn dim(&self) -> usize {
        self.dim
    }

    /// `-sigma_t * grad log p(z_t; t, c)` from the closed-form noised mixture.
    fn predict_noise(
        &self,
        z_t: &[f64],
        t: usize,
        cond: &Condition,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim, z_t.len())?;
        let sigma = sched.sigma(t)?;
        let score = self.noised_mixture(t, cond, sched)?.score(z_t)?;
        Ok(score.into_iter().map(|s| -sigma * s).collect())
    }
}
