//! Mechanism-level measurements: nearest-mode distance, update coherence,
//! cross-view agreement and energy distance to the target distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::prior::{Condition, GmmPrior, TextCondition};
use crate::scene::{Asset, ViewSet};
use crate::vecops::{dist, dot, norm};

/// Number of target draws behind [`source_target_distance`].
pub const TARGET_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean over particles and views of the rendered nearest-mode distance.
    pub nearest_mode_distance: f64,
    /// Nearest text mode of the first particle's first render.
    pub mode_id: usize,
    pub update_coherence: Option<f64>,
    pub view_consistency: Option<f64>,
    pub source_target_distance: Option<f64>,
}

/// Distance to the closest component mean among those selected by `text`,
/// ties going to the lowest index.
pub fn nearest_mode(x: &[f64], prior: &GmmPrior, text: &TextCondition) -> Result<(f64, usize)> {
    check_dim(prior.dim(), x.len())?;
    let mut best = (f64::INFINITY, usize::MAX);
    for k in prior.subset(text)? {
        let d = dist(x, &prior.components()[k].mean);
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(best)
}

/// Mean cosine similarity of consecutive non-zero gradients.
pub fn update_coherence<G: AsRef<[f64]>>(grads: &[G]) -> Result<f64> {
    let usable: Vec<&[f64]> = grads.iter().map(AsRef::as_ref).filter(|g| norm(g) > 0.0).collect();
    if usable.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "update coherence needs at least 2 non-zero gradients, found {}",
            usable.len()
        )));
    }
    let total: f64 = usable.windows(2).map(|w| dot(w[0], w[1]) / (norm(w[0]) * norm(w[1]))).sum();
    Ok(total / (usable.len() - 1) as f64)
}

/// Fraction of (particle, view pair) combinations whose renders share a
/// nearest mode.
pub fn view_consistency(asset: &Asset, views: &ViewSet, prior: &GmmPrior, text: &TextCondition) -> Result<f64> {
    if views.len() < 2 {
        return Err(Error::InvalidArgument("view consistency needs at least two views".into()));
    }
    let (mut agree, mut total) = (0usize, 0usize);
    for theta in &asset.particles {
        let modes = views
            .views
            .iter()
            .map(|v| Ok(nearest_mode(&v.render(theta)?, prior, text)?.1))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..modes.len() {
            for j in i + 1..modes.len() {
                agree += usize::from(modes[i] == modes[j]);
                total += 1;
            }
        }
    }
    Ok(agree as f64 / total as f64)
}

fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let sum: f64 = a.par_iter().map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>()).sum();
    sum / (a.len() * b.len()) as f64
}

/// V-statistic energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|`. Non-negative,
/// symmetric and exactly zero for identical samples.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    EnergyReference::from_samples(y.to_vec())?.distance(x)
}

/// Target samples with their self-distance term cached, so repeated
/// evaluations against a moving ensemble cost `O(n m)`.
#[derive(Debug, Clone)]
pub struct EnergyReference {
    samples: Vec<Vec<f64>>,
    self_term: f64,
}

impl EnergyReference {
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Result<Self> {
        let d = samples
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidArgument("energy distance needs samples".into()))?;
        for s in &samples {
            check_dim(d, s.len())?;
        }
        let self_term = mean_cross_distance(&samples, &samples);
        Ok(Self { samples, self_term })
    }

    /// `n` seeded draws from the text-conditioned prior.
    pub fn from_prior(prior: &GmmPrior, text: &TextCondition, n: usize, seed: u64) -> Result<Self> {
        let cond = Condition { text: text.clone(), image: None };
        let mixture = prior.condition(&cond)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_samples((0..n).map(|_| mixture.sample_with(&mut rng)).collect())
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn distance(&self, x: &[Vec<f64>]) -> Result<f64> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("energy distance needs samples".into()));
        }
        for s in x {
            check_dim(self.samples[0].len(), s.len())?;
        }
        let cross = mean_cross_distance(x, &self.samples);
        let own = mean_cross_distance(x, x);
        Ok((2.0 * cross - own - self.self_term).max(0.0))
    }
}

/// Energy distance between an ensemble of renders and [`TARGET_SAMPLES`]
/// seeded draws from the text-conditioned prior.
pub fn source_target_distance(
    renders: &[Vec<f64>],
    prior: &GmmPrior,
    text: &TextCondition,
    seed: u64,
) -> Result<f64> {
    if renders.len() < 2 {
        return Err(Error::InvalidArgument("source/target distance needs at least two particles".into()));
    }
    EnergyReference::from_prior(prior, text, TARGET_SAMPLES, seed)?.distance(renders)
}
