use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::net::{Denoiser, GradScope};
use crate::adam::{Adam, AdamParams};
use crate::error::{check_dim, Error, Result};
use crate::prior::{Condition, GmmPrior};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamParams,
    /// Probability of dropping the text label to the null condition.
    pub text_dropout: f64,
    /// Probability of conditioning on the clean latent as the image.
    pub image_prob: f64,
    pub validation_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1e-3,
            adam: AdamParams::default(),
            text_dropout: 0.5,
            image_prob: 0.5,
            validation_size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-dimension squared error of each training batch.
    pub losses: Vec<f64>,
    pub validation_initial: f64,
    pub validation_final: f64,
}

/// One `(z_t, t, eps, condition)` draw for denoising score matching.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingSample {
    pub z: Vec<f64>,
    pub z_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub cond: Condition,
}

impl DenoisingSample {
    pub fn draw<R: Rng + ?Sized>(
        prior: &GmmPrior,
        sched: &NoiseSchedule,
        opts: &PretrainOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let labels: Vec<&str> = prior.labels().collect();
        let text = if labels.is_empty() || rng.random::<f64>() < opts.text_dropout {
            Condition::null()
        } else {
            Condition::label(labels[rng.random_range(0..labels.len())])
        };
        let z = prior.sample_with(&text, rng)?;
        let t = rng.random_range(1..=sched.total_steps());
        let eps: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
        let z_t = sched.add_noise(&z, t, &eps)?;
        let cond = if rng.random::<f64>() < opts.image_prob { text.with_image(&z) } else { text };
        Ok(Self { z, z_t, t, eps, cond })
    }
}

impl Denoiser {
    /// Mean per-dimension squared noise-prediction error over `batch`.
    pub fn denoising_loss(&self, batch: &[DenoisingSample]) -> Result<f64> {
        let mut total = 0.0;
        for s in batch {
            let out = self.predict(&s.z_t, s.t, &s.cond)?;
            total += out.iter().zip(&s.eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / (batch.len() * self.arch().dim) as f64)
    }

    /// Denoising-score-matching pretraining with Adam. Zero steps leaves the
    /// model untouched.
    pub fn pretrain(
        &mut self,
        prior: &GmmPrior,
        sched: &NoiseSchedule,
        opts: &PretrainOptions,
        seed: u64,
    ) -> Result<TrainReport> {
        check_dim(self.arch().dim, prior.dim())?;
        if sched.total_steps() != self.arch().total_steps {
            return Err(Error::InvalidArgument(format!(
                "model expects {} timesteps, schedule has {}",
                self.arch().total_steps,
                sched.total_steps()
            )));
        }
        for label in prior.labels() {
            if !self.arch().labels.iter().any(|l| l == label) {
                return Err(Error::UnknownLabel(label.to_string()));
            }
        }
        let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
        let validation = (0..opts.validation_size)
            .map(|_| DenoisingSample::draw(prior, sched, opts, &mut val_rng))
            .collect::<Result<Vec<_>>>()?;
        let validation_initial = self.denoising_loss(&validation)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(opts.adam);
        let mut losses = Vec::with_capacity(opts.steps);
        let mut grad = vec![0.0; self.params().len()];
        let norm = 1.0 / (opts.batch_size.max(1) * self.arch().dim) as f64;
        for step in 0..opts.steps {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for _ in 0..opts.batch_size {
                let s = DenoisingSample::draw(prior, sched, opts, &mut rng)?;
                let cache = self.forward(&s.z_t, s.t, &s.cond)?;
                let d_out: Vec<f64> = cache
                    .output
                    .iter()
                    .zip(&s.eps)
                    .map(|(a, b)| {
                        loss += (a - b) * (a - b) * norm;
                        2.0 * (a - b) * norm
                    })
                    .collect();
                self.backward(&cache, &d_out, &mut grad, GradScope::All);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("pretraining diverged at step {step} (loss {loss})")));
            }
            losses.push(loss);
            adam.step(self.params_mut(), &grad, opts.lr);
        }
        let validation_final = self.denoising_loss(&validation)?;
        Ok(TrainReport { losses, validation_initial, validation_final })
    }

    /// `|zhat - target|^2` where `zhat` is the one-step reconstruction from the
    /// null-text, image-conditioned prediction.
    pub fn rec_loss(
        &self,
        z_t: &[f64],
        t: usize,
        image: &[f64],
        target: &[f64],
        sched: &NoiseSchedule,
    ) -> Result<f64> {
        let eps = self.predict(z_t, t, &Condition::null().with_image(image))?;
        let ab = sched.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z_t
            .iter()
            .zip(&eps)
            .zip(target)
            .map(|((z, e), r)| {
                let d = (z - s * e) / a - r;
                d * d
            })
            .sum())
    }

    /// One Adam step on the adapter's final layer against the reconstruction
    /// loss, with the image doubling as the reconstruction target. Returns
    /// the loss before the step.
    pub fn finetune_adapter_step(
        &mut self,
        z_t: &[f64],
        t: usize,
        image: &[f64],
        sched: &NoiseSchedule,
        lr: f64,
    ) -> Result<f64> {
        self.finetune_adapter_step_towards(z_t, t, image, image, sched, lr)
    }

    /// Like [`Denoiser::finetune_adapter_step`] with a reconstruction target
    /// that differs from the conditioning image (non-identity encodings).
    pub fn finetune_adapter_step_towards(
        &mut self,
        z_t: &[f64],
        t: usize,
        image: &[f64],
        target: &[f64],
        sched: &NoiseSchedule,
        lr: f64,
    ) -> Result<f64> {
        check_dim(self.arch().dim, image.len())?;
        check_dim(self.arch().dim, target.len())?;
        let cache = self.forward(z_t, t, &Condition::null().with_image(image))?;
        let ab = sched.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut loss = 0.0;
        let d_out: Vec<f64> = z_t
            .iter()
            .zip(&cache.output)
            .zip(target)
            .map(|((z, e), r)| {
                let d = (z - s * e) / a - r;
                loss += d * d;
                -2.0 * d * s / a
            })
            .collect();
        let mut grad = vec![0.0; self.params().len()];
        self.backward(&cache, &d_out, &mut grad, GradScope::AdapterFinal);
        let range = self.adapter_final_range();
        if !loss.is_finite() || grad[range.clone()].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("adapter fine-tuning gradient at t={t}")));
        }
        let mut opt = self.finetune_opt.take().unwrap_or_else(|| Adam::new(AdamParams::default()));
        opt.step(&mut self.params_mut()[range.clone()], &grad[range], lr);
        self.finetune_opt = Some(opt);
        Ok(loss)
    }
}
