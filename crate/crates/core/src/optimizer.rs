//! The per-step loop: pick a view, render, encode, noise, evaluate guidance,
//! optionally fine-tune the adapter, pull the residual back to the asset and
//! apply the update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adam::{Adam, AdamParams};
use crate::error::{check_dim, Error, Result};
use crate::guidance::{guidance, GuidanceConfig, GuidanceInput, GuidanceResult, Variant};
use crate::learned::Denoiser;
use crate::metrics::{nearest_mode, update_coherence, view_consistency, EnergyReference, MetricReport, TARGET_SAMPLES};
use crate::prior::{GmmPrior, NoisePredictor, TextCondition};
use crate::scene::{Asset, Encoding, View, ViewSet};
use crate::schedule::NoiseSchedule;
use crate::vecops::{all_finite, dot, norm, scale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    #[default]
    Analytic,
    Learned,
}

/// Starting point of the asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum AssetInit {
    /// A single particle at `theta`.
    Point { theta: Vec<f64> },
    /// `particles` i.i.d. draws from `N(mean, std^2 I)`, seeded by the run seed.
    Gaussian { mean: Vec<f64>, std: f64, particles: usize },
}

impl AssetInit {
    pub fn world_dim(&self) -> usize {
        match self {
            AssetInit::Point { theta } => theta.len(),
            AssetInit::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// Initialization draws come from their own ChaCha stream so they never
    /// perturb the noise stream.
    pub fn build(&self, seed: u64) -> Result<Asset> {
        match self {
            AssetInit::Point { theta } => Asset::new(vec![theta.clone()]),
            AssetInit::Gaussian { mean, std, particles } => {
                if *particles == 0 || !(*std >= 0.0) {
                    return Err(Error::InvalidArgument("gaussian init needs particles >= 1 and std >= 0".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                Asset::new(
                    (0..*particles)
                        .map(|_| mean.iter().map(|m| m + std * rng.sample::<f64, _>(StandardNormal)).collect())
                        .collect(),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Snapshot cadence in steps; 0 records only the initial and final state.
    pub every: usize,
    /// Track energy distance of view-0 renders to the text-conditioned target.
    pub energy: bool,
    pub reference_size: usize,
    pub reference_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { every: 0, energy: false, reference_size: TARGET_SAMPLES, reference_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub seed: u64,
    /// Fine-tune every this many steps (and on every filter rejection).
    pub finetune_period: usize,
    pub finetune_lr: f64,
    pub guidance: GuidanceConfig,
    pub prior: PriorKind,
    /// Target text label.
    pub text: String,
    /// Source label for `neg-source`, and for the anchored variants when
    /// `anchor_with_neg` is set.
    pub neg_text: Option<String>,
    pub anchor_with_neg: bool,
    pub encoding: Encoding,
    pub init: AssetInit,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn new(variant: Variant, text: impl Into<String>, init: AssetInit) -> Self {
        Self {
            steps: 2000,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            adam: AdamParams::default(),
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            seed: 0,
            finetune_period: 10,
            finetune_lr: 1e-4,
            guidance: GuidanceConfig::for_variant(variant),
            prior: PriorKind::Analytic,
            text: text.into(),
            neg_text: None,
            anchor_with_neg: false,
            encoding: Encoding::Identity,
            init,
            metrics: MetricsConfig::default(),
        }
    }

    /// Inclusive timestep range `[ceil(t_min T), floor(t_max T)]`, clamped to `[1, T]`.
    pub fn t_range(&self, total_steps: usize) -> Result<(usize, usize)> {
        let lo = ((self.t_min_frac * total_steps as f64).ceil() as usize).max(1);
        let hi = ((self.t_max_frac * total_steps as f64).floor() as usize).min(total_steps);
        if lo > hi {
            return Err(Error::InvalidArgument(format!("empty timestep range [{lo}, {hi}]")));
        }
        Ok((lo, hi))
    }

    fn source_label(&self) -> Option<&str> {
        match self.guidance.variant {
            Variant::NegSource => self.neg_text.as_deref(),
            v if v.is_anchored() && self.anchor_with_neg => self.neg_text.as_deref(),
            _ => None,
        }
    }

    pub fn validate(&self, ctx: &RunContext<'_>) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0 < self.t_min_frac && self.t_min_frac < self.t_max_frac && self.t_max_frac < 1.0) {
            return bad(format!("need 0 < t_min_frac < t_max_frac < 1, got {} and {}", self.t_min_frac, self.t_max_frac));
        }
        if self.finetune_period == 0 {
            return bad("finetune_period must be at least 1".into());
        }
        if !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return bad(format!("finetune_lr must be non-negative, got {}", self.finetune_lr));
        }
        let g = &self.guidance;
        if !(g.omega >= 0.0 && g.omega.is_finite()) {
            return bad(format!("omega must be non-negative, got {}", g.omega));
        }
        if !(g.gamma > 0.0 && g.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", g.gamma));
        }
        ctx.prior.subset(&TextCondition::Label(self.text.clone()))?;
        if let Some(neg) = &self.neg_text {
            ctx.prior.subset(&TextCondition::Label(neg.clone()))?;
        }
        if g.variant == Variant::NegSource && self.neg_text.is_none() {
            return bad("neg-source needs neg_text".into());
        }
        if self.anchor_with_neg && self.neg_text.is_none() {
            return bad("anchor_with_neg needs neg_text".into());
        }
        check_dim(ctx.prior.dim(), ctx.views.latent_dim())?;
        check_dim(ctx.views.world_dim(), self.init.world_dim())?;
        if self.metrics.energy && self.metrics.reference_size < 2 {
            return bad("metrics.reference_size must be at least 2".into());
        }
        self.t_range(ctx.sched.total_steps())?;
        if self.prior == PriorKind::Learned {
            let model = ctx
                .learned
                .ok_or_else(|| Error::InvalidArgument("prior `learned` selected but no model supplied".into()))?;
            check_dim(ctx.prior.dim(), model.arch().dim)?;
            if model.arch().total_steps != ctx.sched.total_steps() {
                return bad("learned model and schedule disagree on the number of timesteps".into());
            }
        }
        Ok(())
    }
}

/// Shared, immutable inputs of a run.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    /// Analytic prior: the guidance source under `PriorKind::Analytic` and
    /// the reference for metrics in every case.
    pub prior: &'a GmmPrior,
    pub sched: &'a NoiseSchedule,
    pub views: &'a ViewSet,
    /// Pretrained denoiser; each run fine-tunes a private copy.
    pub learned: Option<&'a Denoiser>,
}

/// One `(view, t, eps)` draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub view: usize,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// The only randomness a run consumes after initialization. Every draw is
/// fed into a SHA-256 digest so paired runs can prove they saw the same
/// stream.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    hasher: Sha256,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), hasher: Sha256::new() }
    }

    pub fn draw(&mut self, n_views: usize, t_range: (usize, usize), dim: usize) -> Draw {
        let view = self.rng.random_range(0..n_views);
        let t = self.rng.random_range(t_range.0..=t_range.1);
        let eps: Vec<f64> = (0..dim).map(|_| self.rng.sample(StandardNormal)).collect();
        self.hasher.update((view as u64).to_le_bytes());
        self.hasher.update((t as u64).to_le_bytes());
        for e in &eps {
            self.hasher.update(e.to_le_bytes());
        }
        Draw { view, t, eps }
    }

    pub fn hash(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

/// `A^T (sqrt(alpha_bar_t) g)`: the chain `dz_t/dTheta` applied to a latent
/// residual.
pub fn pullback(view: &View, grad_z: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    view.backproject_grad(&scale(grad_z, sched.alpha_bar(t)?.sqrt()))
}

/// `<g, z_t(theta)>` with `g`, the view, `t` and `eps` frozen. Its gradient
/// in `theta` is exactly what [`pullback`] returns.
pub fn sds_surrogate(
    theta: &[f64],
    view: &View,
    t: usize,
    eps: &[f64],
    grad_z: &[f64],
    sched: &NoiseSchedule,
) -> Result<f64> {
    let z_t = sched.add_noise(&view.render(theta)?, t, eps)?;
    check_dim(z_t.len(), grad_z.len())?;
    Ok(dot(grad_z, &z_t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub nearest_mode_distance: f64,
    pub source_target_distance: Option<f64>,
}

/// One optimization step. Per-draw fields describe particle 0; the rest
/// aggregate over particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub tau: usize,
    pub t: usize,
    pub view: usize,
    /// Particle 0 after the update.
    pub theta: Vec<f64>,
    /// Asset gradient of all particles, concatenated.
    pub grad_theta: Vec<f64>,
    pub grad_norm: f64,
    /// Means over particles.
    pub guidance_norm: f64,
    pub m1_norm: f64,
    pub m2_norm: f64,
    pub rec_loss: f64,
    pub rec_loss_per_dim: f64,
    /// Particle 0.
    pub filter_mask: u8,
    pub filter_rejections: usize,
    pub finetune_steps: usize,
    pub metrics: Option<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: Snapshot,
    pub records: Vec<StepRecord>,
    pub stream_hash: String,
}

impl Trajectory {
    /// `(tau, snapshot)` pairs including the initial state at `tau = 0`.
    pub fn snapshots(&self) -> Vec<(usize, &Snapshot)> {
        std::iter::once((0, &self.initial))
            .chain(self.records.iter().filter_map(|r| r.metrics.as_ref().map(|m| (r.tau, m))))
            .collect()
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub asset: Asset,
    /// Fine-tuned copy of the learned model, when one was used.
    pub model: Option<Denoiser>,
    pub report: Option<MetricReport>,
    /// Set when a step aborted; `trajectory` then holds the completed steps.
    pub failure: Option<Error>,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    ctx: RunContext<'a>,
    asset: Asset,
    adam: Adam,
    model: Option<Denoiser>,
    stream: NoiseStream,
    t_range: (usize, usize),
    reference: Option<EnergyReference>,
    text: TextCondition,
}

impl Runner<'_> {
    fn snapshot(&self) -> Result<Snapshot> {
        let mut total = 0.0;
        for theta in &self.asset.particles {
            for v in &self.ctx.views.views {
                total += nearest_mode(&v.render(theta)?, self.ctx.prior, &self.text)?.0;
            }
        }
        let nearest_mode_distance = total / (self.asset.len() * self.ctx.views.len()) as f64;
        let source_target_distance = match &self.reference {
            Some(r) if self.asset.len() >= 2 => Some(r.distance(&self.view0_renders()?)?),
            _ => None,
        };
        Ok(Snapshot { nearest_mode_distance, source_target_distance })
    }

    fn view0_renders(&self) -> Result<Vec<Vec<f64>>> {
        self.asset.particles.iter().map(|p| self.ctx.views.views[0].render(p)).collect()
    }

    fn guide(&self, theta: &[f64], draw: &Draw) -> Result<(GuidanceResult, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let view = &self.ctx.views.views[draw.view];
        let render = view.render(theta)?;
        let image = self.cfg.encoding.encode(&render)?;
        let z_t = self.ctx.sched.add_noise(&render, draw.t, &draw.eps)?;
        let mut input = GuidanceInput::new(&z_t, draw.t, &draw.eps, &self.cfg.text)
            .with_image(&image)
            .with_render(&render);
        if let Some(neg) = self.cfg.source_label() {
            input = input.with_neg_text(neg);
        }
        let predictor: &dyn NoisePredictor = match &self.model {
            Some(m) => m,
            None => self.ctx.prior,
        };
        let result = guidance(predictor, &input, &self.cfg.guidance, self.ctx.sched)?;
        Ok((result, z_t, image, render))
    }

    fn step(&mut self, tau: usize) -> Result<StepRecord> {
        let (n_views, d) = (self.ctx.views.len(), self.ctx.views.latent_dim());
        let draws: Vec<Draw> =
            (0..self.asset.len()).map(|_| self.stream.draw(n_views, self.t_range, d)).collect();
        let mut grad_theta = Vec::with_capacity(self.asset.len() * self.asset.world_dim());
        let mut sums = [0.0; 5];
        let (mut rejections, mut finetune_steps, mut mask0) = (0, 0, 1);
        for (p, draw) in draws.iter().enumerate() {
            let (res, z_t, image, render) = self.guide(&self.asset.particles[p], draw)?;
            if !all_finite(&res.grad_z) {
                return Err(Error::NonFinite(format!("guidance at step {tau}, particle {p}, t={}", draw.t)));
            }
            let g = pullback(&self.ctx.views.views[draw.view], &res.grad_z, draw.t, self.ctx.sched)?;
            grad_theta.extend_from_slice(&g);
            sums[0] += norm(&res.grad_z);
            sums[1] += norm(&res.m1);
            sums[2] += norm(&res.m2);
            sums[3] += res.rec_loss;
            sums[4] += res.rec_loss_per_dim;
            rejections += usize::from(res.filter_mask == 0);
            if p == 0 {
                mask0 = res.filter_mask;
            }
            if self.cfg.guidance.variant == Variant::AnchordsFinetune
                && (res.filter_mask == 0 || tau % self.cfg.finetune_period == 0)
            {
                if let Some(model) = &mut self.model {
                    model.finetune_adapter_step_towards(&z_t, draw.t, &image, &render, self.ctx.sched, self.cfg.finetune_lr)?;
                    finetune_steps += 1;
                }
            }
        }
        if !all_finite(&grad_theta) {
            return Err(Error::NonFinite(format!("asset gradient at step {tau}")));
        }
        let k = self.asset.world_dim();
        match self.cfg.optimizer {
            OptimizerKind::Sgd => {
                for (theta, g) in self.asset.particles.iter_mut().zip(grad_theta.chunks(k)) {
                    theta.iter_mut().zip(g).for_each(|(x, g)| *x -= self.cfg.lr * g);
                }
            }
            OptimizerKind::Adam => {
                let mut flat: Vec<f64> = self.asset.particles.concat();
                self.adam.step(&mut flat, &grad_theta, self.cfg.lr);
                for (theta, chunk) in self.asset.particles.iter_mut().zip(flat.chunks(k)) {
                    theta.copy_from_slice(chunk);
                }
            }
        }
        if self.asset.particles.iter().any(|p| !all_finite(p)) {
            return Err(Error::NonFinite(format!("asset parameters after step {tau}")));
        }
        let every = self.cfg.metrics.every;
        let metrics = if tau == self.cfg.steps || (every > 0 && tau % every == 0) {
            Some(self.snapshot()?)
        } else {
            None
        };
        let n = self.asset.len() as f64;
        Ok(StepRecord {
            tau,
            t: draws[0].t,
            view: draws[0].view,
            theta: self.asset.particles[0].clone(),
            grad_norm: norm(&grad_theta),
            grad_theta,
            guidance_norm: sums[0] / n,
            m1_norm: sums[1] / n,
            m2_norm: sums[2] / n,
            rec_loss: sums[3] / n,
            rec_loss_per_dim: sums[4] / n,
            filter_mask: mask0,
            filter_rejections: rejections,
            finetune_steps,
            metrics,
        })
    }

    fn report(&self, records: &[StepRecord]) -> Result<MetricReport> {
        let last = self.snapshot()?;
        let first_render = self.ctx.views.views[0].render(&self.asset.particles[0])?;
        let (_, mode_id) = nearest_mode(&first_render, self.ctx.prior, &self.text)?;
        let grads: Vec<&[f64]> = records.iter().map(|r| r.grad_theta.as_slice()).collect();
        Ok(MetricReport {
            nearest_mode_distance: last.nearest_mode_distance,
            mode_id,
            update_coherence: update_coherence(&grads).ok(),
            view_consistency: if self.ctx.views.len() >= 2 {
                Some(view_consistency(&self.asset, self.ctx.views, self.ctx.prior, &self.text)?)
            } else {
                None
            },
            source_target_distance: last.source_target_distance,
        })
    }
}

/// Executes `cfg.steps` steps. Configuration problems are returned as
/// errors; a step that fails mid-run is reported through
/// [`RunOutcome::failure`] with the partial trajectory intact.
pub fn run(cfg: &RunConfig, ctx: &RunContext<'_>) -> Result<RunOutcome> {
    cfg.validate(ctx)?;
    let text = TextCondition::Label(cfg.text.clone());
    let reference = if cfg.metrics.energy {
        Some(EnergyReference::from_prior(ctx.prior, &text, cfg.metrics.reference_size, cfg.metrics.reference_seed)?)
    } else {
        None
    };
    let model = match cfg.prior {
        PriorKind::Learned => ctx.learned.cloned(),
        PriorKind::Analytic => None,
    };
    let mut runner = Runner {
        cfg,
        ctx: *ctx,
        asset: cfg.init.build(cfg.seed)?,
        adam: Adam::new(cfg.adam),
        model,
        stream: NoiseStream::new(cfg.seed),
        t_range: cfg.t_range(ctx.sched.total_steps())?,
        reference,
        text,
    };
    let initial = runner.snapshot()?;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut failure = None;
    for tau in 1..=cfg.steps {
        match runner.step(tau) {
            Ok(r) => records.push(r),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let report = if failure.is_none() { Some(runner.report(&records)?) } else { None };
    Ok(RunOutcome {
        trajectory: Trajectory { initial, records, stream_hash: runner.stream.hash() },
        asset: runner.asset,
        model: runner.model,
        report,
        failure,
    })
}
