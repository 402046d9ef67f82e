//! Experiment configuration file: a JSON document with the sections
//! `schedule`, `prior`, `views`, `guidance`, `run`, `metrics` and an
//! optional `training` section for the learned prior. Unknown fields are
//! rejected and every error names the offending field path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::AdamParams;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, Variant, DEFAULT_GAMMA};
use crate::learned::{Arch, PretrainOptions};
use crate::metrics::TARGET_SAMPLES;
use crate::optimizer::{AssetInit, MetricsConfig, OptimizerKind, PriorKind, RunConfig};
use crate::prior::{Component, GmmPrior};
use crate::scene::{make_views, Encoding, ViewSet};
use crate::schedule::{NoiseSchedule, WeightMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { total_steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub components: Vec<Component>,
    pub text_map: BTreeMap<String, Vec<usize>>,
    #[serde(default = "default_bandwidth")]
    pub image_bandwidth: f64,
    /// Which predictor drives guidance. The analytic mixture is always used
    /// for metrics and as the learned model's training distribution.
    #[serde(default)]
    pub kind: PriorKind,
    /// Learned-prior checkpoint, relative to the config file.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_bandwidth() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewsSection {
    /// Asset dimension; defaults to the latent dimension.
    pub world_dim: Option<usize>,
    pub count: usize,
    pub seed: u64,
    pub encoding: Encoding,
}

impl Default for ViewsSection {
    fn default() -> Self {
        Self { world_dim: None, count: 1, seed: 0, encoding: Encoding::Identity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub variant: Variant,
    pub text: String,
    /// Defaults per variant: 100 for vanilla SDS, 7.5 otherwise.
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_true")]
    pub include_m2: bool,
    #[serde(default)]
    pub target_cfg: bool,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub neg_text: Option<String>,
    #[serde(default)]
    pub anchor_with_neg: bool,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub seed: u64,
    pub finetune_period: usize,
    pub finetune_lr: f64,
    /// Defaults to a single particle at the origin.
    pub init: Option<AssetInit>,
}

impl Default for RunSection {
    fn default() -> Self {
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
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub every: usize,
    pub energy: bool,
    pub reference_size: usize,
    pub reference_seed: u64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { every: 0, energy: false, reference_size: TARGET_SAMPLES, reference_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(flatten)]
    pub options: PretrainOptions,
    pub seed: u64,
    pub init_seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { options: PretrainOptions::default(), seed: 0, init_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub prior: PriorSection,
    #[serde(default)]
    pub views: ViewsSection,
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub training: TrainingSection,
}

fn config_err(path: impl Into<String>, message: impl ToString) -> Error {
    Error::Config { path: path.into(), message: message.to_string() }
}

impl ExperimentConfig {
    /// Parses and validates. Errors carry the JSON path of the offending
    /// field, plus line and column for syntax and type errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            config_err(path, format!("{inner}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(".", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.total_steps, s.beta_start, s.beta_end).map_err(|e| config_err("schedule", e))
    }

    pub fn prior(&self) -> Result<GmmPrior> {
        let p = &self.prior;
        GmmPrior::new(p.components.clone(), p.text_map.clone(), p.image_bandwidth).map_err(|e| config_err("prior", e))
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn world_dim(&self) -> usize {
        self.views.world_dim.unwrap_or_else(|| self.latent_dim())
    }

    pub fn views(&self) -> Result<ViewSet> {
        make_views(self.world_dim(), self.latent_dim(), self.views.count, self.views.seed)
            .map_err(|e| config_err("views", e))
    }

    /// Architecture of the learned prior implied by the analytic prior.
    pub fn arch(&self) -> Arch {
        Arch::new(self.latent_dim(), self.prior.text_map.keys().cloned().collect(), self.schedule.total_steps)
    }

    /// Checkpoint path resolved against the directory of `config_path`.
    pub fn checkpoint_path(&self, config_path: &Path) -> Option<PathBuf> {
        self.prior.checkpoint.as_ref().map(|p| match config_path.parent() {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.clone(),
        })
    }

    pub fn run_config(&self) -> RunConfig {
        let g = &self.guidance;
        let r = &self.run;
        RunConfig {
            steps: r.steps,
            lr: r.lr,
            optimizer: r.optimizer,
            adam: r.adam,
            t_min_frac: r.t_min_frac,
            t_max_frac: r.t_max_frac,
            seed: r.seed,
            finetune_period: r.finetune_period,
            finetune_lr: r.finetune_lr,
            guidance: GuidanceConfig {
                variant: g.variant,
                omega: g.omega.unwrap_or_else(|| g.variant.default_omega()),
                gamma: g.gamma,
                include_m2: g.include_m2,
                target_cfg: g.target_cfg,
                weight_mode: g.weight_mode,
            },
            prior: self.prior.kind,
            text: g.text.clone(),
            neg_text: g.neg_text.clone(),
            anchor_with_neg: g.anchor_with_neg,
            encoding: self.views.encoding.clone(),
            init: r.init.clone().unwrap_or(AssetInit::Point { theta: vec![0.0; self.world_dim()] }),
            metrics: MetricsConfig {
                every: self.metrics.every,
                energy: self.metrics.energy,
                reference_size: self.metrics.reference_size,
                reference_seed: self.metrics.reference_seed,
            },
        }
    }

    /// Copy with a different seed and variant; omega follows the new
    /// variant's default unless the file pinned it.
    pub fn with_variant_and_seed(&self, variant: Variant, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.guidance.variant = variant;
        cfg.run.seed = seed;
        cfg
    }

    fn validate(&self) -> Result<()> {
        self.schedule()?;
        let prior = self.prior()?;
        for (field, label) in [("guidance.text", Some(&self.guidance.text)), ("guidance.neg_text", self.guidance.neg_text.as_ref())] {
            if let Some(label) = label {
                if !prior.text_map().contains_key(label) {
                    return Err(config_err(field, format!("unknown text label `{label}`")));
                }
            }
        }
        if self.guidance.variant == Variant::NegSource && self.guidance.neg_text.is_none() {
            return Err(config_err("guidance.neg_text", "required by variant neg-source"));
        }
        if self.guidance.anchor_with_neg && self.guidance.neg_text.is_none() {
            return Err(config_err("guidance.neg_text", "required by anchor_with_neg"));
        }
        if let Some(o) = self.guidance.omega {
            if !(o >= 0.0 && o.is_finite()) {
                return Err(config_err("guidance.omega", format!("must be >= 0, got {o}")));
            }
        }
        if !(self.guidance.gamma > 0.0 && self.guidance.gamma.is_finite()) {
            return Err(config_err("guidance.gamma", format!("must be > 0, got {}", self.guidance.gamma)));
        }
        let r = &self.run;
        if r.steps == 0 {
            return Err(config_err("run.steps", "must be at least 1"));
        }
        if !(r.lr > 0.0 && r.lr.is_finite()) {
            return Err(config_err("run.lr", format!("must be > 0, got {}", r.lr)));
        }
        if !(0.0 < r.t_min_frac && r.t_min_frac < r.t_max_frac && r.t_max_frac < 1.0) {
            return Err(config_err("run.t_min_frac", "need 0 < t_min_frac < t_max_frac < 1"));
        }
        if r.finetune_period == 0 {
            return Err(config_err("run.finetune_period", "must be at least 1"));
        }
        if let Some(init) = &r.init {
            if init.world_dim() != self.world_dim() {
                return Err(config_err(
                    "run.init",
                    format!("dimension {} does not match world dimension {}", init.world_dim(), self.world_dim()),
                ));
            }
            if let AssetInit::Gaussian { std, particles, .. } = init {
                if *particles == 0 || !(*std >= 0.0) {
                    return Err(config_err("run.init", "gaussian init needs particles >= 1 and std >= 0"));
                }
            }
        }
        if self.views.count == 0 {
            return Err(config_err("views.count", "must be at least 1"));
        }
        self.views()?;
        if self.prior.kind == PriorKind::Learned && self.prior.checkpoint.is_none() {
            return Err(config_err("prior.checkpoint", "required when prior.kind is `learned`"));
        }
        if self.metrics.energy && self.metrics.reference_size < 2 {
            return Err(config_err("metrics.reference_size", "must be at least 2"));
        }
        Ok(())
    }
}
