//! Score distillation on analytically tractable diffusion priors.
//!
//! An optimizable parameter vector is rendered through linear views into a
//! small latent space, noised, and pushed by guidance computed from either a
//! closed-form Gaussian-mixture prior or a tiny trained denoiser. Guidance
//! variants cover vanilla SDS, render-anchored guidance (with an optional
//! reconstruction filter or adapter fine-tuning) and a static negative-label
//! source.

pub mod adam;
pub mod chart;
pub mod config;
pub mod error;
pub mod guidance;
pub mod io;
pub mod learned;
pub mod metrics;
pub mod optimizer;
pub mod oracle;
pub mod prior;
pub mod scene;
pub mod schedule;
pub mod sweep;
pub mod validate;
pub mod vecops;

pub use error::{Error, Result};
pub use guidance::{GuidanceConfig, GuidanceInput, GuidanceResult, Variant};
pub use prior::{Component, Condition, GmmPrior, Mixture, NoisePredictor, TextCondition};
pub use schedule::{NoiseSchedule, WeightMode};
