//! Score-distillation guidance: classifier-free guidance, the m1/m2 split of
//! the distillation residual, one-step pseudo-reconstructions, and the
//! render-anchored guidance with its reconstruction filter.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::prior::{Condition, NoisePredictor};
use crate::schedule::{NoiseSchedule, WeightMode};
use crate::vecops::{all_finite, norm_sq, sub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    VanillaSds,
    Anchords,
    AnchordsFilter,
    AnchordsFinetune,
    NegSource,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::VanillaSds,
        Variant::Anchords,
        Variant::AnchordsFilter,
        Variant::AnchordsFinetune,
        Variant::NegSource,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaSds => "vanilla-sds",
            Variant::Anchords => "anchords",
            Variant::AnchordsFilter => "anchords-filter",
            Variant::AnchordsFinetune => "anchords-finetune",
            Variant::NegSource => "neg-source",
        }
    }

    pub fn is_anchored(self) -> bool {
        matches!(self, Variant::Anchords | Variant::AnchordsFilter | Variant::AnchordsFinetune)
    }

    pub fn default_omega(self) -> f64 {
        match self {
            Variant::VanillaSds => 100.0,
            _ => 7.5,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown guidance variant `{s}`")))
    }
}

pub const DEFAULT_GAMMA: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub variant: Variant,
    /// CFG weight.
    pub omega: f64,
    /// Filter threshold on the per-dimension reconstruction loss.
    pub gamma: f64,
    /// Add the variance-reduction term `eps_uncond - eps`.
    pub include_m2: bool,
    /// Apply omega-CFG against the null condition on the target branch of
    /// the anchored variants.
    pub target_cfg: bool,
    pub weight_mode: WeightMode,
}

impl GuidanceConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            omega: variant.default_omega(),
            gamma: DEFAULT_GAMMA,
            include_m2: true,
            target_cfg: false,
            weight_mode: WeightMode::ConstantOne,
        }
    }
}

/// Everything one guidance evaluation needs besides the predictor.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceInput<'a> {
    pub z_t: &'a [f64],
    pub t: usize,
    /// The noise that produced `z_t`.
    pub eps: &'a [f64],
    pub text: &'a str,
    /// Encoded render used as the image condition.
    pub image: Option<&'a [f64]>,
    /// Clean render the reconstruction loss compares against; falls back to
    /// `image` when absent.
    pub render: Option<&'a [f64]>,
    /// Label replacing the null text on the source branch.
    pub neg_text: Option<&'a str>,
}

impl<'a> GuidanceInput<'a> {
    pub fn new(z_t: &'a [f64], t: usize, eps: &'a [f64], text: &'a str) -> Self {
        Self { z_t, t, eps, text, image: None, render: None, neg_text: None }
    }

    pub fn with_image(mut self, image: &'a [f64]) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_render(mut self, render: &'a [f64]) -> Self {
        self.render = Some(render);
        self
    }

    pub fn with_neg_text(mut self, neg: &'a str) -> Self {
        self.neg_text = Some(neg);
        self
    }

    fn reference(&self) -> Option<&'a [f64]> {
        self.render.or(self.image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidanceResult {
    pub eps_target: Vec<f64>,
    pub eps_source: Vec<f64>,
    pub eps_uncond: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub zhat_target: Vec<f64>,
    pub zhat_source: Vec<f64>,
    pub zhat_anchored: Option<Vec<f64>>,
    /// `|zhat - render|^2` of the source-branch reconstruction; zero when no
    /// render was supplied.
    pub rec_loss: f64,
    pub rec_loss_per_dim: f64,
    pub filter_mask: u8,
    /// The residual multiplied into `dz_t / dTheta`.
    pub grad_z: Vec<f64>,
}

/// `(1 + omega) eps_cond - omega eps_uncond`.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], omega: f64) -> Result<Vec<f64>> {
    check_dim(eps_cond.len(), eps_uncond.len())?;
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| (1.0 + omega) * c - omega * u)
        .collect())
}

/// `w(t) (eps_cfg - eps)`.
pub fn sds_residual(
    eps_cfg: &[f64],
    eps: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    mode: WeightMode,
) -> Result<Vec<f64>> {
    check_dim(eps_cfg.len(), eps.len())?;
    let w = sched.weight(t, mode)?;
    Ok(eps_cfg.iter().zip(eps).map(|(c, e)| w * (c - e)).collect())
}

/// Splits the CFG residual into the mode-seeking difference
/// `m1 = eps_cond - eps_uncond` and the variance-reduction term
/// `m2 = eps_uncond - eps`.
pub fn decompose(eps_cond: &[f64], eps_uncond: &[f64], eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(eps_cond.len(), eps_uncond.len())?;
    check_dim(eps_cond.len(), eps.len())?;
    Ok((sub(eps_cond, eps_uncond), sub(eps_uncond, eps)))
}

/// `coeff * m1 + m2`. With `coeff = 1 + omega` this reproduces
/// `cfg_combine(..) - eps` exactly.
pub fn recombine(m1: &[f64], m2: &[f64], coeff: f64) -> Result<Vec<f64>> {
    check_dim(m1.len(), m2.len())?;
    Ok(m1.iter().zip(m2).map(|(a, b)| coeff * a + b).collect())
}

/// One-step denoised estimate `(z_t - sqrt(1 - ab) eps_hat) / sqrt(ab)`.
pub fn pseudo_reconstruct(
    z_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(z_t.len(), eps_hat.len())?;
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::InvalidArgument(format!("alpha_bar is zero at t={t}")));
    }
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.iter().zip(eps_hat).map(|(z, e)| (z - s * e) / a).collect())
}

/// Reconstruction filter: keeps the step only when the per-dimension loss is
/// strictly below `gamma`.
pub fn filter_mask(rec_loss_per_dim: f64, gamma: f64) -> u8 {
    u8::from(rec_loss_per_dim < gamma)
}

fn check_input<P: NoisePredictor + ?Sized>(predictor: &P, input: &GuidanceInput<'_>) -> Result<()> {
    let d = predictor.dim();
    check_dim(d, input.z_t.len())?;
    check_dim(d, input.eps.len())?;
    for v in [input.image, input.render].into_iter().flatten() {
        check_dim(d, v.len())?;
    }
    if !all_finite(input.z_t) || !all_finite(input.eps) {
        return Err(Error::NonFinite("guidance input".into()));
    }
    Ok(())
}

fn rec_losses(zhat: &[f64], reference: Option<&[f64]>) -> (f64, f64) {
    match reference {
        Some(r) => {
            let l = norm_sq(&sub(zhat, r));
            (l, l / zhat.len() as f64)
        }
        None => (0.0, 0.0),
    }
}

/// Vanilla SDS: `w(t) (eps_cfg - eps)` with CFG against the null condition.
pub fn vanilla_sds_guidance<P: NoisePredictor + ?Sized>(
    predictor: &P,
    input: &GuidanceInput<'_>,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<GuidanceResult> {
    check_input(predictor, input)?;
    let (z_t, t) = (input.z_t, input.t);
    let eps_text = predictor.predict_noise(z_t, t, &Condition::label(input.text), sched)?;
    let eps_uncond = predictor.predict_noise(z_t, t, &Condition::null(), sched)?;
    let eps_target = cfg_combine(&eps_text, &eps_uncond, cfg.omega)?;
    let grad_z = sds_residual(&eps_target, input.eps, t, sched, cfg.weight_mode)?;
    let (m1, m2) = decompose(&eps_text, &eps_uncond, input.eps)?;
    let zhat_target = pseudo_reconstruct(z_t, &eps_text, t, sched)?;
    let zhat_source = pseudo_reconstruct(z_t, &eps_uncond, t, sched)?;
    let (rec_loss, rec_loss_per_dim) = rec_losses(&zhat_source, input.reference());
    Ok(GuidanceResult {
        eps_target,
        eps_source: eps_uncond.clone(),
        eps_uncond,
        m1,
        m2,
        zhat_target,
        zhat_source,
        zhat_anchored: None,
        rec_loss,
        rec_loss_per_dim,
        filter_mask: 1,
        grad_z,
    })
}

/// Shared tail of the two-branch guidances: `g = eps_target - eps_source`,
/// optional `m2`, weighting.
fn two_branch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    input: &GuidanceInput<'_>,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    source: &Condition,
) -> Result<GuidanceResult> {
    let (z_t, t) = (input.z_t, input.t);
    let eps_text = predictor.predict_noise(z_t, t, &Condition::label(input.text), sched)?;
    let eps_uncond = predictor.predict_noise(z_t, t, &Condition::null(), sched)?;
    let eps_source = predictor.predict_noise(z_t, t, source, sched)?;
    let eps_target = if cfg.target_cfg {
        cfg_combine(&eps_text, &eps_uncond, cfg.omega)?
    } else {
        eps_text.clone()
    };
    let (m1, m2) = decompose(&eps_text, &eps_uncond, input.eps)?;
    let w = sched.weight(t, cfg.weight_mode)?;
    let grad_z: Vec<f64> = eps_target
        .iter()
        .zip(&eps_source)
        .zip(&m2)
        .map(|((tg, src), m2)| w * (tg - src + if cfg.include_m2 { *m2 } else { 0.0 }))
        .collect();
    let zhat_target = pseudo_reconstruct(z_t, &eps_text, t, sched)?;
    let zhat_source = pseudo_reconstruct(z_t, &eps_source, t, sched)?;
    let (rec_loss, rec_loss_per_dim) = rec_losses(&zhat_source, input.reference());
    Ok(GuidanceResult {
        eps_target,
        eps_source,
        eps_uncond,
        m1,
        m2,
        zhat_target,
        zhat_source,
        zhat_anchored: None,
        rec_loss,
        rec_loss_per_dim,
        filter_mask: 1,
        grad_z,
    })
}

/// Render-anchored guidance: the source branch is conditioned on the current
/// render (and optionally a negative label instead of the null text).
///
/// Under `anchords-filter` the gradient is zeroed whenever the anchored
/// reconstruction misses the render by `gamma` or more per dimension. The
/// other anchored variants still report the mask but never apply it.
pub fn anchords_guidance<P: NoisePredictor + ?Sized>(
    predictor: &P,
    input: &GuidanceInput<'_>,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<GuidanceResult> {
    check_input(predictor, input)?;
    let image = input
        .image
        .ok_or_else(|| Error::InvalidArgument("anchored guidance needs an image condition".into()))?;
    let base = match input.neg_text {
        Some(neg) => Condition::label(neg),
        None => Condition::null(),
    };
    let mut out = two_branch(predictor, input, cfg, sched, &base.with_image(image))?;
    out.zhat_anchored = Some(out.zhat_source.clone());
    out.filter_mask = filter_mask(out.rec_loss_per_dim, cfg.gamma);
    if cfg.variant == Variant::AnchordsFilter && out.filter_mask == 0 {
        out.grad_z.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(out)
}

/// Static negative-label source: `eps_source = eps(z_t; t, y_neg)`.
pub fn neg_source_guidance<P: NoisePredictor + ?Sized>(
    predictor: &P,
    input: &GuidanceInput<'_>,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<GuidanceResult> {
    check_input(predictor, input)?;
    let neg = input
        .neg_text
        .ok_or_else(|| Error::InvalidArgument("neg-source guidance needs a negative label".into()))?;
    two_branch(predictor, input, cfg, sched, &Condition::label(neg))
}

/// Dispatches on `cfg.variant`.
pub fn guidance<P: NoisePredictor + ?Sized>(
    predictor: &P,
    input: &GuidanceInput<'_>,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<GuidanceResult> {
    match cfg.variant {
        Variant::VanillaSds => vanilla_sds_guidance(predictor, input, cfg, sched),
        Variant::NegSource => neg_source_guidance(predictor, input, cfg, sched),
        _ => anchords_guidance(predictor, input, cfg, sched),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{Component, GmmPrior};
    use crate::vecops::{dist, norm};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    /// Image-conditioned predictions reconstruct `image + offset`; text-only
    /// predictions return fixed vectors.
    struct Stub {
        offset: Vec<f64>,
        text: Vec<f64>,
        null: Vec<f64>,
    }

    impl NoisePredictor for Stub {
        fn dim(&self) -> usize {
            self.offset.len()
        }

        fn predict_noise(&self, z_t: &[f64], t: usize, cond: &Condition, s: &NoiseSchedule) -> Result<Vec<f64>> {
            let ab = s.alpha_bar(t)?;
            Ok(match &cond.image {
                Some(img) => z_t
                    .iter()
                    .zip(img.iter().zip(&self.offset))
                    .map(|(z, (i, o))| (z - ab.sqrt() * (i + o)) / (1.0 - ab).sqrt())
                    .collect(),
                None => match cond.text {
                    crate::prior::TextCondition::Null => self.null.clone(),
                    _ => self.text.clone(),
                },
            })
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn labeled(components: Vec<Component>, labels: &[(&str, &[usize])], rho: f64) -> GmmPrior {
        let map: BTreeMap<String, Vec<usize>> =
            labels.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
        GmmPrior::new(components, map, rho).unwrap()
    }

    fn bimodal(rho: f64) -> GmmPrior {
        labeled(
            vec![
                Component { weight: 0.5, mean: vec![2.0, 0.0], variance: 0.1 },
                Component { weight: 0.5, mean: vec![-2.0, 0.0], variance: 0.1 },
            ],
            &[("right", &[0]), ("left", &[1]), ("both", &[0, 1])],
            rho,
        )
    }

    #[test]
    fn cfg_combine_cases() {
        assert_eq!(cfg_combine(&[0.3, -1.0], &[5.0, 2.0], 0.0).unwrap(), vec![0.3, -1.0]);
        let same = cfg_combine(&[0.25, -1.5], &[0.25, -1.5], 37.0).unwrap();
        assert_eq!(same, vec![0.25, -1.5]);
        assert_eq!(cfg_combine(&[1.0], &[0.0], 100.0).unwrap(), vec![101.0]);
        assert!(cfg_combine(&[1.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn sds_residual_cases() {
        let s = NoiseSchedule::from_alpha_bars(vec![0.75]).unwrap();
        let a = [0.5, -0.25];
        let b = [0.125, 0.5];
        assert_eq!(sds_residual(&a, &a, 1, &s, WeightMode::ConstantOne).unwrap(), vec![0.0, 0.0]);
        assert_eq!(sds_residual(&a, &b, 1, &s, WeightMode::ConstantOne).unwrap(), vec![0.375, -0.75]);
        let sq = sds_residual(&a, &b, 1, &s, WeightMode::SigmaSquared).unwrap();
        assert!((sq[0] - 0.25 * 0.375).abs() < 1e-15 && (sq[1] + 0.25 * 0.75).abs() < 1e-15);
        assert!(sds_residual(&a, &[1.0], 1, &s, WeightMode::ConstantOne).is_err());
    }

    #[test]
    fn decompose_cases() {
        let (m1, m2) = decompose(&[0.4], &[0.4], &[0.4]).unwrap();
        assert_eq!((m1, m2), (vec![0.0], vec![0.0]));
        let (m1, m2) = decompose(&[2.0], &[1.0], &[0.0]).unwrap();
        assert_eq!((m1, m2), (vec![1.0], vec![1.0]));
        assert!(decompose(&[1.0], &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cfg_residual_coefficient_is_one_plus_omega() {
        let ec = [0.3, -1.2, 0.8];
        let eu = [-0.5, 0.1, 0.9];
        let e = [1.1, 0.4, -0.7];
        for omega in [0.0, 1.0, 7.5, 100.0] {
            let direct = sub(&cfg_combine(&ec, &eu, omega).unwrap(), &e);
            let (m1, m2) = decompose(&ec, &eu, &e).unwrap();
            let exact = recombine(&m1, &m2, 1.0 + omega).unwrap();
            let printed = recombine(&m1, &m2, omega - 1.0).unwrap();
            assert!(dist(&exact, &direct) < 1e-12);
            // Off by exactly 2 m1.
            assert!((dist(&printed, &direct) - 2.0 * norm(&m1)).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_reconstruct_cases() {
        let s = sched();
        let z = [0.9, -2.2];
        let eps = [0.3, 1.7];
        for t in [1, 250, 999] {
            let zt = s.add_noise(&z, t, &eps).unwrap();
            let back = pseudo_reconstruct(&zt, &eps, t, &s).unwrap();
            assert!(dist(&back, &z) < 1e-10);
            let ab = s.alpha_bar(t).unwrap();
            let plain = pseudo_reconstruct(&zt, &[0.0, 0.0], t, &s).unwrap();
            assert!((plain[0] - zt[0] / ab.sqrt()).abs() < 1e-12);
        }

        let mu = [1.25, -0.5];
        let p = labeled(vec![Component { weight: 1.0, mean: mu.to_vec(), variance: 0.0 }], &[], 0.1);
        for (t, zt) in [(40, [3.0, 1.0]), (700, [-0.2, 0.4])] {
            let e = p.predict_noise(&zt, t, &Condition::null(), &s).unwrap();
            let back = pseudo_reconstruct(&zt, &e, t, &s).unwrap();
            assert!(dist(&back, &mu) < 1e-8, "{back:?}");
        }
    }

    #[test]
    fn anchored_fixed_point_has_zero_gradient() {
        let stub = Stub { offset: vec![0.0, 0.0], text: vec![0.2, -0.1], null: vec![0.0, 0.0] };
        let s = sched();
        let z = [0.5, 0.5];
        let eps = [0.1, 0.3];
        let zt = s.add_noise(&z, 300, &eps).unwrap();
        // Make the target prediction coincide with the anchored one.
        let anchored = stub
            .predict_noise(&zt, 300, &Condition::null().with_image(&z), &s)
            .unwrap();
        let stub = Stub { text: anchored, ..stub };
        let mut cfg = GuidanceConfig::for_variant(Variant::Anchords);
        cfg.include_m2 = false;
        let input = GuidanceInput::new(&zt, 300, &eps, "y").with_image(&z);
        let r = anchords_guidance(&stub, &input, &cfg, &s).unwrap();
        assert!(norm(&r.grad_z) < 1e-12);
    }

    #[test]
    fn sharp_bandwidth_reconstructs_render() {
        let p = bimodal(1e-3);
        let s = sched();
        let cfg = GuidanceConfig::for_variant(Variant::Anchords);
        for (image, t) in [([0.3, -0.4], 200), ([1.8, 0.1], 600), ([-2.5, 1.0], 950)] {
            let eps = [0.7, -0.2];
            let zt = s.add_noise(&image, t, &eps).unwrap();
            let input = GuidanceInput::new(&zt, t, &eps, "right").with_image(&image);
            let r = anchords_guidance(&p, &input, &cfg, &s).unwrap();
            assert!(r.rec_loss < 1e-4, "rec_loss {} at t={t}", r.rec_loss);
        }
    }

    fn filter_case(per_dim: f64) -> (GuidanceResult, GuidanceResult) {
        let d = 2;
        // Offset vector whose squared norm over d dimensions is `per_dim`.
        let off = (per_dim).sqrt();
        let stub = Stub { offset: vec![off; d], text: vec![0.4, -0.3], null: vec![0.1, 0.2] };
        let s = sched();
        let z = [0.2, -0.6];
        let eps = [0.5, 0.5];
        let zt = s.add_noise(&z, 400, &eps).unwrap();
        let input = GuidanceInput::new(&zt, 400, &eps, "y").with_image(&z);
        let plain = anchords_guidance(&stub, &input, &GuidanceConfig::for_variant(Variant::Anchords), &s).unwrap();
        let filtered =
            anchords_guidance(&stub, &input, &GuidanceConfig::for_variant(Variant::AnchordsFilter), &s).unwrap();
        (plain, filtered)
    }

    #[test]
    fn filter_threshold() {
        let (plain, filtered) = filter_case(0.05);
        assert!((filtered.rec_loss_per_dim - 0.05).abs() < 1e-9);
        assert_eq!(filtered.filter_mask, 0);
        assert!(filtered.grad_z.iter().all(|g| *g == 0.0));
        assert!(norm(&plain.grad_z) > 0.0);

        let (plain, filtered) = filter_case(0.01);
        assert_eq!(filtered.filter_mask, 1);
        assert_eq!(filtered.grad_z, plain.grad_z);

        assert_eq!(filter_mask(0.03, 0.03), 0);
        assert_eq!(filter_mask(0.0299999, 0.03), 1);
    }

    #[test]
    fn anchored_reconstruction_tightens_with_bandwidth() {
        let s = sched();
        let image = [0.7, 0.9];
        let eps = [-0.4, 1.2];
        let t = 500;
        let zt = s.add_noise(&image, t, &eps).unwrap();
        let cfg = GuidanceConfig::for_variant(Variant::Anchords);
        let errs: Vec<f64> = [1.0, 0.3, 0.1, 0.03, 0.01]
            .iter()
            .map(|&rho| {
                let p = bimodal(rho);
                let input = GuidanceInput::new(&zt, t, &eps, "right").with_image(&image);
                let r = anchords_guidance(&p, &input, &cfg, &s).unwrap();
                dist(r.zhat_anchored.as_ref().unwrap(), &image)
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    }

    #[test]
    fn vanilla_zero_residual() {
        let stub = Stub { offset: vec![0.0], text: vec![0.3], null: vec![-0.8] };
        let s = sched();
        let mut cfg = GuidanceConfig::for_variant(Variant::VanillaSds);
        cfg.omega = 0.0;
        let input = GuidanceInput::new(&[0.1], 10, &[0.3], "y");
        let r = vanilla_sds_guidance(&stub, &input, &cfg, &s).unwrap();
        assert_eq!(r.grad_z, vec![0.0]);
    }

    #[test]
    fn vanilla_single_gaussian_closed_form() {
        let mu_y = [1.0, 0.5];
        let mu_n = [-1.0, 0.0];
        let (vy, vn) = (0.2, 0.6);
        // Null mixes both; label "y" selects the first.
        let p = labeled(
            vec![
                Component { weight: 0.5, mean: mu_y.to_vec(), variance: vy },
                Component { weight: 0.5, mean: mu_n.to_vec(), variance: vn },
            ],
            &[("y", &[0]), ("n", &[1])],
            0.1,
        );
        let s = sched();
        let t = 350;
        let ab: f64 = s.alpha_bar(t).unwrap();
        let sig = (1.0 - ab).sqrt();
        let zt = [0.2, -0.3];
        let eps = [0.5, -0.5];
        let omega = 4.0;
        let gauss_eps = |mu: &[f64], v: f64| -> Vec<f64> {
            (0..2).map(|i| sig * (zt[i] - ab.sqrt() * mu[i]) / (ab * v + 1.0 - ab)).collect()
        };
        // Unconditional prediction: responsibility-weighted Gaussian scores.
        let log_n = |mu: &[f64], v: f64| -> f64 {
            let s2 = ab * v + 1.0 - ab;
            let q: f64 = (0..2).map(|i| (zt[i] - ab.sqrt() * mu[i]).powi(2)).sum();
            -(2.0 * std::f64::consts::PI * s2).ln() - q / (2.0 * s2)
        };
        let (ly, ln) = (log_n(&mu_y, vy), log_n(&mu_n, vn));
        let ry = 1.0 / (1.0 + (ln - ly).exp());
        let ey = gauss_eps(&mu_y, vy);
        let en = gauss_eps(&mu_n, vn);
        let eu: Vec<f64> = (0..2).map(|i| ry * ey[i] + (1.0 - ry) * en[i]).collect();
        let expected: Vec<f64> = (0..2).map(|i| (1.0 + omega) * ey[i] - omega * eu[i] - eps[i]).collect();

        let mut cfg = GuidanceConfig::for_variant(Variant::VanillaSds);
        cfg.omega = omega;
        let input = GuidanceInput::new(&zt, t, &eps, "y");
        let r = vanilla_sds_guidance(&p, &input, &cfg, &s).unwrap();
        assert!(dist(&r.grad_z, &expected) < 1e-10, "{:?} vs {expected:?}", r.grad_z);
    }

    #[test]
    fn neg_source_degenerate_labels() {
        let p = bimodal(0.1);
        let s = sched();
        let zt = [0.4, -0.2];
        let eps = [0.1, 0.9];
        let t = 420;
        let cfg = GuidanceConfig::for_variant(Variant::NegSource);

        let input = GuidanceInput::new(&zt, t, &eps, "right").with_neg_text("both");
        let r = neg_source_guidance(&p, &input, &cfg, &s).unwrap();
        let ey = p.predict_noise(&zt, t, &Condition::label("right"), &s).unwrap();
        let eu = p.predict_noise(&zt, t, &Condition::null(), &s).unwrap();
        let expected: Vec<f64> = (0..2).map(|i| ey[i] - eu[i] + (eu[i] - eps[i])).collect();
        assert!(dist(&r.grad_z, &expected) < 1e-12);

        let mut no_m2 = cfg.clone();
        no_m2.include_m2 = false;
        let same = GuidanceInput::new(&zt, t, &eps, "right").with_neg_text("right");
        let r = neg_source_guidance(&p, &same, &no_m2, &s).unwrap();
        assert!(r.grad_z.iter().all(|g| *g == 0.0));

        let missing = GuidanceInput::new(&zt, t, &eps, "right");
        assert!(neg_source_guidance(&p, &missing, &cfg, &s).is_err());
        let bad = GuidanceInput::new(&zt, t, &eps, "right").with_neg_text("nope");
        assert!(matches!(neg_source_guidance(&p, &bad, &cfg, &s), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn anchored_requires_image_and_valid_label() {
        let p = bimodal(0.1);
        let s = sched();
        let cfg = GuidanceConfig::for_variant(Variant::Anchords);
        let input = GuidanceInput::new(&[0.0, 0.0], 10, &[0.0, 0.0], "right");
        assert!(anchords_guidance(&p, &input, &cfg, &s).is_err());
        let bad = GuidanceInput::new(&[0.0, 0.0], 10, &[0.0, 0.0], "up").with_image(&[0.0, 0.0]);
        assert!(matches!(anchords_guidance(&p, &bad, &cfg, &s), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("vsd".parse::<Variant>().is_err());
    }

    proptest! {
        #[test]
        // m1 = eta (zhat_source - zhat_target); the difference of the two
        // reconstructions is -(1/eta) m1.
        fn m1_is_scaled_reconstruction_gap(
            zt in prop::collection::vec(-4.0f64..4.0, 3),
            ec in prop::collection::vec(-3.0f64..3.0, 3),
            eu in prop::collection::vec(-3.0f64..3.0, 3),
            t in 1usize..=1000,
        ) {
            let s = sched();
            let (m1, _) = decompose(&ec, &eu, &[0.0; 3]).unwrap();
            let gap = sub(
                &pseudo_reconstruct(&zt, &eu, t, &s).unwrap(),
                &pseudo_reconstruct(&zt, &ec, t, &s).unwrap(),
            );
            let eta = s.eta(t).unwrap();
            for i in 0..3 {
                prop_assert!((m1[i] - eta * gap[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn filter_is_a_mask_on_anchored_gradient(
            img in prop::collection::vec(-3.0f64..3.0, 2),
            eps in prop::collection::vec(-2.0f64..2.0, 2),
            t in 20usize..980,
            rho in 0.01f64..1.0,
            gamma in 0.001f64..0.2,
        ) {
            let p = bimodal(rho);
            let s = sched();
            let zt = s.add_noise(&img, t, &eps).unwrap();
            let input = GuidanceInput::new(&zt, t, &eps, "right").with_image(&img);
            let mut a = GuidanceConfig::for_variant(Variant::Anchords);
            a.gamma = gamma;
            let mut f = a.clone();
            f.variant = Variant::AnchordsFilter;
            let ra = anchords_guidance(&p, &input, &a, &s).unwrap();
            let rf = anchords_guidance(&p, &input, &f, &s).unwrap();
            prop_assert_eq!(ra.filter_mask, rf.filter_mask);
            for i in 0..2 {
                prop_assert_eq!(rf.grad_z[i], f64::from(ra.filter_mask) * ra.grad_z[i]);
            }
        }
    }
}
