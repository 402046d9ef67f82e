//! Brute-force validators. Nothing here calls the closed-form mixture code
//! it checks: conditioning is rederived by treating `(z, z_t, image)` as a
//! jointly Gaussian triple per component, and scores come from central
//! differences of a directly summed density.

use std::f64::consts::PI;

use crate::error::{check_dim, Error, Result};
use crate::prior::{Condition, GmmPrior, TextCondition};
use crate::schedule::NoiseSchedule;

/// Component indices for a text condition, resolved straight from the text map.
fn selected(prior: &GmmPrior, text: &TextCondition) -> Result<Vec<usize>> {
    let n = prior.components().len();
    let lookup = |y: &String| {
        prior
            .text_map()
            .get(y)
            .ok_or_else(|| Error::UnknownLabel(y.clone()))
    };
    match text {
        TextCondition::Null => Ok((0..n).collect()),
        TextCondition::Label(y) => {
            let inside = lookup(y)?;
            Ok((0..n).filter(|i| inside.contains(i)).collect())
        }
        TextCondition::Negative(y) => {
            let inside = lookup(y)?;
            let rest: Vec<usize> = (0..n).filter(|i| !inside.contains(i)).collect();
            if rest.is_empty() {
                Err(Error::EmptyComplement(y.clone()))
            } else {
                Ok(rest)
            }
        }
    }
}

/// Per-component observation model: for every coordinate, the observed
/// vector is `z_t = sqrt(ab) z + sigma n1` and optionally `image = z + rho n2`
/// with `z ~ N(mu, v)`.
struct JointTerm {
    log_weight: f64,
    /// Posterior mean of the clean latent under this component.
    post_mean: Vec<f64>,
}

fn joint_terms(
    prior: &GmmPrior,
    z_t: &[f64],
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
) -> Result<Vec<JointTerm>> {
    check_dim(prior.dim(), z_t.len())?;
    let ab = sched.alpha_bar(t)?;
    let a = ab.sqrt();
    let s2 = 1.0 - ab;
    let rho2 = prior.image_bandwidth().powi(2);
    if let Some(img) = &cond.image {
        check_dim(prior.dim(), img.len())?;
    }
    let mut out = Vec::new();
    for k in selected(prior, &cond.text)? {
        let c = &prior.components()[k];
        let v = c.variance;
        let mut log_weight = c.weight.ln();
        let mut post_mean = Vec::with_capacity(z_t.len());
        match &cond.image {
            None => {
                let var = ab * v + s2;
                for (zi, mi) in z_t.iter().zip(&c.mean) {
                    let r = zi - a * mi;
                    log_weight += -0.5 * (2.0 * PI * var).ln() - r * r / (2.0 * var);
                    post_mean.push(mi + a * v / var * r);
                }
            }
            Some(img) => {
                // Covariance of (z_t_i, image_i) and its cross-covariance with z_i.
                let c11 = ab * v + s2;
                let c12 = a * v;
                let c22 = v + rho2;
                let det = c11 * c22 - c12 * c12;
                let (i11, i12, i22) = (c22 / det, -c12 / det, c11 / det);
                for ((zi, ii), mi) in z_t.iter().zip(img).zip(&c.mean) {
                    let r1 = zi - a * mi;
                    let r2 = ii - mi;
                    let quad = r1 * r1 * i11 + 2.0 * r1 * r2 * i12 + r2 * r2 * i22;
                    log_weight += -0.5 * ((2.0 * PI).powi(2) * det).ln() - 0.5 * quad;
                    // cov(z, obs) = (a v, v); gain = cov * C^-1.
                    let g1 = a * v * i11 + v * i12;
                    let g2 = a * v * i12 + v * i22;
                    post_mean.push(mi + g1 * r1 + g2 * r2);
                }
            }
        }
        out.push(JointTerm { log_weight, post_mean });
    }
    Ok(out)
}

/// Log of the (unnormalized in the image case) density of `z_t`, by summing
/// component densities directly after a common rescaling.
fn log_density(
    prior: &GmmPrior,
    z_t: &[f64],
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let terms = joint_terms(prior, z_t, t, cond, sched)?;
    let shift = terms
        .iter()
        .map(|j| j.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::DensityUnderflow(format!(
            "every component density vanishes at z_t = {z_t:?}"
        )));
    }
    let total: f64 = terms.iter().map(|j| (j.log_weight - shift).exp()).sum();
    Ok(shift + total.ln())
}

/// `-sigma_t` times the central-difference gradient of the log density of the
/// noised, conditioned mixture.
pub fn numeric_score(
    prior: &GmmPrior,
    z_t: &[f64],
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {h}")));
    }
    let sigma = sched.sigma(t)?;
    let grad = fd_gradient(|z| log_density(prior, z, t, cond, sched), z_t, h)?;
    Ok(grad.into_iter().map(|g| -sigma * g).collect())
}

/// Central differences of `f` at `theta`. The evaluator must be
/// deterministic: any randomness it uses has to be drawn once, up front.
pub fn fd_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {h}")));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let up = f(&x)?;
        x[i] = theta[i] - h;
        let down = f(&x)?;
        x[i] = theta[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("evaluation at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `E[z | z_t, c]` by exact component-wise Gaussian posterior mixing.
pub fn posterior_mean(
    prior: &GmmPrior,
    z_t: &[f64],
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let terms = joint_terms(prior, z_t, t, cond, sched)?;
    let shift = terms
        .iter()
        .map(|j| j.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::DensityUnderflow(format!("posterior weights at z_t = {z_t:?}")));
    }
    let weights: Vec<f64> = terms.iter().map(|j| (j.log_weight - shift).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut mean = vec![0.0; z_t.len()];
    for (w, j) in weights.iter().zip(&terms) {
        for (m, p) in mean.iter_mut().zip(&j.post_mean) {
            *m += w / total * p;
        }
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{Component, NoisePredictor};
    use crate::vecops::rel_err;
    use std::collections::BTreeMap;

    fn point_mass(mu: &[f64]) -> GmmPrior {
        GmmPrior::new(
            vec![Component { weight: 1.0, mean: mu.to_vec(), variance: 0.0 }],
            BTreeMap::new(),
            0.1,
        )
        .unwrap()
    }

    fn trimodal() -> GmmPrior {
        let mut map = BTreeMap::new();
        map.insert("x".to_string(), vec![0, 2]);
        GmmPrior::new(
            vec![
                Component { weight: 0.2, mean: vec![1.0, 0.5], variance: 0.3 },
                Component { weight: 0.5, mean: vec![-1.0, 1.0], variance: 0.05 },
                Component { weight: 0.3, mean: vec![0.0, -1.5], variance: 0.0 },
            ],
            map,
            0.2,
        )
        .unwrap()
    }

    #[test]
    fn point_mass_score_closed_form() {
        let mu = [0.4, -1.0];
        let p = point_mass(&mu);
        let s = NoiseSchedule::default();
        let zt = [0.9, 0.3];
        let t = 250;
        let ab = s.alpha_bar(t).unwrap();
        let got = numeric_score(&p, &zt, t, &Condition::null(), &s, 1e-5).unwrap();
        for i in 0..2 {
            let expected = (zt[i] - ab.sqrt() * mu[i]) / (1.0 - ab).sqrt();
            assert!((got[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn numeric_score_matches_closed_form() {
        let p = trimodal();
        let s = NoiseSchedule::default();
        for (t, cond) in [
            (100, Condition::null()),
            (600, Condition::label("x")),
            (300, Condition::negative("x")),
            (450, Condition::label("x").with_image(&[0.5, 0.0])),
        ] {
            let zt = [0.3, -0.2];
            let a = numeric_score(&p, &zt, t, &cond, &s, 1e-5).unwrap();
            let b = p.predict_noise(&zt, t, &cond, &s).unwrap();
            assert!(rel_err(&a, &b, 1e-6) < 1e-5, "t={t} {a:?} vs {b:?}");
        }
    }

    #[test]
    fn second_order_convergence() {
        let p = trimodal();
        let s = NoiseSchedule::default();
        let zt = [0.2, 0.1];
        let exact = p.predict_noise(&zt, 200, &Condition::null(), &s).unwrap();
        let e1 = crate::vecops::dist(&numeric_score(&p, &zt, 200, &Condition::null(), &s, 0.04).unwrap(), &exact);
        let e2 = crate::vecops::dist(&numeric_score(&p, &zt, 200, &Condition::null(), &s, 0.02).unwrap(), &exact);
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn extreme_query_underflows() {
        let p = trimodal();
        let s = NoiseSchedule::default();
        let err = numeric_score(&p, &[1e200, 0.0], 10, &Condition::null(), &s, 1e-5).unwrap_err();
        assert!(matches!(err, Error::DensityUnderflow(_)));
    }

    #[test]
    fn fd_gradient_cases() {
        let a = [1.0, -2.0, 0.5];
        let theta = [0.3, 0.7, -1.1];
        let g = fd_gradient(
            |x| Ok(0.5 * x.iter().zip(&a).map(|(x, a)| (x - a) * (x - a)).sum::<f64>()),
            &theta,
            1e-4,
        )
        .unwrap();
        for i in 0..3 {
            assert!((g[i] - (theta[i] - a[i])).abs() < 1e-8);
        }
        assert!(fd_gradient(|_| Ok(0.0), &theta, 0.0).is_err());
        assert!(fd_gradient(|_| Ok(f64::NAN), &theta, 1e-3).is_err());
    }

    #[test]
    fn posterior_mean_limits() {
        let mu = [2.0, -1.0];
        let p = point_mass(&mu);
        let s = NoiseSchedule::default();
        for zt in [[0.0, 0.0], [5.0, -3.0]] {
            let m = posterior_mean(&p, &zt, 400, &Condition::null(), &s).unwrap();
            assert!((m[0] - 2.0).abs() < 1e-12 && (m[1] + 1.0).abs() < 1e-12);
        }

        let near = NoiseSchedule::from_alpha_bars(vec![1.0 - 1e-9]).unwrap();
        let q = trimodal();
        let zt = [0.9, 0.6];
        let m = posterior_mean(&q, &zt, 1, &Condition::label("x"), &near).unwrap();
        assert!(crate::vecops::dist(&m, &zt) < 1e-4, "{m:?}");
    }
}
