use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{check_dim, Error, Result};
use crate::prior::{Condition, NoisePredictor, TextCondition};
use crate::schedule::NoiseSchedule;

/// Architecture hyperparameters. Everything needed to rebuild the parameter
/// layout lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub dim: usize,
    /// Text labels in embedding-table order; row 0 of the table is the null text.
    pub labels: Vec<String>,
    pub total_steps: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_freqs: usize,
    pub text_dim: usize,
    pub adapter_hidden: usize,
    pub adapter_out: usize,
}

impl Arch {
    pub fn new(dim: usize, labels: Vec<String>, total_steps: usize) -> Self {
        Self {
            dim,
            labels,
            total_steps,
            hidden: 128,
            depth: 3,
            time_freqs: 8,
            text_dim: 8,
            adapter_hidden: 32,
            adapter_out: 8,
        }
    }

    pub fn trunk_input(&self) -> usize {
        self.dim + 2 * self.time_freqs + self.text_dim + self.adapter_out
    }

    /// Named tensors in storage order.
    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            specs.push(TensorSpec { name, shape, offset });
            offset += len;
        };
        let mut n_in = self.trunk_input();
        for l in 0..=self.depth {
            let n_out = if l == self.depth { self.dim } else { self.hidden };
            push(format!("trunk.{l}.weight"), vec![n_out, n_in]);
            push(format!("trunk.{l}.bias"), vec![n_out]);
            n_in = n_out;
        }
        push("text_table".into(), vec![self.labels.len() + 1, self.text_dim]);
        push("adapter.0.weight".into(), vec![self.adapter_hidden, self.dim]);
        push("adapter.0.bias".into(), vec![self.adapter_hidden]);
        push("adapter.1.weight".into(), vec![self.adapter_out, self.adapter_hidden]);
        push("adapter.1.bias".into(), vec![self.adapter_out]);
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearRef {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl LinearRef {
    fn forward(&self, p: &[f64], x: &[f64], y: &mut Vec<f64>) {
        y.clear();
        let w = &p[self.w..self.w + self.n_in * self.n_out];
        for o in 0..self.n_out {
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            let mut acc = p[self.b + o];
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y.push(acc);
        }
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx` when asked.
    fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], want_dx: bool) -> Option<Vec<f64>> {
        let mut dx = if want_dx { Some(vec![0.0; self.n_in]) } else { None };
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g[self.b + o] += d;
            let base = self.w + o * self.n_in;
            for (gw, xi) in g[base..base + self.n_in].iter_mut().zip(x) {
                *gw += d * xi;
            }
            if let Some(dx) = dx.as_mut() {
                for (dxi, w) in dx.iter_mut().zip(&p[base..base + self.n_in]) {
                    *dxi += d * w;
                }
            }
        }
        dx
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Per-sample activations kept for backprop.
#[derive(Debug, Default)]
pub(crate) struct Cache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    text_row: usize,
    image: Option<Vec<f64>>,
    adapter_pre: Vec<f64>,
    adapter_post: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

/// Which parameters a backward pass should produce gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GradScope {
    All,
    AdapterFinal,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    arch: Arch,
    layout: Vec<TensorSpec>,
    params: Vec<f64>,
    pub(crate) finetune_opt: Option<Adam>,
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl Denoiser {
    /// Fresh model with uniform fan-in initialization.
    pub fn new(arch: Arch, seed: u64) -> Self {
        let layout = arch.layout();
        let total = layout.last().map_or(0, |s| s.offset + s.len());
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &layout {
            let fan_in = if spec.name == "text_table" { 1 } else { *spec.shape.last().unwrap() };
            let bound = if spec.name.ends_with("bias") {
                0.0
            } else {
                (3.0 / fan_in as f64).sqrt()
            };
            if bound > 0.0 {
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                for p in &mut params[spec.range()] {
                    *p = dist.sample(&mut rng);
                }
            }
        }
        Self { arch, layout, params, finetune_opt: None }
    }

    pub fn from_parts(arch: Arch, params: Vec<f64>) -> Result<Self> {
        let layout = arch.layout();
        let total = layout.last().map_or(0, |s| s.offset + s.len());
        if params.len() != total {
            return Err(Error::Checkpoint(format!(
                "expected {total} parameters for this architecture, found {}",
                params.len()
            )));
        }
        Ok(Self { arch, layout, params, finetune_opt: None })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.params[s.range()])
    }

    fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.layout.iter().find(|s| s.name == name)
    }

    /// Contiguous parameter range of the adapter's final layer (weight then bias).
    pub fn adapter_final_range(&self) -> Range<usize> {
        let w = self.spec("adapter.1.weight").expect("layout has adapter.1.weight");
        let b = self.spec("adapter.1.bias").expect("layout has adapter.1.bias");
        debug_assert_eq!(w.offset + w.len(), b.offset);
        w.offset..b.offset + b.len()
    }

    fn linear(&self, name: &str) -> LinearRef {
        let w = self.spec(&format!("{name}.weight")).expect("weight in layout");
        let b = self.spec(&format!("{name}.bias")).expect("bias in layout");
        LinearRef { w: w.offset, b: b.offset, n_in: w.shape[1], n_out: w.shape[0] }
    }

    fn text_row(&self, text: &TextCondition) -> Result<usize> {
        match text {
            TextCondition::Null => Ok(0),
            TextCondition::Label(y) => self
                .arch
                .labels
                .iter()
                .position(|l| l == y)
                .map(|i| i + 1)
                .ok_or_else(|| Error::UnknownLabel(y.clone())),
            TextCondition::Negative(y) => Err(Error::UnsupportedCondition(format!(
                "negative label `{y}` has no embedding in the learned prior"
            ))),
        }
    }

    fn time_features(&self, t: usize, out: &mut Vec<f64>) {
        let s = t as f64 / self.arch.total_steps as f64;
        for k in 0..self.arch.time_freqs {
            let w = std::f64::consts::FRAC_PI_2 * 2f64.powf(k as f64 / 2.0);
            out.push((w * s).sin());
            out.push((w * s).cos());
        }
    }

    pub(crate) fn forward(&self, z_t: &[f64], t: usize, cond: &Condition) -> Result<Cache> {
        check_dim(self.arch.dim, z_t.len())?;
        let text_row = self.text_row(&cond.text)?;
        let mut cache = Cache { text_row, ..Default::default() };
        let p = &self.params;

        let mut adapter_out = vec![0.0; self.arch.adapter_out];
        if let Some(img) = &cond.image {
            check_dim(self.arch.dim, img.len())?;
            self.linear("adapter.0").forward(p, img, &mut cache.adapter_pre);
            cache.adapter_post = cache.adapter_pre.iter().map(|&x| silu(x)).collect();
            self.linear("adapter.1").forward(p, &cache.adapter_post, &mut adapter_out);
            cache.image = Some(img.clone());
        }

        let input = &mut cache.input;
        input.extend_from_slice(z_t);
        self.time_features(t, input);
        let table = self.spec("text_table").expect("layout has text_table");
        let row = table.offset + text_row * self.arch.text_dim;
        input.extend_from_slice(&p[row..row + self.arch.text_dim]);
        input.extend_from_slice(&adapter_out);

        let mut x = cache.input.clone();
        for l in 0..=self.arch.depth {
            let mut h = Vec::new();
            self.linear(&format!("trunk.{l}")).forward(p, &x, &mut h);
            if l == self.arch.depth {
                cache.output = h;
                break;
            }
            let a: Vec<f64> = h.iter().map(|&v| silu(v)).collect();
            cache.pre.push(h);
            cache.post.push(a.clone());
            x = a;
        }
        Ok(cache)
    }

    /// Backprop `d_out = dL/d(prediction)` through one cached forward pass,
    /// accumulating into `grad` (same layout as the parameters).
    pub(crate) fn backward(&self, cache: &Cache, d_out: &[f64], grad: &mut [f64], scope: GradScope) {
        let p = &self.params;
        let all = scope == GradScope::All;
        let text_start = self.arch.dim + 2 * self.arch.time_freqs;
        let adapter_start = text_start + self.arch.text_dim;

        // Trunk gradients are discarded when only the adapter's last layer
        // trains, but dL/d(input) still has to flow through the trunk.
        let mut scratch = Vec::new();
        let trunk_grad: &mut [f64] = if all {
            &mut *grad
        } else {
            scratch.resize(p.len(), 0.0);
            &mut scratch
        };
        let mut dy = d_out.to_vec();
        for l in (0..=self.arch.depth).rev() {
            let x = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let dx = self
                .linear(&format!("trunk.{l}"))
                .backward(p, trunk_grad, x, &dy, true)
                .expect("dx requested");
            dy = if l == 0 {
                dx
            } else {
                dx.iter().zip(&cache.pre[l - 1]).map(|(d, h)| d * silu_grad(*h)).collect()
            };
        }
        let d_input = dy;
        if all {
            let table = self.spec("text_table").expect("layout has text_table").offset;
            let row = table + cache.text_row * self.arch.text_dim;
            for (gi, d) in trunk_grad[row..row + self.arch.text_dim]
                .iter_mut()
                .zip(&d_input[text_start..adapter_start])
            {
                *gi += d;
            }
        }

        let Some(img) = &cache.image else {
            return;
        };
        let d_adapter = &d_input[adapter_start..];
        let d_hidden = self
            .linear("adapter.1")
            .backward(p, grad, &cache.adapter_post, d_adapter, all);
        if let Some(dh) = d_hidden {
            let dpre: Vec<f64> =
                dh.iter().zip(&cache.adapter_pre).map(|(d, h)| d * silu_grad(*h)).collect();
            self.linear("adapter.0").backward(p, grad, img, &dpre, false);
        }
    }

    /// Forward pass; deterministic.
    pub fn predict(&self, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        if t == 0 || t > self.arch.total_steps {
            return Err(Error::TimestepOutOfRange { t, total: self.arch.total_steps });
        }
        Ok(self.forward(z_t, t, cond)?.output)
    }
}

impl NoisePredictor for Denoiser {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn predict_noise(&self, z_t: &[f64], t: usize, cond: &Condition, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        sched.check_t(t)?;
        self.predict(z_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd_gradient;
    use crate::vecops::rel_err;

    fn small() -> Denoiser {
        let mut arch = Arch::new(2, vec!["a".into(), "b".into()], 100);
        arch.hidden = 12;
        arch.adapter_hidden = 6;
        Denoiser::new(arch, 7)
    }

    #[test]
    fn deterministic_and_text_sensitive() {
        let m = small();
        let z = [0.3, -0.7];
        let a = m.predict(&z, 40, &Condition::null()).unwrap();
        assert_eq!(a, m.predict(&z, 40, &Condition::null()).unwrap());
        assert_ne!(a, m.predict(&z, 40, &Condition::label("a")).unwrap());
        assert!(m.predict(&z, 40, &Condition::negative("a")).is_err());
        assert!(m.predict(&z, 40, &Condition::label("c")).is_err());
        assert!(m.predict(&z, 0, &Condition::null()).is_err());
    }

    #[test]
    fn absent_image_means_zero_adapter_output() {
        let mut m = small();
        let base = m.predict(&[0.1, 0.2], 10, &Condition::null()).unwrap();
        let r = m.adapter_final_range();
        m.params_mut()[r].iter_mut().for_each(|p| *p += 1.0);
        assert_eq!(base, m.predict(&[0.1, 0.2], 10, &Condition::null()).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = small();
        let z = [0.4, -0.2];
        let img = [1.0, 0.5];
        let cond = Condition::label("b").with_image(&img);
        let weights = [0.7, -1.3];
        let cache = m.forward(&z, 33, &cond).unwrap();
        let mut grad = vec![0.0; m.params().len()];
        m.backward(&cache, &weights, &mut grad, GradScope::All);

        let mut finetune = vec![0.0; m.params().len()];
        m.backward(&cache, &weights, &mut finetune, GradScope::AdapterFinal);

        // Spot-check a handful of coordinates in every tensor.
        for spec in m.layout() {
            let picks: Vec<usize> = spec.range().step_by((spec.len() / 3).max(1)).collect();
            let base = m.params().to_vec();
            let f = |x: &[f64]| -> Result<f64> {
                let mut mm = m.clone();
                let mut p = base.clone();
                for (k, &i) in picks.iter().enumerate() {
                    p[i] = x[k];
                }
                mm.params_mut().copy_from_slice(&p);
                let out = mm.predict(&z, 33, &cond)?;
                Ok(out.iter().zip(&weights).map(|(a, b)| a * b).sum())
            };
            let x0: Vec<f64> = picks.iter().map(|&i| base[i]).collect();
            let fd = fd_gradient(f, &x0, 1e-6).unwrap();
            let analytic: Vec<f64> = picks.iter().map(|&i| grad[i]).collect();
            assert!(rel_err(&analytic, &fd, 1e-6) < 1e-5, "{}: {analytic:?} vs {fd:?}", spec.name);
        }

        let r = m.adapter_final_range();
        for (i, g) in finetune.iter().enumerate() {
            if r.contains(&i) {
                assert_eq!(*g, grad[i]);
            } else {
                assert_eq!(*g, 0.0);
            }
        }
    }
}
