//! The asset analog: a parameter vector rendered into latent space through
//! linear views with orthonormal rows, so the pullback of a latent gradient
//! is an exact transpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::vecops::{all_finite, dot};

/// A `d x d_world` render matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl View {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidArgument("render matrix rows must be non-empty and equal length".into()));
        }
        Ok(Self { rows: n, cols: m, data: rows.into_iter().flatten().collect() })
    }

    pub fn identity(d: usize) -> Self {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Self { rows: d, cols: d, data }
    }

    /// Latent dimension.
    pub fn out_dim(&self) -> usize {
        self.rows
    }

    /// Parameter dimension.
    pub fn in_dim(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Largest deviation of `A A^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..self.rows {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.row(i), self.row(j)) - target).abs());
            }
        }
        worst
    }

    /// `A theta`.
    pub fn render(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, theta.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), theta)).collect())
    }

    /// `A^T g`, the exact adjoint of [`View::render`].
    pub fn backproject_grad(&self, grad_z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, grad_z.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, g) in grad_z.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * g;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn single_identity(d: usize) -> Self {
        Self { views: vec![View::identity(d)] }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn world_dim(&self) -> usize {
        self.views[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.views[0].out_dim()
    }
}

/// Deterministic orthonormal-row views. For `d_world = d = 2` these are the
/// rotations by `2 pi k / count`; otherwise Gram-Schmidt on seeded Gaussian
/// matrices.
pub fn make_views(d_world: usize, d: usize, count: usize, seed: u64) -> Result<ViewSet> {
    if d == 0 || d > d_world {
        return Err(Error::InvalidArgument(format!(
            "latent dimension {d} must be in 1..={d_world}"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one view".into()));
    }
    if d_world == 2 && d == 2 {
        let views = (0..count)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                let (s, c) = a.sin_cos();
                View { rows: 2, cols: 2, data: vec![c, -s, s, c] }
            })
            .collect();
        return Ok(ViewSet { views });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(count);
    while views.len() < count {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        'fill: while rows.len() < d {
            let mut v: Vec<f64> = (0..d_world).map(|_| StandardNormal.sample(&mut rng)).collect();
            for r in &rows {
                let p = dot(&v, r);
                v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
            }
            let n = dot(&v, &v).sqrt();
            if n < 1e-8 {
                continue 'fill;
            }
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
        views.push(View::from_rows(rows)?);
    }
    Ok(ViewSet { views })
}

/// Preprocessing applied to a render before it becomes the image condition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Encoding {
    #[default]
    Identity,
    /// A fixed linear map standing in for derived signals such as normal maps.
    Linear { matrix: Vec<Vec<f64>> },
}

impl Encoding {
    pub fn encode(&self, render: &[f64]) -> Result<Vec<f64>> {
        match self {
            Encoding::Identity => Ok(render.to_vec()),
            Encoding::Linear { matrix } => {
                if matrix.len() != render.len() {
                    return Err(Error::DimensionMismatch { expected: render.len(), got: matrix.len() });
                }
                matrix
                    .iter()
                    .map(|row| {
                        check_dim(render.len(), row.len())?;
                        Ok(dot(row, render))
                    })
                    .collect()
            }
        }
    }
}

/// One or more parameter vectors sharing a world dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Asset {
    pub particles: Vec<Vec<f64>>,
}

impl Asset {
    pub fn single(theta: Vec<f64>) -> Self {
        Self { particles: vec![theta] }
    }

    pub fn new(particles: Vec<Vec<f64>>) -> Result<Self> {
        let d = particles
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidArgument("asset needs at least one particle".into()))?;
        for p in &particles {
            check_dim(d, p.len())?;
            if !all_finite(p) {
                return Err(Error::NonFinite("asset parameters".into()));
            }
        }
        Ok(Self { particles })
    }

    pub fn world_dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}
