//! Kernels, Gram matrices, empirical mean embeddings and the constraint
//! features on the product space `X x Y`.
//!
//! Two radial families are supported. `Gaussian` is the usual squared
//! exponential. `SobolevMatern { smoothness: s }` is a Matérn kernel whose
//! order is `s - d/2` rounded to the nearest half-integer `p + 1/2`, so its
//! RKHS is norm-equivalent to the Sobolev space `H^s(R^d)`. Half-integer
//! Matérn kernels have the closed form
//!
//! ```text
//! k(r) = exp(-u) * sum_{k=0}^{p} c_k u^k,   u = sqrt(2p + 1) r / bandwidth
//! c_k  = p! / (2p)! * (2p - k)! / ((p - k)! k!) * 2^k
//! ```
//!
//! Both families are normalized so that `k(x, x) = 1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{jittered_cholesky, SymMatrix, DEFAULT_JITTER};

/// Kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    SobolevMatern { smoothness: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KernelParams {
    #[serde(flatten)]
    family: KernelFamily,
    bandwidth: f64,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Profile {
    Gaussian {
        inv_sigma_sq: f64,
    },
    Matern {
        order: usize,
        /// `sqrt(2 nu) / bandwidth`
        scale: f64,
        /// Coefficients of the polynomial factor `P(u)`.
        poly: Vec<f64>,
        /// Coefficients of `(P'(u) - P(u)) / u`, empty when `order == 0`.
        grad_poly: Vec<f64>,
    },
}

/// A normalized radial kernel on `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelParams", into = "KernelParams")]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
    dim: usize,
    profile: Profile,
}

impl TryFrom<KernelParams> for KernelSpec {
    type Error = Error;

    fn try_from(p: KernelParams) -> Result<Self> {
        KernelSpec::new(p.family, p.bandwidth, p.dim)
    }
}

impl From<KernelSpec> for KernelParams {
    fn from(k: KernelSpec) -> Self {
        KernelParams {
            family: k.family,
            bandwidth: k.bandwidth,
            dim: k.dim,
        }
    }
}

fn horner(coeffs: &[f64], u: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * u + c)
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        let profile = match family {
            KernelFamily::Gaussian => Profile::Gaussian {
                inv_sigma_sq: 1.0 / (bandwidth * bandwidth),
            },
            KernelFamily::SobolevMatern { smoothness } => {
                let half_d = dim as f64 / 2.0;
                if !(smoothness > half_d) || !smoothness.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "Sobolev smoothness must exceed d/2 = {half_d}, got {smoothness}"
                    )));
                }
                // nearest half-integer p + 1/2 to nu, ties rounded up
                let order = (smoothness - half_d).floor() as usize;
                let nu = order as f64 + 0.5;
                let mut poly = vec![1.0];
                for k in 0..order {
                    let ratio = 2.0 * (order - k) as f64 / (((2 * order - k) * (k + 1)) as f64);
                    poly.push(poly[k] * ratio);
                }
                let grad_poly = (0..order)
                    .map(|k| {
                        let next = poly.get(k + 2).copied().unwrap_or(0.0);
                        (k + 2) as f64 * next - poly[k + 1]
                    })
                    .collect();
                Profile::Matern {
                    order,
                    scale: (2.0 * nu).sqrt() / bandwidth,
                    poly,
                    grad_poly,
                }
            }
        };
        Ok(Self {
            family,
            bandwidth,
            dim,
            profile,
        })
    }

    pub fn gaussian(bandwidth: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth, dim)
    }

    pub fn sobolev(smoothness: f64, bandwidth: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::SobolevMatern { smoothness }, bandwidth, dim)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Matérn order `nu` actually used (`None` for the Gaussian family).
    pub fn matern_nu(&self) -> Option<f64> {
        match &self.profile {
            Profile::Matern { order, .. } => Some(*order as f64 + 0.5),
            Profile::Gaussian { .. } => None,
        }
    }

    /// Same family and bandwidth on a different ambient dimension.
    pub fn with_dim(&self, dim: usize) -> Result<Self> {
        Self::new(self.family, self.bandwidth, dim)
    }

    /// Kernel value as a function of the squared distance.
    #[inline]
    pub fn eval_sq_dist(&self, r2: f64) -> f64 {
        match &self.profile {
            Profile::Gaussian { inv_sigma_sq } => (-0.5 * r2 * inv_sigma_sq).exp(),
            Profile::Matern { scale, poly, .. } => {
                let u = scale * r2.sqrt();
                horner(poly, u) * (-u).exp()
            }
        }
    }

    /// `k'(r) / r` as a function of `r^2`, so that `grad_x k(a, x) = factor * (x - a)`.
    #[inline]
    fn grad_factor(&self, r2: f64) -> Result<f64> {
        match &self.profile {
            Profile::Gaussian { inv_sigma_sq } => {
                Ok(-inv_sigma_sq * (-0.5 * r2 * inv_sigma_sq).exp())
            }
            Profile::Matern {
                order,
                scale,
                grad_poly,
                ..
            } => {
                let r = r2.sqrt();
                let u = scale * r;
                if *order == 0 {
                    if r == 0.0 {
                        return Err(Error::NotDifferentiable);
                    }
                    Ok(-scale * (-u).exp() / r)
                } else {
                    Ok(scale * scale * horner(grad_poly, u) * (-u).exp())
                }
            }
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `k(a, b)`.
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    spec.check_dim(a)?;
    spec.check_dim(b)?;
    Ok(spec.eval_sq_dist(sq_dist(a, b)))
}

/// Gradient of `x -> k(anchor, x)`.
pub fn kernel_grad(spec: &KernelSpec, anchor: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.check_dim(anchor)?;
    spec.check_dim(x)?;
    let factor = spec.grad_factor(sq_dist(anchor, x))?;
    Ok(x.iter()
        .zip(anchor)
        .map(|(xi, ai)| factor * (xi - ai))
        .collect())
}

/// Adds `weight * grad_x k(anchor, x)` into `out`.
#[inline]
pub(crate) fn accumulate_grad(
    spec: &KernelSpec,
    anchor: &[f64],
    x: &[f64],
    weight: f64,
    out: &mut [f64],
) -> Result<()> {
    let factor = weight * spec.grad_factor(sq_dist(anchor, x))?;
    for ((o, xi), ai) in out.iter_mut().zip(x).zip(anchor) {
        *o += factor * (xi - ai);
    }
    Ok(())
}

/// A set of points in `R^d` carrying the uniform empirical measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    dim: usize,
    /// Row-major coordinates, `len() * dim` entries.
    data: Vec<f64>,
}

impl SampleSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::EmptySamples);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample coordinates"));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().ok_or(Error::EmptySamples)?.len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + DoubleEndedIterator + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Concatenation of two sample sets.
    pub fn concat(&self, other: &SampleSet) -> Result<SampleSet> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        SampleSet::new(self.dim, data)
    }

    /// Average of `||x_i||^2 / 2`.
    pub fn half_second_moment(&self) -> f64 {
        self.iter().map(|p| 0.5 * dot(p, p)).sum::<f64>() / self.len() as f64
    }
}

/// Points `(x~_j, y~_j)` at which the dual constraints are enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillingPairs {
    pub x: SampleSet,
    pub y: SampleSet,
}

impl FillingPairs {
    pub fn new(x: SampleSet, y: SampleSet) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        if x.dim() != y.dim() {
            return Err(Error::DimensionMismatch {
                expected: x.dim(),
                got: y.dim(),
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

fn check_set_dim(spec: &KernelSpec, s: &SampleSet) -> Result<()> {
    if s.dim() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: s.dim(),
        });
    }
    Ok(())
}

/// `G_ij = k(a_i, b_j)`.
pub fn gram_matrix(spec: &KernelSpec, a: &SampleSet, b: &SampleSet) -> Result<DMatrix<f64>> {
    check_set_dim(spec, a)?;
    check_set_dim(spec, b)?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        spec.eval_sq_dist(sq_dist(a.point(i), b.point(j)))
    }))
}

/// Gram matrix of a set against itself, symmetric by construction.
pub fn gram_sym(spec: &KernelSpec, a: &SampleSet) -> Result<SymMatrix> {
    check_set_dim(spec, a)?;
    Ok(SymMatrix::from_lower_fn(a.len(), |i, j| {
        spec.eval_sq_dist(sq_dist(a.point(i), a.point(j)))
    }))
}

/// Empirical mean embedding `w(t) = (1/n) sum_i k(x_i, t)`.
pub fn mean_embedding_eval(spec: &KernelSpec, samples: &SampleSet, t: &[f64]) -> Result<f64> {
    check_set_dim(spec, samples)?;
    spec.check_dim(t)?;
    let sum: f64 = samples
        .iter()
        .map(|p| spec.eval_sq_dist(sq_dist(p, t)))
        .sum();
    Ok(sum / samples.len() as f64)
}

/// Gradient of the empirical mean embedding at `t`.
pub fn mean_embedding_grad(spec: &KernelSpec, samples: &SampleSet, t: &[f64]) -> Result<Vec<f64>> {
    check_set_dim(spec, samples)?;
    spec.check_dim(t)?;
    let mut out = vec![0.0; t.len()];
    let w = 1.0 / samples.len() as f64;
    for p in samples.iter() {
        accumulate_grad(spec, p, t, w, &mut out)?;
    }
    Ok(out)
}

/// Squared RKHS norm `||w||^2 = (1/n^2) 1^T K 1` of one empirical embedding.
pub fn embedding_sq_norm(spec: &KernelSpec, samples: &SampleSet) -> Result<f64> {
    check_set_dim(spec, samples)?;
    let n = samples.len();
    let mut total = 0.0;
    for i in 0..n {
        let pi = samples.point(i);
        total += 1.0;
        for j in 0..i {
            total += 2.0 * spec.eval_sq_dist(sq_dist(pi, samples.point(j)));
        }
    }
    Ok(total / (n * n) as f64)
}

/// `q^2 = ||w_mu||^2 + ||w_nu||^2`.
pub fn embedding_sq_norms(
    spec_x: &KernelSpec,
    spec_y: &KernelSpec,
    mu: &SampleSet,
    nu: &SampleSet,
) -> Result<f64> {
    Ok(embedding_sq_norm(spec_x, mu)? + embedding_sq_norm(spec_y, nu)?)
}

/// Gram matrix of the tensor-product kernel
/// `k_xy((x, y), (x', y')) = k(x, x') k(y, y')` over the filling pairs.
pub fn product_gram(spec_xy: &KernelSpec, pairs: &FillingPairs) -> Result<SymMatrix> {
    check_set_dim(spec_xy, &pairs.x)?;
    check_set_dim(spec_xy, &pairs.y)?;
    Ok(SymMatrix::from_lower_fn(pairs.len(), |i, j| {
        spec_xy.eval_sq_dist(sq_dist(pairs.x.point(i), pairs.x.point(j)))
            * spec_xy.eval_sq_dist(sq_dist(pairs.y.point(i), pairs.y.point(j)))
    }))
}

/// Constraint features `Phi` (one column per filling pair) with `Phi^T Phi = K + jitter I`.
#[derive(Debug, Clone)]
pub struct ConstraintFeatures {
    pub features: DMatrix<f64>,
    pub gram: SymMatrix,
    pub jitter: f64,
}

/// Exact constraint features from a Cholesky factor of the product-space Gram.
pub fn constraint_features(
    spec_xy: &KernelSpec,
    pairs: &FillingPairs,
) -> Result<ConstraintFeatures> {
    if pairs.is_empty() {
        return Err(Error::EmptySamples);
    }
    let gram = product_gram(spec_xy, pairs)?;
    let chol = jittered_cholesky(&gram, DEFAULT_JITTER)?;
    Ok(ConstraintFeatures {
        features: chol.factor.transpose(),
        gram,
        jitter: chol.jitter,
    })
}

/// Median of pairwise distances, a common bandwidth heuristic.
pub fn median_heuristic_bandwidth(samples: &SampleSet) -> f64 {
    let n = samples.len();
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(samples.point(i), samples.point(j)).sqrt())
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::SampleSet;

    pub fn random_set(rng: &mut impl Rng, n: usize, d: usize) -> SampleSet {
        SampleSet::new(
            d,
            (0..n * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .unwrap()
    }

    pub fn random_point(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Central finite-difference gradient.
    pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }
}
