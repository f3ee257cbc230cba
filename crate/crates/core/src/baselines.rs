//! Gaussian ground truth, the plugin estimator and the map MSE metric.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{sq_dist, SampleSet};
use crate::numerics::{
    jittered_cholesky, pd_inv_sqrt, psd_sqrt, sym_eigenvalues, SymMatrix, DEFAULT_JITTER,
};
use crate::transport::PointMap;

/// Covariances need `lambda_min > COND_FLOOR * lambda_max`.
const COND_FLOOR: f64 = 1e-10;

/// Ridge added to sampled Wishart covariances.
pub const WISHART_RIDGE: f64 = 0.1;

/// Standard deviation of each coordinate of a randomly drawn mean.
pub const MEAN_STD: f64 = 0.5;

/// `N(mean, covariance)` with a positive definite covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianParams", into = "GaussianParams")]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    covariance: SymMatrix,
    chol: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct GaussianParams {
    pub(crate) mean: Vec<f64>,
    pub(crate) covariance: Vec<Vec<f64>>,
}

impl TryFrom<GaussianParams> for GaussianMeasure {
    type Error = Error;

    fn try_from(p: GaussianParams) -> Result<Self> {
        let d = p.mean.len();
        if p.covariance.len() != d || p.covariance.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.covariance.len(),
            });
        }
        let cov = SymMatrix::new(DMatrix::from_fn(d, d, |i, j| p.covariance[i][j]))?;
        Self::new(DVector::from_vec(p.mean), cov)
    }
}

impl From<GaussianMeasure> for GaussianParams {
    fn from(g: GaussianMeasure) -> Self {
        let d = g.dim();
        Self {
            mean: g.mean.iter().copied().collect(),
            covariance: (0..d)
                .map(|i| (0..d).map(|j| g.covariance[(i, j)]).collect())
                .collect(),
        }
    }
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, covariance: SymMatrix) -> Result<Self> {
        if covariance.dim() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: covariance.dim(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian mean"));
        }
        let w = sym_eigenvalues(&covariance);
        let (max, min) = (w[0], w[w.len() - 1]);
        if !(min > COND_FLOOR * max) {
            return Err(Error::NotPsd {
                min_eig: min,
                max_eig: max,
            });
        }
        let chol = jittered_cholesky(&covariance, DEFAULT_JITTER)?.factor;
        Ok(Self {
            mean,
            covariance,
            chol,
        })
    }

    /// Mean `N(0, MEAN_STD^2 I)` and covariance `G G^T / d + WISHART_RIDGE I`.
    pub fn random_wishart(rng: &mut impl Rng, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        let mean = DVector::from_fn(d, |_, _| MEAN_STD * rng.sample::<f64, _>(StandardNormal));
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cov = &g * g.transpose() / d as f64 + DMatrix::identity(d, d) * WISHART_RIDGE;
        Self::new(mean, SymMatrix::symmetrize(cov))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &SymMatrix {
        &self.covariance
    }

    /// `n` i.i.d. draws.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> SampleSet {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let p = &self.mean + &self.chol * xi;
            data.extend(p.iter());
        }
        SampleSet::new(d, data).expect("consistent sample buffer")
    }

    /// `E ||X||^2 / 2`.
    pub fn half_second_moment(&self) -> f64 {
        0.5 * (self.mean.norm_squared() + self.covariance.as_matrix().trace())
    }
}

/// `x -> A x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineMap {
    pub fn identity(d: usize) -> Self {
        Self {
            a: DMatrix::identity(d, d),
            b: DVector::zeros(d),
        }
    }

    /// `x -> A2 (A1 x + b1) + b2` for `other` applied after `self`.
    pub fn then(&self, other: &AffineMap) -> AffineMap {
        AffineMap {
            a: &other.a * &self.a,
            b: &other.a * &self.b + &other.b,
        }
    }
}

impl PointMap for AffineMap {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.b.len() {
            return Err(Error::DimensionMismatch {
                expected: self.b.len(),
                got: x.len(),
            });
        }
        let v = &self.a * DVector::from_column_slice(x) + &self.b;
        Ok(v.iter().copied().collect())
    }
}

fn same_dim(src: &GaussianMeasure, dst: &GaussianMeasure) -> Result<()> {
    if src.dim() != dst.dim() {
        return Err(Error::DimensionMismatch {
            expected: src.dim(),
            got: dst.dim(),
        });
    }
    Ok(())
}

/// Optimal map between Gaussians:
/// `A = S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}`, `b = m2 - A m1`.
pub fn gaussian_ot_map(src: &GaussianMeasure, dst: &GaussianMeasure) -> Result<AffineMap> {
    same_dim(src, dst)?;
    let s1_half = psd_sqrt(&src.covariance)?;
    let s1_inv_half = pd_inv_sqrt(&src.covariance, COND_FLOOR)?;
    let middle = SymMatrix::symmetrize(
        s1_half.as_matrix() * dst.covariance.as_matrix() * s1_half.as_matrix(),
    );
    let root = psd_sqrt(&middle)?;
    let a =
        SymMatrix::symmetrize(s1_inv_half.as_matrix() * root.as_matrix() * s1_inv_half.as_matrix())
            .into_inner();
    let b = &dst.mean - &a * &src.mean;
    Ok(AffineMap { a, b })
}

/// Half-cost squared Wasserstein distance between Gaussians,
/// `(||m1 - m2||^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})) / 2`.
pub fn gaussian_w2(src: &GaussianMeasure, dst: &GaussianMeasure) -> Result<f64> {
    same_dim(src, dst)?;
    let s1_half = psd_sqrt(&src.covariance)?;
    let middle = SymMatrix::symmetrize(
        s1_half.as_matrix() * dst.covariance.as_matrix() * s1_half.as_matrix(),
    );
    let root = psd_sqrt(&middle)?;
    let tr = src.covariance.as_matrix().trace() + dst.covariance.as_matrix().trace()
        - 2.0 * root.as_matrix().trace();
    Ok((0.5 * ((&src.mean - &dst.mean).norm_squared() + tr)).max(0.0))
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `assignment[row] = column`.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::NotSquare {
            rows: n,
            cols: cost.ncols(),
        });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment costs"));
    }
    // 1-based arrays; index 0 is a virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Plugin estimate `min_sigma (1/n) sum_i ||x_i - y_sigma(i)||^2 / 2`.
pub fn plugin_w2(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySamples);
    }
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "plugin estimator needs equal sample counts, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    let n = x.len();
    let cost = DMatrix::from_fn(n, n, |i, j| 0.5 * sq_dist(x.point(i), y.point(j)));
    let assignment = hungarian(&cost)?;
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[(i, j)])
        .sum();
    Ok(total / n as f64)
}

/// `(1/n) sum ||T1^(x_i) - T1(x_i)||^2 + (1/m) sum ||T2^(y_i) - T2(y_i)||^2`.
pub fn map_mse(
    t1_hat: &dyn PointMap,
    t2_hat: &dyn PointMap,
    t1: &dyn PointMap,
    t2: &dyn PointMap,
    x: &SampleSet,
    y: &SampleSet,
) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySamples);
    }
    let side = |est: &dyn PointMap, truth: &dyn PointMap, s: &SampleSet| -> Result<f64> {
        let a = est.apply_all(s)?;
        let b = truth.apply_all(s)?;
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                expected: b.dim(),
                got: a.dim(),
            });
        }
        let total: f64 = a.iter().zip(b.iter()).map(|(p, q)| sq_dist(p, q)).sum();
        Ok(total / s.len() as f64)
    };
    Ok(side(t1_hat, t1, x)? + side(t2_hat, t2, y)?)
}
