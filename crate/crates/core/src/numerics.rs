//! Dense symmetric linear algebra: eigendecomposition, projection onto the
//! PSD cone, PSD square roots and a Cholesky factorization with a jitter ladder.
//!
//! Every routine takes a [`SymMatrix`], so symmetry and finiteness are
//! checked once at construction instead of at every call site.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest tolerated `|M_ij - M_ji|` when validating a symmetric matrix.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues above `-PSD_REL_TOL * lambda_max` count as zero when a matrix
/// is required to be positive semidefinite.
pub const PSD_REL_TOL: f64 = 1e-8;

/// Default first rung of the Cholesky jitter ladder.
pub const DEFAULT_JITTER: f64 = 1e-12;

/// Number of doublings tried before a factorization is declared singular.
pub const JITTER_DOUBLINGS: u32 = 40;

/// A dense, finite, symmetric real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Validates `m` and wraps it.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix"));
        }
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let diff = (m[(i, j)] - m[(j, i)]).abs();
                if diff > SYMMETRY_TOL {
                    return Err(Error::NotSymmetric {
                        row: i,
                        col: j,
                        diff,
                    });
                }
            }
        }
        Ok(Self(m))
    }

    /// Builds a matrix from its lower triangle; `f(i, j)` is called for `i >= j`.
    pub fn from_lower_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self(m)
    }

    /// Replaces `m` by `(m + m^T) / 2`. Used for products that are symmetric
    /// in exact arithmetic but carry rounding asymmetry.
    pub fn symmetrize(mut m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "symmetrize needs a square matrix");
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(&self.0 * s)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Frobenius inner product `<self, other>`.
    pub fn frobenius_dot(&self, other: &SymMatrix) -> f64 {
        self.0.dot(&other.0)
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted in descending order.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors, one per column, in the order of `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    /// Returns `V diag(f(w)) V^T`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for k in 0..n {
            let fk = f(self.eigenvalues[k]);
            scaled.column_mut(k).scale_mut(fk);
        }
        SymMatrix::symmetrize(scaled * self.eigenvectors.transpose())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.spectral_map(|w| w)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
///
pub fn sym_eig(m: &SymMatrix) -> EigenDecomposition {
    let n = m.dim();
    if n == 0 {
        return EigenDecomposition {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
        };
    }
    let a = to_faer(&m.0);
    let eig = a.selfadjoint_eigendecomposition(faer::Side::Lower);
    let (s, u) = (eig.s().column_vector(), eig.u());
    // faer returns ascending order
    let eigenvalues = DVector::from_fn(n, |k, _| s.read(n - 1 - k));
    let eigenvectors = DMatrix::from_fn(n, n, |i, k| u.read(i, n - 1 - k));
    EigenDecomposition {
        eigenvalues,
        eigenvectors,
    }
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    static SERIAL: std::sync::Once = std::sync::Once::new();
    SERIAL.call_once(|| faer::set_global_parallelism(faer::Parallelism::None));
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenvalues only, sorted descending.
pub fn sym_eigenvalues(m: &SymMatrix) -> DVector<f64> {
    if m.dim() == 0 {
        return DVector::zeros(0);
    }
    let mut w = to_faer(&m.0).selfadjoint_eigenvalues(faer::Side::Lower);
    w.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(w)
}

/// Frobenius projection of `m` onto the PSD cone (eigenvalue clipping).
pub fn positive_part(m: &SymMatrix) -> SymMatrix {
    sym_eig(m).spectral_map(|w| w.max(0.0))
}

fn check_psd(eig: &EigenDecomposition) -> Result<()> {
    let max = eig.max_eigenvalue();
    let min = eig.min_eigenvalue();
    let scale = max.abs().max(min.abs());
    if min < -PSD_REL_TOL * scale {
        return Err(Error::NotPsd {
            min_eig: min,
            max_eig: max,
        });
    }
    Ok(())
}

/// Symmetric PSD square root; small negative eigenvalues are clamped to zero.
pub fn psd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(m);
    check_psd(&eig)?;
    Ok(eig.spectral_map(|w| w.max(0.0).sqrt()))
}

/// Inverse square root of a positive definite matrix.
pub fn pd_inv_sqrt(m: &SymMatrix, rel_floor: f64) -> Result<SymMatrix> {
    let eig = sym_eig(m);
    let max = eig.max_eigenvalue();
    let min = eig.min_eigenvalue();
    if !(max > 0.0) || min <= rel_floor * max {
        return Err(Error::NotPsd {
            min_eig: min,
            max_eig: max,
        });
    }
    Ok(eig.spectral_map(|w| 1.0 / w.sqrt()))
}

/// Lower-triangular factor `L` with `L L^T = M + jitter * I`.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: DMatrix<f64>,
    pub jitter: f64,
}

/// Cholesky factorization that retries with `jitter_start * 2^k` added to the
/// diagonal (`k = 0..=40`) until the factorization succeeds.
pub fn jittered_cholesky(m: &SymMatrix, jitter_start: f64) -> Result<JitteredCholesky> {
    if !(jitter_start > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "jitter_start must be positive, got {jitter_start}"
        )));
    }
    if let Some(chol) = m.0.clone().cholesky() {
        return Ok(JitteredCholesky {
            factor: chol.unpack(),
            jitter: 0.0,
        });
    }
    let n = m.dim();
    let mut jitter = jitter_start;
    for _ in 0..=JITTER_DOUBLINGS {
        let mut shifted = m.0.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = shifted.cholesky() {
            return Ok(JitteredCholesky {
                factor: chol.unpack(),
                jitter,
            });
        }
        jitter *= 2.0;
    }
    Err(Error::Singular {
        jitter: jitter / 2.0,
    })
}

#[cfg(test)]
pub(crate) mod test_util {
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::SymMatrix;

    pub fn random_symmetric(rng: &mut impl Rng, n: usize) -> SymMatrix {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        SymMatrix::symmetrize(&a + a.transpose())
    }

    pub fn random_wishart(rng: &mut impl Rng, n: usize) -> SymMatrix {
        let g = DMatrix::from_fn(n, n + 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        SymMatrix::symmetrize(&g * g.transpose())
    }

    pub fn random_orthogonal(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        a.qr().q()
    }

    pub fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }
}
