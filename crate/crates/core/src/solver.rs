//! The penalized kernel sum-of-squares dual and its accelerated solver.
//!
//! For multipliers `gamma in R^ell` the dual objective is
//!
//! ```text
//! H(gamma) = gamma^T Q gamma / (4 l2) - gamma.z / (2 l2)
//!          + ||(-S(gamma))_+||_F^2 / (2 l1) + ell ||gamma||^2 / (2 delta) + q2 / (4 l2)
//! S(gamma) = sum_j gamma_j Phi_j Phi_j^T
//! ```
//!
//! with `Q = K_X(x~, x~) + K_Y(y~, y~)`. The primal potentials and SoS matrix
//! are read back as
//!
//! ```text
//! f = (sum_j gamma_j k_X(x~_j, .) - w_mu) / (2 l2)
//! g = (sum_j gamma_j k_Y(y~_j, .) - w_nu) / (2 l2)
//! B = (-S(gamma))_+ / l1
//! ```
//!
//! and the optimal primal value equals `-min H`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    constraint_features, dot, embedding_sq_norm, gram_sym, mean_embedding_eval, product_gram,
    FillingPairs, KernelSpec, SampleSet,
};
use crate::numerics::{sym_eig, sym_eigenvalues, SymMatrix};
use crate::nystrom::nystrom_features;

/// Default constraint penalty weight.
pub const DEFAULT_DELTA: f64 = 1e3;

/// Regularization and relaxation weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Frobenius penalty on the SoS matrix.
    pub lambda1: f64,
    /// RKHS norm penalty on the potentials.
    pub lambda2: f64,
    /// Quadratic penalty weight on the constraint residuals.
    pub delta: f64,
    /// Nyström rank; `None` uses exact features, as does a rank above `ell`.
    pub rank: Option<usize>,
}

impl Hyperparameters {
    pub fn new(lambda1: f64, lambda2: f64, delta: f64, rank: Option<usize>) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("delta", delta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if rank == Some(0) {
            return Err(Error::InvalidParameter("rank must be positive".into()));
        }
        Ok(Self {
            lambda1,
            lambda2,
            delta,
            rank,
        })
    }
}

/// Which constant multiplies `x~_j . y~_j` in the linear term `z`.
///
/// `Paper` uses `z_j = x~_j.y~_j + w_mu(x~_j) + w_nu(y~_j)`. `Derived` uses
/// `z_j = 2 l2 x~_j.y~_j + w_mu(x~_j) + w_nu(y~_j)`, which is what the
/// Lagrangian of the penalized primal produces; only `Derived` closes the
/// duality gap for `l2 != 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZVariant {
    Paper,
    #[default]
    Derived,
}

impl std::str::FromStr for ZVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "derived" => Ok(Self::Derived),
            other => Err(Error::InvalidParameter(format!(
                "unknown z variant '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for ZVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Derived => "derived",
        })
    }
}

/// How the constraint features were obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    Exact { jitter: f64 },
    Nystrom { selected: Vec<usize>, jitter: f64 },
    Custom,
}

/// Everything about a dual problem that does not depend on `(l1, l2, delta)`.
///
/// Grid searches share one geometry across all cells.
#[derive(Debug, Clone)]
pub struct ProblemGeometry {
    pub spec_x: KernelSpec,
    pub spec_y: KernelSpec,
    pub spec_xy: KernelSpec,
    pub mu: SampleSet,
    pub nu: SampleSet,
    pub fill: FillingPairs,
    /// `K_X(x~, x~)`
    pub kx: SymMatrix,
    /// `K_Y(y~, y~)`
    pub ky: SymMatrix,
    pub q: SymMatrix,
    /// `w_mu(x~_j)`
    pub w_mu_fill: DVector<f64>,
    /// `w_nu(y~_j)`
    pub w_nu_fill: DVector<f64>,
    /// `x~_j . y~_j`
    pub fill_inner: DVector<f64>,
    pub embed_sq_mu: f64,
    pub embed_sq_nu: f64,
    /// `p x ell`, column `j` is `Phi_j`.
    pub features: DMatrix<f64>,
    features_t: DMatrix<f64>,
    pub source: FeatureSource,
    pub q_eig_min: f64,
    pub q_eig_max: f64,
    /// `lambda_max(K o K)` with `K = Phi^T Phi`.
    pub hadamard_eig_max: f64,
}

fn hadamard_eig_max(features: &DMatrix<f64>) -> f64 {
    let k = features.transpose() * features;
    let kk = SymMatrix::symmetrize(k.component_mul(&k));
    sym_eigenvalues(&kk).iter().copied().fold(0.0, f64::max)
}

impl ProblemGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec_x: &KernelSpec,
        spec_y: &KernelSpec,
        spec_xy: &KernelSpec,
        mu: &SampleSet,
        nu: &SampleSet,
        fill: &FillingPairs,
        rank: Option<usize>,
        nystrom_seed: u64,
    ) -> Result<Self> {
        if fill.is_empty() {
            return Err(Error::EmptySamples);
        }
        let ell = fill.len();
        let kx = gram_sym(spec_x, &fill.x)?;
        let ky = gram_sym(spec_y, &fill.y)?;
        let q = SymMatrix::symmetrize(kx.as_matrix() + ky.as_matrix());
        let w_mu_fill = DVector::from_iterator(
            ell,
            fill.x
                .iter()
                .map(|p| mean_embedding_eval(spec_x, mu, p))
                .collect::<Result<Vec<_>>>()?,
        );
        let w_nu_fill = DVector::from_iterator(
            ell,
            fill.y
                .iter()
                .map(|p| mean_embedding_eval(spec_y, nu, p))
                .collect::<Result<Vec<_>>>()?,
        );
        let fill_inner = DVector::from_iterator(
            ell,
            fill.x.iter().zip(fill.y.iter()).map(|(a, b)| dot(a, b)),
        );
        if let Some(r) = rank.filter(|&r| r > ell) {
            log::debug!("Nystrom rank {r} exceeds {ell} filling pairs; using exact features");
        }
        let (features, source) = match rank.filter(|&r| r <= ell) {
            None => {
                let cf = constraint_features(spec_xy, fill)?;
                (cf.features, FeatureSource::Exact { jitter: cf.jitter })
            }
            Some(r) => {
                let k = product_gram(spec_xy, fill)?;
                let nys = nystrom_features(&k, r, nystrom_seed)?;
                (
                    nys.features,
                    FeatureSource::Nystrom {
                        selected: nys.selected_indices,
                        jitter: nys.jitter,
                    },
                )
            }
        };
        let qw = sym_eigenvalues(&q);
        let mut geom = Self {
            spec_x: spec_x.clone(),
            spec_y: spec_y.clone(),
            spec_xy: spec_xy.clone(),
            mu: mu.clone(),
            nu: nu.clone(),
            fill: fill.clone(),
            kx,
            ky,
            q,
            w_mu_fill,
            w_nu_fill,
            fill_inner,
            embed_sq_mu: embedding_sq_norm(spec_x, mu)?,
            embed_sq_nu: embedding_sq_norm(spec_y, nu)?,
            features_t: DMatrix::zeros(0, 0),
            features: DMatrix::zeros(0, 0),
            source,
            q_eig_min: qw[ell - 1],
            q_eig_max: qw[0],
            hadamard_eig_max: 0.0,
        };
        geom.set_features(features);
        Ok(geom)
    }

    /// Replaces the constraint features (`p x ell`).
    pub fn with_features(mut self, features: DMatrix<f64>) -> Result<Self> {
        if features.ncols() != self.ell() {
            return Err(Error::DimensionMismatch {
                expected: self.ell(),
                got: features.ncols(),
            });
        }
        self.set_features(features);
        self.source = FeatureSource::Custom;
        Ok(self)
    }

    fn set_features(&mut self, features: DMatrix<f64>) {
        self.hadamard_eig_max = hadamard_eig_max(&features);
        self.features_t = features.transpose();
        self.features = features;
    }

    pub fn ell(&self) -> usize {
        self.fill.len()
    }

    /// Dimension of the SoS matrix (`ell` for exact features, `r` with Nyström).
    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    /// `S(gamma) = Phi diag(gamma) Phi^T`.
    pub fn constraint_operator(&self, gamma: &DVector<f64>) -> SymMatrix {
        let mut scaled = self.features.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= gamma[j];
        }
        let p = self.feature_dim();
        let mut s = DMatrix::zeros(p, p);
        s.gemm(1.0, &scaled, &self.features_t, 0.0);
        SymMatrix::symmetrize(s)
    }

    /// `z` for the given regularization.
    pub fn z_vector(&self, lambda2: f64, variant: ZVariant) -> DVector<f64> {
        let c = match variant {
            ZVariant::Paper => 1.0,
            ZVariant::Derived => 2.0 * lambda2,
        };
        &self.fill_inner * c + &self.w_mu_fill + &self.w_nu_fill
    }
}

/// Assembled dual problem for one hyperparameter setting.
#[derive(Debug, Clone)]
pub struct DualProblemData {
    pub geometry: Arc<ProblemGeometry>,
    pub hyper: Hyperparameters,
    pub z_variant: ZVariant,
    pub z: DVector<f64>,
    pub q_sq: f64,
    /// Drops the `ell ||gamma||^2 / (2 delta)` term, giving the dual of the
    /// hard-constrained Frobenius problem.
    pub hard_constraints: bool,
}

impl DualProblemData {
    pub fn from_geometry(
        geometry: Arc<ProblemGeometry>,
        hyper: Hyperparameters,
        z_variant: ZVariant,
    ) -> Self {
        let z = geometry.z_vector(hyper.lambda2, z_variant);
        let q_sq = geometry.embed_sq_mu + geometry.embed_sq_nu;
        Self {
            geometry,
            hyper,
            z_variant,
            z,
            q_sq,
            hard_constraints: false,
        }
    }

    pub fn ell(&self) -> usize {
        self.geometry.ell()
    }

    pub fn q(&self) -> &SymMatrix {
        &self.geometry.q
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.geometry.features
    }

    fn penalty_coef(&self) -> f64 {
        if self.hard_constraints {
            0.0
        } else {
            self.ell() as f64 / self.hyper.delta
        }
    }
}

/// Builds the dual problem from samples, filling pairs and hyperparameters.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    spec_x: &KernelSpec,
    spec_y: &KernelSpec,
    spec_xy: &KernelSpec,
    mu: &SampleSet,
    nu: &SampleSet,
    fill: &FillingPairs,
    hyper: Hyperparameters,
    z_variant: ZVariant,
    nystrom_seed: u64,
) -> Result<DualProblemData> {
    let geom = ProblemGeometry::new(
        spec_x,
        spec_y,
        spec_xy,
        mu,
        nu,
        fill,
        hyper.rank,
        nystrom_seed,
    )?;
    Ok(DualProblemData::from_geometry(
        Arc::new(geom),
        hyper,
        z_variant,
    ))
}

fn smooth_part(data: &DualProblemData, gamma: &DVector<f64>) -> (f64, DVector<f64>) {
    let l2 = data.hyper.lambda2;
    let qg = data.q().as_matrix() * gamma;
    let pen = data.penalty_coef();
    let value = gamma.dot(&qg) / (4.0 * l2) - gamma.dot(&data.z) / (2.0 * l2)
        + 0.5 * pen * gamma.norm_squared()
        + data.q_sq / (4.0 * l2);
    let grad = (qg - &data.z) / (2.0 * l2) + gamma * pen;
    (value, grad)
}

fn check_gamma(data: &DualProblemData, gamma: &DVector<f64>) -> Result<()> {
    if gamma.len() != data.ell() {
        return Err(Error::DimensionMismatch {
            expected: data.ell(),
            got: gamma.len(),
        });
    }
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dual multipliers"));
    }
    Ok(())
}

/// `H(gamma)`.
pub fn dual_objective(data: &DualProblemData, gamma: &DVector<f64>) -> Result<f64> {
    check_gamma(data, gamma)?;
    Ok(objective_unchecked(data, gamma))
}

fn objective_unchecked(data: &DualProblemData, gamma: &DVector<f64>) -> f64 {
    let (smooth, _) = smooth_part(data, gamma);
    let s = data.geometry.constraint_operator(gamma);
    let neg_sq: f64 = sym_eigenvalues(&s)
        .iter()
        .filter(|&&w| w < 0.0)
        .map(|w| w * w)
        .sum();
    smooth + neg_sq / (2.0 * data.hyper.lambda1)
}

/// `H(gamma)`, `grad H(gamma)` and the eigenpairs of `S(gamma)` with negative
/// eigenvalues, from a single eigendecomposition.
struct Evaluation {
    value: f64,
    gradient: DVector<f64>,
    neg_eigenvalues: Vec<f64>,
    neg_eigenvectors: DMatrix<f64>,
}

fn evaluate(data: &DualProblemData, gamma: &DVector<f64>) -> Evaluation {
    let geom = &data.geometry;
    let (smooth, mut grad) = smooth_part(data, gamma);
    let p = geom.feature_dim();
    let s = geom.constraint_operator(gamma);
    let eig = sym_eig(&s);
    let neg: Vec<usize> = (0..p).filter(|&k| eig.eigenvalues[k] < 0.0).collect();
    let neg_eigenvalues: Vec<f64> = neg.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut neg_eigenvectors = DMatrix::zeros(p, neg.len());
    for (dst, &k) in neg.iter().enumerate() {
        neg_eigenvectors.set_column(dst, &eig.eigenvectors.column(k));
    }
    let l1 = data.hyper.lambda1;
    let neg_sq: f64 = neg_eigenvalues.iter().map(|w| w * w).sum();
    if !neg.is_empty() {
        // Phi_j^T (-S)_+ Phi_j = sum_k |w_k| (v_k . Phi_j)^2
        let proj = neg_eigenvectors.transpose() * &geom.features;
        for j in 0..data.ell() {
            let quad: f64 = proj
                .column(j)
                .iter()
                .zip(&neg_eigenvalues)
                .map(|(c, w)| -w * c * c)
                .sum();
            grad[j] -= quad / l1;
        }
    }
    Evaluation {
        value: smooth + neg_sq / (2.0 * l1),
        gradient: grad,
        neg_eigenvalues,
        neg_eigenvectors,
    }
}

/// `grad H(gamma)`.
pub fn dual_gradient(data: &DualProblemData, gamma: &DVector<f64>) -> Result<DVector<f64>> {
    check_gamma(data, gamma)?;
    Ok(evaluate(data, gamma).gradient)
}

/// `H(gamma)` and `grad H(gamma)` together.
pub fn dual_value_and_gradient(
    data: &DualProblemData,
    gamma: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_gamma(data, gamma)?;
    let e = evaluate(data, gamma);
    Ok((e.value, e.gradient))
}

/// Strong convexity and smoothness constants of `H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityConstants {
    pub alpha: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
}

/// `alpha = ell/delta + lambda_min(Q)/(2 l2)` and
/// `L = ell/delta + lambda_max(Q)/(2 l2) + lambda_max(K o K)/l1`.
pub fn convexity_constants(data: &DualProblemData) -> ConvexityConstants {
    let geom = &data.geometry;
    let pen = data.penalty_coef();
    let l2 = data.hyper.lambda2;
    ConvexityConstants {
        alpha: pen + geom.q_eig_min.max(0.0) / (2.0 * l2),
        lipschitz: pen
            + geom.q_eig_max.max(0.0) / (2.0 * l2)
            + geom.hadamard_eig_max / data.hyper.lambda1,
    }
}

/// Stopping rule for [`solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop once `||grad H|| <= rel_tol * (1 + ||z|| / (2 l2))`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_iter: 50_000,
        }
    }
}

impl SolverOptions {
    pub fn absolute_tol(&self, data: &DualProblemData) -> f64 {
        self.rel_tol * (1.0 + data.z.norm() / (2.0 * data.hyper.lambda2))
    }
}

/// Optimal multipliers and the recovered SoS matrix.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub gamma: DVector<f64>,
    /// `(-S(gamma))_+ / l1`
    pub b: SymMatrix,
    pub objective_value: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub grad_norm: f64,
    pub tol: f64,
    pub constants: ConvexityConstants,
    pub converged: bool,
}

fn recover_b(eval: &Evaluation, lambda1: f64, p: usize) -> SymMatrix {
    if eval.neg_eigenvalues.is_empty() {
        return SymMatrix::zeros(p);
    }
    let mut scaled = eval.neg_eigenvectors.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= -eval.neg_eigenvalues[k] / lambda1;
    }
    SymMatrix::symmetrize(scaled * eval.neg_eigenvectors.transpose())
}

/// `B = (-S(gamma))_+ / l1` for arbitrary multipliers.
pub fn recover_sos_matrix(data: &DualProblemData, gamma: &DVector<f64>) -> Result<SymMatrix> {
    check_gamma(data, gamma)?;
    Ok(recover_b(
        &evaluate(data, gamma),
        data.hyper.lambda1,
        data.geometry.feature_dim(),
    ))
}

fn finish(
    data: &DualProblemData,
    eval: Evaluation,
    gamma: DVector<f64>,
    state: FinishState,
) -> DualSolution {
    let grad_norm = eval.gradient.norm();
    DualSolution {
        b: recover_b(&eval, data.hyper.lambda1, data.geometry.feature_dim()),
        objective_value: eval.value,
        gamma,
        iterations: state.iterations,
        restarts: state.restarts,
        grad_norm,
        tol: state.tol,
        constants: state.constants,
        converged: grad_norm <= state.tol,
    }
}

struct FinishState {
    iterations: usize,
    restarts: usize,
    tol: f64,
    constants: ConvexityConstants,
}

/// Accelerated gradient descent with step `1/L`, momentum
/// `(sqrt L - sqrt alpha) / (sqrt L + sqrt alpha)` and a restart whenever the
/// objective at the extrapolated point increases. Starts from `gamma = 0`.
pub fn solve(data: &DualProblemData, opts: &SolverOptions) -> Result<DualSolution> {
    solve_from(data, opts, DVector::zeros(data.ell()))
}

/// [`solve`] from a given starting point.
pub fn solve_from(
    data: &DualProblemData,
    opts: &SolverOptions,
    start: DVector<f64>,
) -> Result<DualSolution> {
    if !(opts.rel_tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive, got {}",
            opts.rel_tol
        )));
    }
    check_gamma(data, &start)?;
    let constants = convexity_constants(data);
    let tol = opts.absolute_tol(data);
    let step = 1.0 / constants.lipschitz;
    let (sa, sl) = (constants.alpha.sqrt(), constants.lipschitz.sqrt());
    let fixed_momentum = (constants.alpha > 0.0).then(|| (sl - sa) / (sl + sa));

    let mut x = start;
    let mut y = x.clone();
    let mut y_is_x = true;
    // value at the previous extrapolated point, for the restart test
    let mut h_prev = f64::INFINITY;
    // FISTA sequence, used only when no strong convexity is available
    let mut t = 1.0f64;
    let mut restarts = 0;
    let mut iter = 0;

    while iter < opts.max_iter {
        let eval = evaluate(data, &y);
        if !eval.value.is_finite() || eval.gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dual objective during solve"));
        }
        if eval.value > h_prev && !y_is_x {
            // objective went up: drop the momentum and restart from x
            restarts += 1;
            y = x.clone();
            y_is_x = true;
            t = 1.0;
            h_prev = f64::INFINITY;
            continue;
        }
        if eval.gradient.norm() <= tol {
            let state = FinishState {
                iterations: iter,
                restarts,
                tol,
                constants,
            };
            return Ok(finish(data, eval, y, state));
        }
        iter += 1;
        h_prev = eval.value;
        let x_new = &y - &eval.gradient * step;
        let beta = match fixed_momentum {
            Some(b) => b,
            None => {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let b = (t - 1.0) / t_next;
                t = t_next;
                b
            }
        };
        y = &x_new + (&x_new - &x) * beta;
        y_is_x = beta == 0.0;
        x = x_new;
    }
    let eval = evaluate(data, &x);
    let state = FinishState {
        iterations: opts.max_iter,
        restarts,
        tol,
        constants,
    };
    Ok(finish(data, eval, x, state))
}

/// Plain gradient descent with step `1/L`. Slow; used as a reference.
pub fn gradient_descent(data: &DualProblemData, max_iter: usize) -> Result<(DVector<f64>, f64)> {
    let step = 1.0 / convexity_constants(data).lipschitz;
    let mut x = DVector::zeros(data.ell());
    for _ in 0..max_iter {
        let g = evaluate(data, &x).gradient;
        let next = &x - g * step;
        if next == x {
            break;
        }
        x = next;
    }
    let h = dual_objective(data, &x)?;
    Ok((x, h))
}

/// Potentials as kernel expansions:
/// `f = sum_j f_fill_j k_X(x~_j, .) + f_embed * w_mu`, likewise for `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialCoefficients {
    pub f_fill: DVector<f64>,
    pub f_embed: f64,
    pub g_fill: DVector<f64>,
    pub g_embed: f64,
}

impl PotentialCoefficients {
    /// The primal-dual relation `f = (sum gamma_j phi(x~_j) - w_mu) / (2 l2)`.
    pub fn from_dual(data: &DualProblemData, gamma: &DVector<f64>) -> Self {
        let c = 1.0 / (2.0 * data.hyper.lambda2);
        Self {
            f_fill: gamma * c,
            f_embed: -c,
            g_fill: gamma * c,
            g_embed: -c,
        }
    }
}

/// Breakdown of the penalized primal objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimalTerms {
    /// `<f, w_mu> + <g, w_nu>`
    pub linear: f64,
    /// `l1/2 ||B||_F^2`
    pub sos_penalty: f64,
    /// `l2 (||f||^2 + ||g||^2)`
    pub norm_penalty: f64,
    /// `delta/(2 ell) sum_j r_j^2`; zero for hard constraints.
    pub constraint_penalty: f64,
    /// `max_j |r_j|`
    pub max_residual: f64,
}

impl PrimalTerms {
    pub fn total(&self) -> f64 {
        self.linear + self.sos_penalty + self.norm_penalty + self.constraint_penalty
    }
}

/// Evaluates the penalized primal objective in closed form from Gram matrices.
pub fn primal_terms(
    data: &DualProblemData,
    coeffs: &PotentialCoefficients,
    b: &SymMatrix,
) -> Result<PrimalTerms> {
    let geom = &data.geometry;
    let ell = data.ell();
    for len in [coeffs.f_fill.len(), coeffs.g_fill.len()] {
        if len != ell {
            return Err(Error::DimensionMismatch {
                expected: ell,
                got: len,
            });
        }
    }
    if b.dim() != geom.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: geom.feature_dim(),
            got: b.dim(),
        });
    }
    let side = |k: &SymMatrix, w: &DVector<f64>, norm_sq: f64, a: &DVector<f64>, c: f64| {
        let ka = k.as_matrix() * a;
        let aw = a.dot(w);
        let linear = aw + c * norm_sq;
        let rkhs_sq = a.dot(&ka) + 2.0 * c * aw + c * c * norm_sq;
        let at_fill = ka + w * c;
        (linear, rkhs_sq, at_fill)
    };
    let (lin_f, nf, f_fill) = side(
        &geom.kx,
        &geom.w_mu_fill,
        geom.embed_sq_mu,
        &coeffs.f_fill,
        coeffs.f_embed,
    );
    let (lin_g, ng, g_fill) = side(
        &geom.ky,
        &geom.w_nu_fill,
        geom.embed_sq_nu,
        &coeffs.g_fill,
        coeffs.g_embed,
    );
    // Phi_j^T B Phi_j
    let bphi = b.as_matrix() * &geom.features;
    let sos = DVector::from_iterator(
        ell,
        (0..ell).map(|j| geom.features.column(j).dot(&bphi.column(j))),
    );
    let resid = f_fill + g_fill - &geom.fill_inner - sos;
    let constraint_penalty = if data.hard_constraints {
        0.0
    } else {
        data.hyper.delta / (2.0 * ell as f64) * resid.norm_squared()
    };
    Ok(PrimalTerms {
        linear: lin_f + lin_g,
        sos_penalty: 0.5 * data.hyper.lambda1 * b.as_matrix().norm_squared(),
        norm_penalty: data.hyper.lambda2 * (nf + ng),
        constraint_penalty,
        max_residual: resid.amax(),
    })
}

/// Penalized primal objective value.
pub fn primal_value(
    data: &DualProblemData,
    coeffs: &PotentialCoefficients,
    b: &SymMatrix,
) -> Result<f64> {
    Ok(primal_terms(data, coeffs, b)?.total())
}

/// `primal(f(gamma), g(gamma), B(gamma)) - (-H(gamma))`; nonnegative by weak
/// duality and zero at the optimum.
pub fn duality_gap(data: &DualProblemData, solution: &DualSolution) -> Result<f64> {
    let coeffs = PotentialCoefficients::from_dual(data, &solution.gamma);
    Ok(primal_value(data, &coeffs, &solution.b)? + solution.objective_value)
}

/// Solver diagnostics as serialized to JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub objective: f64,
    pub gap: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub alpha: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub converged: bool,
}

impl SolverDiagnostics {
    pub fn new(data: &DualProblemData, solution: &DualSolution) -> Result<Self> {
        let gap = duality_gap(data, solution)?;
        let rel = gap.abs() / (1.0 + solution.objective_value.abs());
        if solution.converged && rel > 1e-6 && data.z_variant == ZVariant::Paper {
            log::warn!(
                "duality gap {gap:e} (relative {rel:e}) does not vanish with z_variant = paper; \
                 consider --z-variant derived"
            );
        }
        Ok(Self {
            objective: solution.objective_value,
            gap,
            iterations: solution.iterations,
            grad_norm: solution.grad_norm,
            alpha: solution.constants.alpha,
            lipschitz: solution.constants.lipschitz,
            converged: solution.converged,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use crate::kernels::kernel_eval;
    use crate::kernels::test_util::random_set;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force `H` from explicit outer products and a full eigendecomposition.
    fn brute_objective(data: &DualProblemData, gamma: &DVector<f64>) -> f64 {
        let geom = &data.geometry;
        let p = geom.feature_dim();
        let mut s = DMatrix::zeros(p, p);
        for j in 0..data.ell() {
            let phi = geom.features.column(j);
            s += phi * phi.transpose() * gamma[j];
        }
        let neg = SymMatrix::symmetrize(-s);
        let plus = crate::numerics::positive_part(&neg);
        let l1 = data.hyper.lambda1;
        let l2 = data.hyper.lambda2;
        let mut h = 0.0;
        for i in 0..data.ell() {
            for j in 0..data.ell() {
                h += gamma[i] * geom.q[(i, j)] * gamma[j] / (4.0 * l2);
            }
            h -= gamma[i] * data.z[i] / (2.0 * l2);
        }
        h + plus.as_matrix().norm_squared() / (2.0 * l1)
            + data.ell() as f64 / (2.0 * data.hyper.delta) * gamma.norm_squared()
            + data.q_sq / (4.0 * l2)
    }

    #[test]
    fn assemble_single_point_at_origin() {
        let origin = SampleSet::new(2, vec![0.0, 0.0]).unwrap();
        let fill = FillingPairs::new(origin.clone(), origin.clone()).unwrap();
        let k = KernelSpec::sobolev(4.0, 1.0, 2).unwrap();
        let hyper = Hyperparameters::new(1.0, 1.0, 1e3, None).unwrap();
        let data = assemble(
            &k,
            &k,
            &k,
            &origin,
            &origin,
            &fill,
            hyper,
            ZVariant::Paper,
            0,
        )
        .unwrap();
        assert_eq!(data.q()[(0, 0)], 2.0);
        assert_eq!(data.z[0], 2.0);
        assert_eq!(data.q_sq, 2.0);
    }

    #[test]
    fn assemble_far_points_gives_twice_identity() {
        let xs = SampleSet::new(1, vec![0.0, 10.0, 20.0]).unwrap();
        let ys = SampleSet::new(1, vec![-5.0, 15.0, 35.0]).unwrap();
        let fill = FillingPairs::new(xs.clone(), ys.clone()).unwrap();
        let k = KernelSpec::gaussian(0.01, 1).unwrap();
        let hyper = Hyperparameters::new(1.0, 1.0, 1.0, None).unwrap();
        let data = assemble(&k, &k, &k, &xs, &ys, &fill, hyper, ZVariant::Paper, 0).unwrap();
        assert!((data.q().as_matrix() - DMatrix::identity(3, 3) * 2.0).amax() < 1e-12);

        // lambda1 = lambda2 = delta = 1, ell = 3, Q = 2I, K = I
        let c = convexity_constants(&data);
        assert!((c.alpha - 4.0).abs() < 1e-12);
        assert!((c.lipschitz - 5.0).abs() < 1e-12);
    }

    #[test]
    fn assemble_matches_elementwise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mu = random_set(&mut rng, 7, 2);
        let nu = random_set(&mut rng, 6, 2);
        let fill =
            FillingPairs::new(random_set(&mut rng, 5, 2), random_set(&mut rng, 5, 2)).unwrap();
        let kx = KernelSpec::sobolev(3.0, 1.0, 2).unwrap();
        let ky = KernelSpec::gaussian(0.8, 2).unwrap();
        let hyper = Hyperparameters::new(0.1, 0.3, 100.0, None).unwrap();
        for variant in [ZVariant::Paper, ZVariant::Derived] {
            let data = assemble(&kx, &ky, &kx, &mu, &nu, &fill, hyper, variant, 0).unwrap();
            let c = if variant == ZVariant::Paper { 1.0 } else { 0.6 };
            for i in 0..5 {
                for j in 0..5 {
                    let expected = kernel_eval(&kx, fill.x.point(i), fill.x.point(j)).unwrap()
                        + kernel_eval(&ky, fill.y.point(i), fill.y.point(j)).unwrap();
                    assert!((data.q()[(i, j)] - expected).abs() < 1e-15);
                }
                let wmu: f64 = mu
                    .iter()
                    .map(|p| kernel_eval(&kx, p, fill.x.point(i)).unwrap())
                    .sum::<f64>()
                    / 7.0;
                let wnu: f64 = nu
                    .iter()
                    .map(|p| kernel_eval(&ky, p, fill.y.point(i)).unwrap())
                    .sum::<f64>()
                    / 6.0;
                let inner = dot(fill.x.point(i), fill.y.point(i));
                assert!((data.z[i] - (c * inner + wmu + wnu)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn objective_and_gradient_at_zero() {
        let data = random_instance(1, 5, 2, 0.1, 0.2, 1e3);
        let zero = DVector::zeros(5);
        let h = dual_objective(&data, &zero).unwrap();
        assert!((h - data.q_sq / (4.0 * 0.2)).abs() < 1e-14);
        let g = dual_gradient(&data, &zero).unwrap();
        assert!((g + &data.z / 0.4).amax() < 1e-13);
    }

    #[test]
    fn positive_multipliers_deactivate_psd_term() {
        let data = random_instance(2, 6, 2, 0.05, 0.2, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = DVector::from_fn(6, |_, _| rng.gen_range(0.1..2.0));
        let (smooth, grad_smooth) = smooth_part(&data, &gamma);
        assert!(
            (dual_objective(&data, &gamma).unwrap() - smooth).abs() < 1e-10 * (1.0 + smooth.abs())
        );
        let g = dual_gradient(&data, &gamma).unwrap();
        assert!((g - grad_smooth).amax() < 1e-9);
    }

    #[test]
    fn objective_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let data = random_instance(seed, 4, 2, 0.1, 0.5, 50.0);
            let gamma = random_gamma(&mut rng, 4, 2.0);
            let h = dual_objective(&data, &gamma).unwrap();
            let brute = brute_objective(&data, &gamma);
            assert!(
                (h - brute).abs() <= 1e-10 * (1.0 + brute.abs()),
                "{h} vs {brute}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            let data = random_instance(seed, 6, 2, 0.2, 0.5, 100.0);
            let gamma = random_gamma(&mut rng, 6, 1.0);
            let g = dual_gradient(&data, &gamma).unwrap();
            let h = 1e-6 * (1.0 + gamma.norm());
            let fd = DVector::from_fn(6, |i, _| {
                let mut p = gamma.clone();
                let mut m = gamma.clone();
                p[i] += h;
                m[i] -= h;
                (dual_objective(&data, &p).unwrap() - dual_objective(&data, &m).unwrap())
                    / (2.0 * h)
            });
            assert!(
                (&g - &fd).norm() <= 1e-5 * fd.norm().max(1.0),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn constants_sandwich_secants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..5 {
            let data = random_instance(seed, 8, 2, 0.05, 0.1, 1e3);
            let c = convexity_constants(&data);
            assert!(c.alpha >= data.ell() as f64 / data.hyper.delta);
            for _ in 0..50 {
                let a = random_gamma(&mut rng, 8, 3.0);
                let b = random_gamma(&mut rng, 8, 3.0);
                let d = &a - &b;
                let curv =
                    (dual_gradient(&data, &a).unwrap() - dual_gradient(&data, &b).unwrap()).dot(&d);
                let n2 = d.norm_squared();
                assert!(c.alpha * n2 <= curv + 1e-8);
                assert!(curv <= c.lipschitz * n2 + 1e-8);
            }
        }
    }

    #[test]
    fn alpha_tends_to_quadratic_part_for_large_delta() {
        let data = random_instance(6, 5, 2, 0.1, 0.3, 1e12);
        let c = convexity_constants(&data);
        let limit = data.geometry.q_eig_min.max(0.0) / 0.6;
        assert!((c.alpha - limit).abs() < 1e-10);
    }

    #[test]
    fn solve_without_features_matches_linear_solve() {
        let base = random_instance(7, 6, 2, 0.1, 0.25, 20.0);
        let geom = (*base.geometry)
            .clone()
            .with_features(DMatrix::zeros(6, 6))
            .unwrap();
        let data = DualProblemData::from_geometry(Arc::new(geom), base.hyper, ZVariant::Derived);
        let opts = SolverOptions {
            rel_tol: 1e-13,
            ..SolverOptions::default()
        };
        let sol = solve(&data, &opts).unwrap();
        assert!(sol.converged);
        let l2 = data.hyper.lambda2;
        let a =
            data.q().as_matrix() / (2.0 * l2) + DMatrix::identity(6, 6) * (6.0 / data.hyper.delta);
        let exact = a.lu().solve(&(&data.z / (2.0 * l2))).unwrap();
        assert!((&sol.gamma - &exact).amax() <= 1e-10 * (1.0 + exact.amax()));
    }

    #[test]
    fn solve_zero_linear_term_stays_at_origin() {
        let mut data = random_instance(8, 5, 2, 0.1, 0.2, 1e3);
        data.z = DVector::zeros(5);
        data.q_sq = 0.0;
        let sol = solve(&data, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.gamma, DVector::zeros(5));
        assert_eq!(sol.objective_value, 0.0);
    }

    #[test]
    fn solve_matches_long_gradient_descent() {
        let data = random_instance(9, 6, 2, 0.5, 0.5, 10.0);
        let sol = solve(&data, &SolverOptions::default()).unwrap();
        let (_, reference) = gradient_descent(&data, 200_000).unwrap();
        assert!(sol.converged);
        assert!(
            (sol.objective_value - reference).abs() <= 1e-8,
            "{} vs {}",
            sol.objective_value,
            reference
        );
    }

    #[test]
    fn primal_at_zero_matches_direct_evaluation() {
        let data = random_instance(10, 5, 2, 0.1, 0.2, 30.0);
        let coeffs = PotentialCoefficients::from_dual(&data, &DVector::zeros(5));
        let b = SymMatrix::zeros(5);
        let l2 = 0.2;
        let geom = &data.geometry;
        // f = -w_mu/(2 l2): <f, w_mu> + l2 ||f||^2 = -||w_mu||^2/(4 l2)
        let mut direct = -data.q_sq / (4.0 * l2);
        let mut pen = 0.0;
        for j in 0..5 {
            let fj = -mean_embedding_eval(&geom.spec_x, &geom.mu, geom.fill.x.point(j)).unwrap()
                / (2.0 * l2);
            let gj = -mean_embedding_eval(&geom.spec_y, &geom.nu, geom.fill.y.point(j)).unwrap()
                / (2.0 * l2);
            let r = fj + gj - dot(geom.fill.x.point(j), geom.fill.y.point(j));
            pen += r * r;
        }
        direct += 30.0 / (2.0 * 5.0) * pen;
        let p = primal_value(&data, &coeffs, &b).unwrap();
        assert!((p - direct).abs() < 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn primal_quadratic_part_identity() {
        // f = (sum gamma_j phi(x~_j) - w_mu)/(2 l2) gives
        // <f, w_mu> + l2 ||f||^2 = (gamma^T K_X gamma - ||w_mu||^2)/(4 l2)
        let data = random_instance(11, 6, 2, 0.1, 0.3, 1e3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gamma = random_gamma(&mut rng, 6, 1.0);
        let coeffs = PotentialCoefficients::from_dual(&data, &gamma);
        let t = primal_terms(&data, &coeffs, &SymMatrix::zeros(6)).unwrap();
        let quad = gamma.dot(&(data.q().as_matrix() * &gamma));
        let expected = (quad - data.q_sq) / (4.0 * 0.3);
        assert!((t.linear + t.norm_penalty - expected).abs() < 1e-10 * (1.0 + expected.abs()));
    }

    #[test]
    fn duality_gap_vanishes_with_derived_z() {
        for seed in 0..5 {
            let data = random_instance(20 + seed, 10, 2, 1e-3, 1e-3, 1e3);
            let sol = solve(&data, &SolverOptions::default()).unwrap();
            assert!(
                sol.converged,
                "seed {seed}: grad {} tol {}",
                sol.grad_norm, sol.tol
            );
            let gap = duality_gap(&data, &sol).unwrap();
            assert!(gap >= -1e-9 * (1.0 + sol.objective_value.abs()));
            assert!(gap <= 1e-6 * (1.0 + sol.objective_value.abs()), "gap {gap}");
            // gap = delta ||grad H||^2 / (2 ell) for the Lagrangian-minimizing primal point
            let predicted = data.hyper.delta * sol.grad_norm.powi(2) / (2.0 * 10.0);
            assert!((gap - predicted).abs() <= 1e-8 * (1.0 + sol.objective_value.abs()));
        }
    }

    #[test]
    fn duality_gap_is_systematic_with_paper_z() {
        let base = random_instance(30, 10, 2, 1e-3, 1e-3, 1e3);
        let data =
            DualProblemData::from_geometry(base.geometry.clone(), base.hyper, ZVariant::Paper);
        let sol = solve(&data, &SolverOptions::default()).unwrap();
        let gap = duality_gap(&data, &sol).unwrap();
        assert!(gap.abs() > 1e-3 * (1.0 + sol.objective_value.abs()));
    }

    #[test]
    fn recovered_b_is_psd_and_complementary() {
        for seed in 0..5 {
            let data = random_instance(40 + seed, 10, 2, 1e-2, 1e-2, 1e3);
            let sol = solve(&data, &SolverOptions::default()).unwrap();
            let w = sym_eigenvalues(&sol.b);
            assert!(w[w.len() - 1] >= -1e-10 * w[0].max(1.0));
            let s = data.geometry.constraint_operator(&sol.gamma);
            let comp =
                SymMatrix::symmetrize(sol.b.as_matrix() * data.hyper.lambda1 + s.as_matrix());
            let inner = sol.b.frobenius_dot(&comp);
            let bn = sol.b.frobenius_norm();
            assert!(inner.abs() <= 1e-8 * (1.0 + bn * bn), "{inner}");
        }
    }

    #[test]
    fn objective_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_instance(12, 7, 2, 0.02, 0.1, 1e3);
        for _ in 0..200 {
            let a = random_gamma(&mut rng, 7, 2.0);
            let b = random_gamma(&mut rng, 7, 2.0);
            let t: f64 = rng.gen();
            let mid = &a * t + &b * (1.0 - t);
            let lhs = dual_objective(&data, &mid).unwrap();
            let rhs = t * dual_objective(&data, &a).unwrap()
                + (1.0 - t) * dual_objective(&data, &b).unwrap();
            assert!(lhs <= rhs + 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn large_delta_approaches_hard_constraint_dual() {
        // Gaussian kernel with a short bandwidth keeps Q well conditioned, so
        // the hard-constrained dual is strongly convex through Q alone.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mu = random_set(&mut rng, 6, 2);
        let nu = random_set(&mut rng, 6, 2);
        let fill = FillingPairs::new(mu.clone(), nu.clone()).unwrap();
        let k = KernelSpec::gaussian(0.3, 2).unwrap();
        let hyper = Hyperparameters::new(0.1, 0.1, 1e9, None).unwrap();
        let soft = assemble(&k, &k, &k, &mu, &nu, &fill, hyper, ZVariant::Derived, 0).unwrap();
        let mut hard = soft.clone();
        hard.hard_constraints = true;
        let opts = SolverOptions {
            rel_tol: 1e-10,
            max_iter: 200_000,
        };
        let hs = solve(&soft, &opts).unwrap().objective_value;
        let hh = solve(&hard, &opts).unwrap().objective_value;
        assert!(
            (hs - hh).abs() <= 1e-4 * hh.abs().max(1e-12),
            "{hs} vs {hh}"
        );
    }

    #[test]
    fn diagnostics_serialize_with_expected_keys() {
        let data = random_instance(14, 5, 2, 0.1, 0.1, 1e3);
        let sol = solve(&data, &SolverOptions::default()).unwrap();
        let diag = SolverDiagnostics::new(&data, &sol).unwrap();
        let v: serde_json::Value = serde_json::to_value(diag).unwrap();
        for key in [
            "objective",
            "gap",
            "iterations",
            "grad_norm",
            "alpha",
            "L",
            "converged",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn non_convergence_is_flagged() {
        let data = random_instance(15, 8, 2, 1e-6, 1e-6, 1e3);
        let sol = solve(
            &data,
            &SolverOptions {
                rel_tol: 1e-14,
                max_iter: 3,
            },
        )
        .unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 3);
    }
}
