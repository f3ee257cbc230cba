//! Low-rank Nyström features for the constraint Gram matrix.
//!
//! With `W = K[S, S]` for a uniformly sampled index set `S` of size `r` and
//! `V = K[:, S]`, the approximation is `K_nys = V W^{-1} V^T`. Writing
//! `W = G G^T` (Cholesky) the reduced features are the columns of
//! `R = G^{-1} V^T`, an `r x ell` matrix with `R^T R = K_nys`.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{jittered_cholesky, SymMatrix, DEFAULT_JITTER};

/// Default Nyström rank.
pub const DEFAULT_RANK: usize = 100;

#[derive(Debug, Clone)]
pub struct NystromFeatures {
    pub rank: usize,
    /// Selected columns of `K`, in sampling order.
    pub selected_indices: Vec<usize>,
    /// `r x ell`; column `j` is the reduced feature of filling pair `j`.
    pub features: DMatrix<f64>,
    pub jitter: f64,
}

impl NystromFeatures {
    /// `R^T R`.
    pub fn approximation(&self) -> DMatrix<f64> {
        self.features.transpose() * &self.features
    }
}

/// Nyström features from `rank` columns drawn uniformly without replacement.
pub fn nystrom_features(k: &SymMatrix, rank: usize, seed: u64) -> Result<NystromFeatures> {
    let ell = k.dim();
    if rank == 0 {
        return Err(Error::InvalidParameter(
            "Nystrom rank must be positive".into(),
        ));
    }
    if rank > ell {
        return Err(Error::RankTooLarge { rank, ell });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected: Vec<usize> = sample(&mut rng, ell, rank).into_vec();
    nystrom_from_indices(k, &selected)
}

/// Nyström features on an explicit column subset.
pub fn nystrom_from_indices(k: &SymMatrix, selected: &[usize]) -> Result<NystromFeatures> {
    let ell = k.dim();
    let rank = selected.len();
    if rank == 0 {
        return Err(Error::InvalidParameter(
            "Nystrom rank must be positive".into(),
        ));
    }
    if rank > ell {
        return Err(Error::RankTooLarge { rank, ell });
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= ell) {
        return Err(Error::InvalidParameter(format!(
            "column index {bad} out of range"
        )));
    }
    let km = k.as_matrix();
    let w = SymMatrix::from_lower_fn(rank, |a, b| km[(selected[a], selected[b])]);
    let chol = jittered_cholesky(&w, DEFAULT_JITTER).map_err(|e| match e {
        Error::Singular { .. } => Error::NystromSingular { rank },
        other => other,
    })?;
    // V^T is r x ell
    let vt = DMatrix::from_fn(rank, ell, |a, j| km[(selected[a], j)]);
    let features = chol
        .factor
        .solve_lower_triangular(&vt)
        .ok_or(Error::NystromSingular { rank })?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NystromSingular { rank });
    }
    Ok(NystromFeatures {
        rank,
        selected_indices: selected.to_vec(),
        features,
        jitter: chol.jitter,
    })
}
