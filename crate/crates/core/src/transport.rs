//! Potentials, transport maps and OT value estimates read off a dual solution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{accumulate_grad, sq_dist, FillingPairs, KernelSpec, SampleSet};
use crate::solver::{DualProblemData, DualSolution};

/// Cost convention for reported Wasserstein values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Convention {
    /// Cost `||x - y||^2 / 2`.
    #[default]
    Half,
    /// Cost `||x - y||^2`.
    Full,
}

impl W2Convention {
    pub fn scale(self, half_cost_value: f64) -> f64 {
        match self {
            Self::Half => half_cost_value,
            Self::Full => 2.0 * half_cost_value,
        }
    }
}

impl std::str::FromStr for W2Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half" => Ok(Self::Half),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidParameter(format!(
                "unknown W2 convention '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for W2Convention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Half => "half",
            Self::Full => "full",
        })
    }
}

/// A map `R^d -> R^d` evaluated point by point.
pub trait PointMap: Sync {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Maps every point of `points`.
    fn apply_all(&self, points: &SampleSet) -> Result<SampleSet> {
        let rows: Vec<Vec<f64>> = (0..points.len())
            .into_par_iter()
            .map(|i| self.apply(points.point(i)))
            .collect::<Result<_>>()?;
        let dim = rows.first().map_or(points.dim(), Vec::len);
        SampleSet::new(dim, rows.concat())
    }
}

/// The identity map.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl PointMap for IdentityMap {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}

/// Fitted potentials `f`, `g` and their gradient maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportModel {
    pub gamma: Vec<f64>,
    pub fill: FillingPairs,
    pub mu: SampleSet,
    pub nu: SampleSet,
    pub spec_x: KernelSpec,
    pub spec_y: KernelSpec,
    pub lambda2: f64,
}

impl TransportModel {
    pub fn new(
        gamma: Vec<f64>,
        fill: FillingPairs,
        mu: SampleSet,
        nu: SampleSet,
        spec_x: KernelSpec,
        spec_y: KernelSpec,
        lambda2: f64,
    ) -> Result<Self> {
        if gamma.len() != fill.len() {
            return Err(Error::DimensionMismatch {
                expected: fill.len(),
                got: gamma.len(),
            });
        }
        if !(lambda2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda2 must be positive, got {lambda2}"
            )));
        }
        for (set, spec) in [
            (&fill.x, &spec_x),
            (&mu, &spec_x),
            (&fill.y, &spec_y),
            (&nu, &spec_y),
        ] {
            if set.dim() != spec.dim() {
                return Err(Error::DimensionMismatch {
                    expected: spec.dim(),
                    got: set.dim(),
                });
            }
        }
        if mu.is_empty() || nu.is_empty() {
            return Err(Error::EmptySamples);
        }
        Ok(Self {
            gamma,
            fill,
            mu,
            nu,
            spec_x,
            spec_y,
            lambda2,
        })
    }

    pub fn from_solution(data: &DualProblemData, solution: &DualSolution) -> Result<Self> {
        let g = &data.geometry;
        Self::new(
            solution.gamma.iter().copied().collect(),
            g.fill.clone(),
            g.mu.clone(),
            g.nu.clone(),
            g.spec_x.clone(),
            g.spec_y.clone(),
            data.hyper.lambda2,
        )
    }

    fn potential(
        &self,
        spec: &KernelSpec,
        anchors: &SampleSet,
        samples: &SampleSet,
        t: &[f64],
    ) -> Result<f64> {
        if t.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: t.len(),
            });
        }
        let expansion: f64 = anchors
            .iter()
            .zip(&self.gamma)
            .map(|(a, g)| g * spec.eval_sq_dist(sq_dist(a, t)))
            .sum();
        let embed: f64 = samples
            .iter()
            .map(|p| spec.eval_sq_dist(sq_dist(p, t)))
            .sum::<f64>()
            / samples.len() as f64;
        Ok((expansion - embed) / (2.0 * self.lambda2))
    }

    fn gradient(
        &self,
        spec: &KernelSpec,
        anchors: &SampleSet,
        samples: &SampleSet,
        t: &[f64],
    ) -> Result<Vec<f64>> {
        if t.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: t.len(),
            });
        }
        let c = 1.0 / (2.0 * self.lambda2);
        let mut out = vec![0.0; t.len()];
        for (a, g) in anchors.iter().zip(&self.gamma) {
            accumulate_grad(spec, a, t, c * g, &mut out)?;
        }
        let w = -c / samples.len() as f64;
        for p in samples.iter() {
            accumulate_grad(spec, p, t, w, &mut out)?;
        }
        Ok(out)
    }

    /// `f(x) = (sum_j gamma_j k_X(x~_j, x) - w_mu(x)) / (2 l2)`.
    pub fn potential_f(&self, x: &[f64]) -> Result<f64> {
        self.potential(&self.spec_x, &self.fill.x, &self.mu, x)
    }

    /// `g(y) = (sum_j gamma_j k_Y(y~_j, y) - w_nu(y)) / (2 l2)`.
    pub fn potential_g(&self, y: &[f64]) -> Result<f64> {
        self.potential(&self.spec_y, &self.fill.y, &self.nu, y)
    }

    /// Forward map `T1 = grad f`.
    pub fn map_t1(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.gradient(&self.spec_x, &self.fill.x, &self.mu, x)
    }

    /// Backward map `T2 = grad g`.
    pub fn map_t2(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.gradient(&self.spec_y, &self.fill.y, &self.nu, y)
    }

    pub fn forward(&self) -> ForwardMap<'_> {
        ForwardMap(self)
    }

    pub fn backward(&self) -> BackwardMap<'_> {
        BackwardMap(self)
    }

    /// `(1/n) sum f(x_i) + (1/m) sum g(y_i)`, without regularization terms.
    pub fn ot_value(&self) -> Result<f64> {
        let mean = |f: &dyn Fn(&[f64]) -> Result<f64>, s: &SampleSet| -> Result<f64> {
            let mut total = 0.0;
            for p in s.iter() {
                total += f(p)?;
            }
            Ok(total / s.len() as f64)
        };
        Ok(mean(&|x| self.potential_f(x), &self.mu)? + mean(&|y| self.potential_g(y), &self.nu)?)
    }

    /// `<||.||^2/2, mu + nu> - OT`, scaled to the requested convention.
    pub fn w2_value(&self, convention: W2Convention) -> Result<f64> {
        let half = self.mu.half_second_moment() + self.nu.half_second_moment() - self.ot_value()?;
        Ok(convention.scale(half))
    }
}

/// `x -> T1(x)`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardMap<'a>(pub &'a TransportModel);

impl PointMap for ForwardMap<'_> {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.map_t1(x)
    }
}

/// `y -> T2(y)`.
#[derive(Debug, Clone, Copy)]
pub struct BackwardMap<'a>(pub &'a TransportModel);

impl PointMap for BackwardMap<'_> {
    fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.0.map_t2(y)
    }
}
