//! MMD-based hyperparameter selection.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{sq_dist, FillingPairs, KernelSpec, SampleSet};
use crate::nystrom::DEFAULT_RANK;
use crate::solver::{
    solve, DualProblemData, Hyperparameters, ProblemGeometry, SolverDiagnostics, SolverOptions,
    ZVariant, DEFAULT_DELTA,
};
use crate::transport::{PointMap, TransportModel, W2Convention};

/// Regularization values searched by default on both axes.
pub const DEFAULT_GRID: [f64; 6] = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

fn block_sum(spec: &KernelSpec, a: &SampleSet, b: &SampleSet) -> f64 {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| spec.eval_sq_dist(sq_dist(p, q)))
                .sum::<f64>()
        })
        .sum()
}

fn self_sum(spec: &KernelSpec, a: &SampleSet) -> f64 {
    let n = a.len();
    let mut total = n as f64 * spec.eval_sq_dist(0.0);
    for i in 0..n {
        let pi = a.point(i);
        for j in 0..i {
            total += 2.0 * spec.eval_sq_dist(sq_dist(pi, a.point(j)));
        }
    }
    total
}

/// Squared MMD V-statistic between the empirical measures on `a` and `b`.
pub fn mmd_sq(spec: &KernelSpec, a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySamples);
    }
    for s in [a, b] {
        if s.dim() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: s.dim(),
            });
        }
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    Ok(
        self_sum(spec, a) / (n * n) - 2.0 * block_sum(spec, a, b) / (n * m)
            + self_sum(spec, b) / (m * m),
    )
}

/// `MMD^2(T1 # mu, nu) + MMD^2(T2 # nu, mu)`.
pub fn selection_criterion(model: &TransportModel, spec: &KernelSpec) -> Result<f64> {
    map_criterion(
        &model.forward(),
        &model.backward(),
        &model.mu,
        &model.nu,
        spec,
    )
}

/// The selection criterion for arbitrary maps.
pub fn map_criterion(
    t1: &dyn PointMap,
    t2: &dyn PointMap,
    mu: &SampleSet,
    nu: &SampleSet,
    spec: &KernelSpec,
) -> Result<f64> {
    let pushed_mu = t1.apply_all(mu)?;
    let pushed_nu = t2.apply_all(nu)?;
    Ok(mmd_sq(spec, &pushed_mu, nu)? + mmd_sq(spec, &pushed_nu, mu)?)
}

/// Hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    pub delta: f64,
    pub rank: Option<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lambda1_values: DEFAULT_GRID.to_vec(),
            lambda2_values: DEFAULT_GRID.to_vec(),
            delta: DEFAULT_DELTA,
            rank: Some(DEFAULT_RANK),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, values) in [
            ("lambda1", &self.lambda1_values),
            ("lambda2", &self.lambda2_values),
        ] {
            if values.is_empty() {
                return Err(Error::InvalidParameter(format!("{name} grid is empty")));
            }
            if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} grid value {v} is not positive"
                )));
            }
        }
        Hyperparameters::new(1.0, 1.0, self.delta, self.rank)?;
        Ok(())
    }

    /// Cells in row-major order over `(lambda1, lambda2)`.
    pub fn cells(&self) -> Vec<Hyperparameters> {
        self.lambda1_values
            .iter()
            .flat_map(|&l1| {
                self.lambda2_values.iter().map(move |&l2| Hyperparameters {
                    lambda1: l1,
                    lambda2: l2,
                    delta: self.delta,
                    rank: self.rank,
                })
            })
            .collect()
    }
}

/// Per-cell settings shared by the whole search.
#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub z_variant: ZVariant,
    pub solver: SolverOptions,
    pub nystrom_seed: u64,
    /// Kernel for the MMD criterion; defaults to the `Y`-side potential kernel.
    pub selection_kernel: Option<KernelSpec>,
    pub w2_convention: W2Convention,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            z_variant: ZVariant::default(),
            solver: SolverOptions::default(),
            nystrom_seed: 0,
            selection_kernel: None,
            w2_convention: W2Convention::Half,
        }
    }
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Solved {
        mmd_criterion: f64,
        ot_value: f64,
        w2_value: f64,
        diagnostics: SolverDiagnostics,
    },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub lambda1: f64,
    pub lambda2: f64,
    pub outcome: CellOutcome,
}

impl CellRecord {
    pub fn criterion(&self) -> Option<f64> {
        match &self.outcome {
            CellOutcome::Solved { mmd_criterion, .. } => Some(*mmd_criterion),
            CellOutcome::Failed(_) => None,
        }
    }
}

/// All cells of a search and the selected one.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub cells: Vec<CellRecord>,
    pub best_cell: usize,
    pub best_model: TransportModel,
}

#[derive(Serialize)]
struct CsvRow {
    lambda1: f64,
    lambda2: f64,
    mmd_criterion: Option<f64>,
    ot_value: Option<f64>,
    w2_value: Option<f64>,
    iterations: Option<usize>,
    converged: bool,
}

impl SelectionReport {
    pub fn best(&self) -> &CellRecord {
        &self.cells[self.best_cell]
    }

    /// CSV with one row per cell in grid order.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        for c in &self.cells {
            let row = match &c.outcome {
                CellOutcome::Solved {
                    mmd_criterion,
                    ot_value,
                    w2_value,
                    diagnostics,
                } => CsvRow {
                    lambda1: c.lambda1,
                    lambda2: c.lambda2,
                    mmd_criterion: Some(*mmd_criterion),
                    ot_value: Some(*ot_value),
                    w2_value: Some(*w2_value),
                    iterations: Some(diagnostics.iterations),
                    converged: diagnostics.converged,
                },
                CellOutcome::Failed(_) => CsvRow {
                    lambda1: c.lambda1,
                    lambda2: c.lambda2,
                    mmd_criterion: None,
                    ot_value: None,
                    w2_value: None,
                    iterations: None,
                    converged: false,
                },
            };
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            path: "<csv>".into(),
            msg: format!("{other:?}"),
        },
    }
}

/// Solves one cell and evaluates it.
pub fn evaluate_cell(
    geometry: &Arc<ProblemGeometry>,
    hyper: Hyperparameters,
    opts: &SearchOptions,
) -> Result<(CellOutcome, TransportModel)> {
    let data = DualProblemData::from_geometry(geometry.clone(), hyper, opts.z_variant);
    let solution = solve(&data, &opts.solver)?;
    let diagnostics = SolverDiagnostics::new(&data, &solution)?;
    let model = TransportModel::from_solution(&data, &solution)?;
    let spec = opts.selection_kernel.as_ref().unwrap_or(&geometry.spec_y);
    let mmd_criterion = selection_criterion(&model, spec)?;
    if !mmd_criterion.is_finite() {
        return Err(Error::NonFinite("selection criterion"));
    }
    let outcome = CellOutcome::Solved {
        mmd_criterion,
        ot_value: model.ot_value()?,
        w2_value: model.w2_value(opts.w2_convention)?,
        diagnostics,
    };
    Ok((outcome, model))
}

/// Index of the minimal criterion; ties go to the larger `(lambda1, lambda2)`.
pub fn select_best(cells: &[CellRecord]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.criterion().map(|v| (i, v, c.lambda1, c.lambda2)))
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(b.2.total_cmp(&a.2))
                .then(b.3.total_cmp(&a.3))
        })
        .map(|t| t.0)
}

/// Grid search over a prepared geometry. Cells run in parallel; results are
/// reported in grid order.
pub fn grid_search_geometry(
    geometry: Arc<ProblemGeometry>,
    grid: &GridSpec,
    opts: &SearchOptions,
) -> Result<SelectionReport> {
    grid.validate()?;
    let results: Vec<(CellRecord, Option<TransportModel>)> = grid
        .cells()
        .into_par_iter()
        .map(|hyper| {
            let (outcome, model) = match evaluate_cell(&geometry, hyper, opts) {
                Ok((o, m)) => (o, Some(m)),
                Err(e) => {
                    log::warn!(
                        "cell lambda1={} lambda2={} failed: {e}",
                        hyper.lambda1,
                        hyper.lambda2
                    );
                    (CellOutcome::Failed(e.to_string()), None)
                }
            };
            let record = CellRecord {
                lambda1: hyper.lambda1,
                lambda2: hyper.lambda2,
                outcome,
            };
            (record, model)
        })
        .collect();
    let (cells, mut models): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let best_cell = select_best(&cells).ok_or(Error::AllCellsFailed)?;
    let best_model = models[best_cell]
        .take()
        .expect("solved cell keeps its model");
    Ok(SelectionReport {
        cells,
        best_cell,
        best_model,
    })
}

/// Grid search from raw inputs.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    spec_x: &KernelSpec,
    spec_y: &KernelSpec,
    spec_xy: &KernelSpec,
    mu: &SampleSet,
    nu: &SampleSet,
    fill: &FillingPairs,
    grid: &GridSpec,
    opts: &SearchOptions,
) -> Result<SelectionReport> {
    grid.validate()?;
    let geometry = ProblemGeometry::new(
        spec_x,
        spec_y,
        spec_xy,
        mu,
        nu,
        fill,
        grid.rank,
        opts.nystrom_seed,
    )?;
    grid_search_geometry(Arc::new(geometry), grid, opts)
}

/// Regularization schedule
/// `(log(2/delta)^2 / n)^((m+1)/(m+d/2+eps)) + C1 (log(n/delta)/n)^((m-d)/(2d))`.
pub fn theoretical_lambda(
    n: u64,
    delta_conf: f64,
    m: u32,
    d: u32,
    epsilon: f64,
    c1: f64,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "n must be at least 2, got {n}"
        )));
    }
    if !(delta_conf > 0.0 && delta_conf < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence must lie in (0, 1), got {delta_conf}"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    if d == 0 || m <= d {
        return Err(Error::InvalidParameter(format!(
            "smoothness m = {m} must exceed dimension d = {d}"
        )));
    }
    if !(c1 >= 0.0) || !c1.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "C1 must be nonnegative, got {c1}"
        )));
    }
    let (n, m, d) = (n as f64, m as f64, d as f64);
    let l = (2.0 / delta_conf).ln();
    let first = ((2.0 * l.ln() - n.ln()) * (m + 1.0) / (m + d / 2.0 + epsilon)).exp();
    let second = c1 * ((n / delta_conf).ln() / n).powf((m - d) / (2.0 * d));
    Ok(first + second)
}
