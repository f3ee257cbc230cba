//! File-level pipeline steps behind the `generate`, `fit`, `map` and
//! `gridsearch` subcommands.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{create_file, open_file, Error, Result};
use crate::experiment::draw_gaussian_pair;
use crate::io::{read_points, write_gaussian, write_points};
use crate::kernels::{FillingPairs, KernelSpec, SampleSet};
use crate::selection::{grid_search_geometry, GridSpec, SearchOptions, SelectionReport};
use crate::solver::{
    solve, DualProblemData, Hyperparameters, ProblemGeometry, SolverDiagnostics, SolverOptions,
    ZVariant,
};
use crate::transport::{PointMap, TransportModel, W2Convention};

pub const MU_FILE: &str = "mu.csv";
pub const NU_FILE: &str = "nu.csv";
pub const MU_PARAMS_FILE: &str = "mu_params.csv";
pub const NU_PARAMS_FILE: &str = "nu_params.csv";
pub const MODEL_FILE: &str = "model.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const ESTIMATES_FILE: &str = "estimates.json";
pub const MAPPED_MU_FILE: &str = "mapped_mu.csv";
pub const MAPPED_NU_FILE: &str = "mapped_nu.csv";
pub const GRID_FILE: &str = "gridsearch.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Draws a Wishart Gaussian pair and `n` samples of each; writes the samples
/// and the parameters.
pub fn cmd_generate(opts: &GenerateOptions) -> Result<()> {
    if opts.n == 0 {
        return Err(Error::InvalidParameter(
            "sample count must be positive".into(),
        ));
    }
    ensure_dir(&opts.out_dir)?;
    let (mu, nu) = draw_gaussian_pair(opts.d, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let x = mu.sample(&mut rng, opts.n);
    let y = nu.sample(&mut rng, opts.n);
    write_points(&opts.out_dir.join(MU_FILE), &x)?;
    write_points(&opts.out_dir.join(NU_FILE), &y)?;
    write_gaussian(&opts.out_dir.join(MU_PARAMS_FILE), &mu)?;
    write_gaussian(&opts.out_dir.join(NU_PARAMS_FILE), &nu)?;
    Ok(())
}

/// Kernel, feature and solver settings shared by `fit` and `gridsearch`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub kernel: KernelSpec,
    pub constraint_kernel: KernelSpec,
    pub rank: Option<usize>,
    pub delta: f64,
    pub z_variant: ZVariant,
    pub solver: SolverOptions,
    pub w2_convention: W2Convention,
    pub nystrom_seed: u64,
}

impl ModelOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            kernel: cfg.kernel_spec()?,
            constraint_kernel: cfg.constraint_kernel_spec()?,
            rank: cfg.rank,
            delta: cfg.delta,
            z_variant: cfg.z_variant,
            solver: cfg.solver_options(),
            w2_convention: cfg.w2_convention,
            nystrom_seed: cfg.seed,
        })
    }

    fn search_options(&self) -> SearchOptions {
        SearchOptions {
            z_variant: self.z_variant,
            solver: self.solver,
            nystrom_seed: self.nystrom_seed,
            selection_kernel: None,
            w2_convention: self.w2_convention,
        }
    }

    pub fn geometry(&self, inputs: &Inputs) -> Result<ProblemGeometry> {
        ProblemGeometry::new(
            &self.kernel,
            &self.kernel,
            &self.constraint_kernel,
            &inputs.mu,
            &inputs.nu,
            &inputs.fill,
            self.rank,
            self.nystrom_seed,
        )
    }
}

/// Samples and filling pairs of a fit.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub mu: SampleSet,
    pub nu: SampleSet,
    pub fill: FillingPairs,
}

impl Inputs {
    /// Fills with `(x_i, y_i)` unless explicit filling files are given.
    pub fn load(mu: &Path, nu: &Path, fill: Option<(&Path, &Path)>) -> Result<Self> {
        let mu = read_points(mu)?;
        let nu = read_points(nu)?;
        let fill = match fill {
            Some((fx, fy)) => FillingPairs::new(read_points(fx)?, read_points(fy)?)?,
            None => FillingPairs::new(mu.clone(), nu.clone())?,
        };
        Ok(Self { mu, nu, fill })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

/// Value estimates written next to a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub lambda1: f64,
    pub lambda2: f64,
    pub ot_value: f64,
    pub w2_value: f64,
    pub w2_convention: W2Convention,
}

impl Estimates {
    pub fn of(
        model: &TransportModel,
        hyper: &Hyperparameters,
        convention: W2Convention,
    ) -> Result<Self> {
        Ok(Self {
            lambda1: hyper.lambda1,
            lambda2: hyper.lambda2,
            ot_value: model.ot_value()?,
            w2_value: model.w2_value(convention)?,
            w2_convention: convention,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: TransportModel,
    pub diagnostics: SolverDiagnostics,
    pub estimates: Estimates,
}

fn write_model_outputs(
    out_dir: &Path,
    model: &TransportModel,
    estimates: &Estimates,
) -> Result<()> {
    write_json(&out_dir.join(MODEL_FILE), model)?;
    write_json(&out_dir.join(ESTIMATES_FILE), estimates)?;
    write_points(
        &out_dir.join(MAPPED_MU_FILE),
        &model.forward().apply_all(&model.mu)?,
    )?;
    write_points(
        &out_dir.join(MAPPED_NU_FILE),
        &model.backward().apply_all(&model.nu)?,
    )?;
    Ok(())
}

/// Solves one `(lambda1, lambda2)` cell and writes the model, diagnostics,
/// estimates and mapped samples. Files are written even when the solver
/// stops at the iteration cap; check `diagnostics.converged`.
pub fn cmd_fit(
    inputs: &Inputs,
    opts: &ModelOptions,
    lambda1: f64,
    lambda2: f64,
    out_dir: &Path,
) -> Result<FitOutcome> {
    let hyper = Hyperparameters::new(lambda1, lambda2, opts.delta, opts.rank)?;
    let geometry = Arc::new(opts.geometry(inputs)?);
    let data = DualProblemData::from_geometry(geometry, hyper, opts.z_variant);
    let solution = solve(&data, &opts.solver)?;
    let diagnostics = SolverDiagnostics::new(&data, &solution)?;
    let model = TransportModel::from_solution(&data, &solution)?;
    let estimates = Estimates::of(&model, &hyper, opts.w2_convention)?;
    ensure_dir(out_dir)?;
    write_json(&out_dir.join(DIAGNOSTICS_FILE), &diagnostics)?;
    write_model_outputs(out_dir, &model, &estimates)?;
    Ok(FitOutcome {
        model,
        diagnostics,
        estimates,
    })
}

/// Which map of a fitted model to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    /// `T1`, from `mu` to `nu`.
    #[default]
    Forward,
    /// `T2`, from `nu` to `mu`.
    Backward,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "backward" => Ok(Self::Backward),
            _ => Err(Error::InvalidParameter(format!(
                "unknown direction `{s}` (expected forward or backward)"
            ))),
        }
    }
}

pub fn read_model(path: &Path) -> Result<TransportModel> {
    Ok(serde_json::from_reader(std::io::BufReader::new(
        open_file(path)?,
    ))?)
}

/// Maps every row of `input` and writes the images to `output`.
pub fn cmd_map(
    model_path: &Path,
    input: &Path,
    direction: Direction,
    output: &Path,
) -> Result<usize> {
    let model = read_model(model_path)?;
    let points = read_points(input)?;
    let mapped = match direction {
        Direction::Forward => model.forward().apply_all(&points)?,
        Direction::Backward => model.backward().apply_all(&points)?,
    };
    write_points(output, &mapped)?;
    Ok(mapped.len())
}

/// Grid search over `grid`; writes the per-cell table and the selected model.
pub fn cmd_gridsearch(
    inputs: &Inputs,
    opts: &ModelOptions,
    lambda1_values: &[f64],
    lambda2_values: &[f64],
    out_dir: &Path,
) -> Result<SelectionReport> {
    let grid = GridSpec {
        lambda1_values: lambda1_values.to_vec(),
        lambda2_values: lambda2_values.to_vec(),
        delta: opts.delta,
        rank: opts.rank,
    };
    grid.validate()?;
    let geometry = Arc::new(opts.geometry(inputs)?);
    let report = grid_search_geometry(geometry, &grid, &opts.search_options())?;
    ensure_dir(out_dir)?;
    report.write_csv(create_file(&out_dir.join(GRID_FILE))?)?;
    let best = report.best();
    let hyper = Hyperparameters::new(best.lambda1, best.lambda2, opts.delta, opts.rank)?;
    let estimates = Estimates::of(&report.best_model, &hyper, opts.w2_convention)?;
    write_model_outputs(out_dir, &report.best_model, &estimates)?;
    Ok(report)
}
