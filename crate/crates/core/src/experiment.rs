//! Gaussian-to-Gaussian sweeps: per `(n, repeat)` sampling, grid search,
//! selection, and error metrics against the closed-form ground truth.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{gaussian_ot_map, gaussian_w2, map_mse, plugin_w2, GaussianMeasure};
use crate::config::{ExperimentConfig, FillMode};
use crate::error::{create_file, open_file, Error, Result};
use crate::kernels::{FillingPairs, SampleSet};
use crate::selection::{csv_err, grid_search_geometry, CellOutcome, SelectionReport};
use crate::solver::ProblemGeometry;
use crate::transport::{TransportModel, W2Convention};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `base ^ hash(n, repeat)`.
pub fn job_seed(base: u64, n: usize, repeat: usize) -> u64 {
    base ^ splitmix64(splitmix64(n as u64) ^ repeat as u64)
}

/// Seed of the Gaussian pair of a repeat, shared by every sample size.
pub fn measure_seed(base: u64, repeat: usize) -> u64 {
    job_seed(base, 0, repeat)
}

/// One sampled problem with its ground truth.
#[derive(Debug, Clone)]
pub struct GaussianTask {
    pub mu: GaussianMeasure,
    pub nu: GaussianMeasure,
    pub x: SampleSet,
    pub y: SampleSet,
    pub fill: FillingPairs,
}

pub fn draw_gaussian_pair(d: usize, seed: u64) -> Result<(GaussianMeasure, GaussianMeasure)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = GaussianMeasure::random_wishart(&mut rng, d)?;
    let nu = GaussianMeasure::random_wishart(&mut rng, d)?;
    Ok((mu, nu))
}

pub fn draw_task(cfg: &ExperimentConfig, n: usize, repeat: usize) -> Result<GaussianTask> {
    let (mu, nu) = draw_gaussian_pair(cfg.d, measure_seed(cfg.seed, repeat))?;
    let mut rng = ChaCha8Rng::seed_from_u64(job_seed(cfg.seed, n, repeat));
    let x = mu.sample(&mut rng, n);
    let y = nu.sample(&mut rng, n);
    let fill = match cfg.fill {
        FillMode::Samples => FillingPairs::new(x.clone(), y.clone())?,
        FillMode::Fresh => FillingPairs::new(mu.sample(&mut rng, n), nu.sample(&mut rng, n))?,
    };
    Ok(GaussianTask { mu, nu, x, y, fill })
}

/// One row of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub d: usize,
    pub n: usize,
    pub repeat_index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `|W2_hat - W2|`.
    pub ot_error: f64,
    /// `|OT_hat - OT|`, with `OT = <|.|^2/2, mu + nu> - W2` from population moments.
    pub w2_error: f64,
    /// `|plugin - W2|`.
    pub plugin_error: f64,
    pub map_mse: f64,
    pub mmd_criterion: f64,
    pub solver_iterations: usize,
    pub wall_time_ms: u64,
}

pub const RECORD_COLUMNS: [&str; 12] = [
    "d",
    "n",
    "repeat_index",
    "lambda1",
    "lambda2",
    "ot_error",
    "w2_error",
    "plugin_error",
    "map_mse",
    "mmd_criterion",
    "solver_iterations",
    "wall_time_ms",
];

/// Errors of a fitted model against the task's ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelErrors {
    pub ot_error: f64,
    pub w2_error: f64,
    pub plugin_error: f64,
    pub map_mse: f64,
}

pub fn model_errors(
    model: &TransportModel,
    task: &GaussianTask,
    convention: W2Convention,
) -> Result<ModelErrors> {
    let truth = gaussian_w2(&task.mu, &task.nu)?;
    let t1 = gaussian_ot_map(&task.mu, &task.nu)?;
    let t2 = gaussian_ot_map(&task.nu, &task.mu)?;
    let w2_hat = model.w2_value(W2Convention::Half)?;
    let ot_true = task.mu.half_second_moment() + task.nu.half_second_moment() - truth;
    let plugin = plugin_w2(&task.x, &task.y)?;
    Ok(ModelErrors {
        ot_error: convention.scale((w2_hat - truth).abs()),
        w2_error: (model.ot_value()? - ot_true).abs(),
        plugin_error: convention.scale((plugin - truth).abs()),
        map_mse: map_mse(
            &model.forward(),
            &model.backward(),
            &t1,
            &t2,
            &task.x,
            &task.y,
        )?,
    })
}

/// Problem geometry of a task under the config's kernels and rank.
pub fn task_geometry(
    cfg: &ExperimentConfig,
    task: &GaussianTask,
    nystrom_seed: u64,
) -> Result<ProblemGeometry> {
    let k = cfg.kernel_spec()?;
    let kc = cfg.constraint_kernel_spec()?;
    ProblemGeometry::new(
        &k,
        &k,
        &kc,
        &task.x,
        &task.y,
        &task.fill,
        cfg.rank,
        nystrom_seed,
    )
}

/// Grid search on one `(n, repeat)` and the record of its selected cell.
pub fn run_job(
    cfg: &ExperimentConfig,
    n: usize,
    repeat: usize,
) -> Result<(ResultRecord, SelectionReport)> {
    let start = Instant::now();
    let task = draw_task(cfg, n, repeat)?;
    let seed = job_seed(cfg.seed, n, repeat);
    let geometry = Arc::new(task_geometry(cfg, &task, seed)?);
    let report = grid_search_geometry(geometry, &cfg.grid(), &cfg.search_options(seed))?;
    let best = report.best();
    let (mmd_criterion, iterations) = match &best.outcome {
        CellOutcome::Solved {
            mmd_criterion,
            diagnostics,
            ..
        } => (*mmd_criterion, diagnostics.iterations),
        CellOutcome::Failed(_) => unreachable!("selected cell is never a failed one"),
    };
    let errors = model_errors(&report.best_model, &task, cfg.w2_convention)?;
    let record = ResultRecord {
        d: cfg.d,
        n,
        repeat_index: repeat,
        lambda1: best.lambda1,
        lambda2: best.lambda2,
        ot_error: errors.ot_error,
        w2_error: errors.w2_error,
        plugin_error: errors.plugin_error,
        map_mse: errors.map_mse,
        mmd_criterion,
        solver_iterations: iterations,
        wall_time_ms: if cfg.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        },
    };
    Ok((record, report))
}

/// A job whose every grid cell failed.
#[derive(Debug, Clone, PartialEq)]
pub struct JobFailure {
    pub n: usize,
    pub repeat_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResults {
    /// Ordered by `n`, then repeat.
    pub records: Vec<ResultRecord>,
    pub failures: Vec<JobFailure>,
}

/// Runs every `(n, repeat)` job. Jobs run in a work pool; results keep job order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .sample_sizes
        .iter()
        .flat_map(|&n| (0..cfg.num_repeats).map(move |r| (n, r)))
        .collect();
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(n, r)| (n, r, run_job(cfg, n, r).map(|(rec, _)| rec)))
        .collect();
    let mut results = ExperimentResults::default();
    for (n, repeat_index, outcome) in outcomes {
        match outcome {
            Ok(rec) => results.records.push(rec),
            Err(e) => {
                log::error!("n={n} repeat={repeat_index} failed: {e}");
                results.failures.push(JobFailure {
                    n,
                    repeat_index,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(results)
}

pub fn write_records(out: impl Write, records: &[ResultRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(RECORD_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut rdr = csv::Reader::from_reader(open_file(path)?);
    rdr.deserialize().map(|r| r.map_err(csv_err)).collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Per-`(d, n)` summary over repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub d: usize,
    pub n: usize,
    pub count: usize,
    pub ot_error: MeanStd,
    pub w2_error: MeanStd,
    pub plugin_error: MeanStd,
    pub map_mse: MeanStd,
    pub mmd_criterion: MeanStd,
    pub log10_lambda1: MeanStd,
    pub log10_lambda2: MeanStd,
    pub solver_iterations: MeanStd,
}

pub fn aggregate(records: &[ResultRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(usize, usize)> = records.iter().map(|r| (r.d, r.n)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(d, n)| {
            let rows: Vec<&ResultRecord> =
                records.iter().filter(|r| r.d == d && r.n == n).collect();
            let stat = |f: &dyn Fn(&ResultRecord) -> f64| {
                MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            AggregateRow {
                d,
                n,
                count: rows.len(),
                ot_error: stat(&|r| r.ot_error),
                w2_error: stat(&|r| r.w2_error),
                plugin_error: stat(&|r| r.plugin_error),
                map_mse: stat(&|r| r.map_mse),
                mmd_criterion: stat(&|r| r.mmd_criterion),
                log10_lambda1: stat(&|r| r.lambda1.log10()),
                log10_lambda2: stat(&|r| r.lambda2.log10()),
                solver_iterations: stat(&|r| r.solver_iterations as f64),
            }
        })
        .collect()
}

pub fn write_aggregate(out: impl Write, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let metrics = [
        "ot_error",
        "w2_error",
        "plugin_error",
        "map_mse",
        "mmd_criterion",
        "log10_lambda1",
        "log10_lambda2",
        "solver_iterations",
    ];
    let mut header = vec!["d".to_string(), "n".to_string(), "count".to_string()];
    for m in metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut fields = vec![r.d.to_string(), r.n.to_string(), r.count.to_string()];
        for s in [
            r.ot_error,
            r.w2_error,
            r.plugin_error,
            r.map_mse,
            r.mmd_criterion,
            r.log10_lambda1,
            r.log10_lambda2,
            r.solver_iterations,
        ] {
            fields.push(s.mean.to_string());
            fields.push(s.std.to_string());
        }
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `results.csv` -> `results_aggregate.csv`, next to it.
pub fn aggregate_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    output.with_file_name(format!("{stem}_aggregate.csv"))
}

/// Runs the sweep and writes the records and the aggregate file.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    let results = run_experiment(cfg)?;
    if results.records.is_empty() {
        return Err(Error::AllCellsFailed);
    }
    if let Some(parent) = cfg
        .output_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
    {
        std::fs::create_dir_all(parent)?;
    }
    write_records(create_file(&cfg.output_path)?, &results.records)?;
    write_aggregate(
        create_file(&aggregate_path(&cfg.output_path))?,
        &aggregate(&results.records),
    )?;
    Ok(results)
}
