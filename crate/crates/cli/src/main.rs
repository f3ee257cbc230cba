use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sos_ot::commands::{
    cmd_fit, cmd_generate, cmd_gridsearch, cmd_map, Direction, GenerateOptions, Inputs,
    ModelOptions,
};
use sos_ot::config::{ExperimentConfig, FillMode, KernelName};
use sos_ot::experiment::{aggregate_path, cmd_experiment};
use sos_ot::{Error, W2Convention, ZVariant};

/// Kernel sum-of-squares estimation of optimal transport between sampled measures.
#[derive(Parser, Debug)]
#[command(name = "sos-ot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a random Gaussian pair and write samples and parameters.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Dimension (defaults to `d` from the config).
        #[arg(long)]
        dim: Option<usize>,
        /// Samples per measure (defaults to the first configured sample size).
        #[arg(long)]
        n: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one (lambda1, lambda2) cell on point files.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        lambda1: f64,
        #[arg(long)]
        lambda2: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a fitted map to a point file.
    Map {
        /// Model written by `fit` or `gridsearch`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// `forward` (T1) or `backward` (T2).
        #[arg(long, default_value = "forward")]
        direction: Direction,
        /// Output point file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Select (lambda1, lambda2) on a grid by the MMD criterion.
    Gridsearch {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated lambda1 values (defaults to the config grid).
        #[arg(long, value_delimiter = ',')]
        lambda1: Vec<f64>,
        /// Comma-separated lambda2 values (defaults to the config grid).
        #[arg(long, value_delimiter = ',')]
        lambda2: Vec<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sweep over sample sizes and repeats; write per-run and aggregate CSVs.
    Experiment {
        #[command(flatten)]
        common: CommonArgs,
        /// Results CSV (overrides `output_path`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Samples of mu.
    #[arg(long)]
    mu: PathBuf,
    /// Samples of nu.
    #[arg(long)]
    nu: PathBuf,
    /// First coordinates of the filling pairs (defaults to the mu samples).
    #[arg(long, requires = "fill_y")]
    fill_x: Option<PathBuf>,
    /// Second coordinates of the filling pairs (defaults to the nu samples).
    #[arg(long, requires = "fill_x")]
    fill_y: Option<PathBuf>,
}

/// Settings that may come from a config file and be overridden by flags.
#[derive(Args, Debug)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Nystrom rank.
    #[arg(long, conflicts_with = "exact")]
    rank: Option<usize>,
    /// Use exact constraint features.
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_parser = ["gaussian", "sobolev"])]
    kernel: Option<String>,
    #[arg(long)]
    smoothness: Option<f64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Relative gradient-norm tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, value_parser = ["paper", "derived"])]
    z_variant: Option<String>,
    #[arg(long, value_parser = ["half", "full"])]
    w2_convention: Option<String>,
    /// `samples` or `fresh` (experiment only).
    #[arg(long, value_parser = ["samples", "fresh"])]
    fill: Option<String>,
}

impl CommonArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.rank {
            cfg.rank = Some(v);
        }
        if self.exact {
            cfg.rank = None;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = &self.kernel {
            cfg.kernel = v.parse::<KernelName>()?;
        }
        if let Some(v) = self.smoothness {
            cfg.smoothness = v;
        }
        if let Some(v) = self.bandwidth {
            cfg.bandwidth = v;
        }
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = &self.z_variant {
            cfg.z_variant = v.parse::<ZVariant>()?;
        }
        if let Some(v) = &self.w2_convention {
            cfg.w2_convention = v.parse::<W2Convention>()?;
        }
        if let Some(v) = &self.fill {
            cfg.fill = v.parse::<FillMode>()?;
        }
        Ok(cfg)
    }
}

fn load_inputs(data: &DataArgs) -> Result<Inputs, Error> {
    let fill = data.fill_x.as_deref().zip(data.fill_y.as_deref());
    Inputs::load(&data.mu, &data.nu, fill)
}

fn model_options(
    common: &CommonArgs,
    inputs: &Inputs,
) -> Result<(ExperimentConfig, ModelOptions), Error> {
    let mut cfg = common.config()?;
    cfg.d = inputs.dim();
    cfg.validate()?;
    let opts = ModelOptions::from_config(&cfg)?;
    Ok((cfg, opts))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Generate {
            common,
            dim,
            n,
            out,
        } => {
            let mut cfg = common.config()?;
            if let Some(d) = dim {
                cfg.d = d;
            }
            cfg.validate()?;
            let n = n.unwrap_or(cfg.sample_sizes[0]);
            cmd_generate(&GenerateOptions {
                d: cfg.d,
                n,
                seed: cfg.seed,
                out_dir: out.clone(),
            })?;
            println!(
                "wrote {n} samples per measure (d = {}) to {}",
                cfg.d,
                out.display()
            );
            Ok(0)
        }
        Command::Fit {
            data,
            common,
            lambda1,
            lambda2,
            out,
        } => {
            let inputs = load_inputs(&data)?;
            let (_, opts) = model_options(&common, &inputs)?;
            let fit = cmd_fit(&inputs, &opts, lambda1, lambda2, &out)?;
            let d = &fit.diagnostics;
            println!(
                "OT = {}  W2^2 = {} ({})  iterations = {}  grad_norm = {:e}  gap = {:e}  converged = {}",
                fit.estimates.ot_value,
                fit.estimates.w2_value,
                fit.estimates.w2_convention,
                d.iterations,
                d.grad_norm,
                d.gap,
                d.converged
            );
            if d.converged {
                Ok(0)
            } else {
                eprintln!(
                    "error: solver stopped at the iteration cap; diagnostics written to {}",
                    out.display()
                );
                Ok(2)
            }
        }
        Command::Map {
            model,
            input,
            direction,
            out,
        } => {
            let n = cmd_map(&model, &input, direction, &out)?;
            println!("mapped {n} points to {}", out.display());
            Ok(0)
        }
        Command::Gridsearch {
            data,
            common,
            lambda1,
            lambda2,
            out,
        } => {
            let inputs = load_inputs(&data)?;
            let (cfg, opts) = model_options(&common, &inputs)?;
            let l1 = if lambda1.is_empty() {
                cfg.lambda1_values.clone()
            } else {
                lambda1
            };
            let l2 = if lambda2.is_empty() {
                cfg.lambda2_values.clone()
            } else {
                lambda2
            };
            let report = cmd_gridsearch(&inputs, &opts, &l1, &l2, &out)?;
            let best = report.best();
            println!(
                "best lambda1 = {:e}  lambda2 = {:e}  criterion = {:e}",
                best.lambda1,
                best.lambda2,
                best.criterion().unwrap_or(f64::NAN)
            );
            Ok(0)
        }
        Command::Experiment { common, out } => {
            let mut cfg = common.config()?;
            if let Some(p) = out {
                cfg.output_path = p;
            }
            cfg.validate()?;
            let results = cmd_experiment(&cfg)?;
            println!(
                "wrote {} records to {} and {}",
                results.records.len(),
                cfg.output_path.display(),
                aggregate_path(&cfg.output_path).display()
            );
            for f in &results.failures {
                eprintln!(
                    "error: n = {} repeat = {} failed: {}",
                    f.n, f.repeat_index, f.message
                );
            }
            Ok(if results.failures.is_empty() { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
