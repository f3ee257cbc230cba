//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment; lists are comma separated.
//! Every key is optional and falls back to [`ExperimentConfig::default`].
//!
//! | key | type | default |
//! |-----|------|---------|
//! | `d` | integer | 2 |
//! | `sample_sizes` | ascending integer list | 25, 50, 100, 200 |
//! | `num_repeats` | integer >= 1 | 10 |
//! | `kernel` | `gaussian` or `sobolev` | sobolev |
//! | `smoothness` | real | 20 |
//! | `constraint_smoothness` | real | same as `smoothness` |
//! | `bandwidth` | real | 1 |
//! | `lambda1_values`, `lambda2_values` | real list | 1e-7, ..., 1e-2 |
//! | `delta` | real | 1000 |
//! | `rank` | integer or `none` | 100 |
//! | `fill` | `samples` or `fresh` | samples |
//! | `seed` | integer | 0 |
//! | `output_path` | path | results.csv |
//! | `tol` | real | 1e-8 |
//! | `max_iter` | integer | 50000 |
//! | `z_variant` | `derived` or `paper` | derived |
//! | `w2_convention` | `half` or `full` | half |
//! | `record_wall_time` | bool | false |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{open_file, Error, Result};
use crate::kernels::KernelSpec;
use crate::nystrom::DEFAULT_RANK;
use crate::selection::{GridSpec, SearchOptions, DEFAULT_GRID};
use crate::solver::{SolverOptions, ZVariant, DEFAULT_DELTA};
use crate::transport::W2Convention;

/// Kernel family as named on the command line and in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelName {
    Gaussian,
    #[default]
    Sobolev,
}

impl FromStr for KernelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "sobolev" => Ok(Self::Sobolev),
            _ => Err(Error::InvalidParameter(format!(
                "unknown kernel `{s}` (expected gaussian or sobolev)"
            ))),
        }
    }
}

impl KernelName {
    fn as_str(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Sobolev => "sobolev",
        }
    }

    pub fn spec(self, smoothness: f64, bandwidth: f64, dim: usize) -> Result<KernelSpec> {
        match self {
            Self::Gaussian => KernelSpec::gaussian(bandwidth, dim),
            Self::Sobolev => KernelSpec::sobolev(smoothness, bandwidth, dim),
        }
    }
}

/// Where the filling pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillMode {
    /// `(x_i, y_i)`: the samples themselves, paired by index.
    #[default]
    Samples,
    /// `n` independent fresh draws from `mu (x) nu`.
    Fresh,
}

impl FromStr for FillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "samples" => Ok(Self::Samples),
            "fresh" => Ok(Self::Fresh),
            _ => Err(Error::InvalidParameter(format!(
                "unknown fill mode `{s}` (expected samples or fresh)"
            ))),
        }
    }
}

impl FillMode {
    fn as_str(self) -> &'static str {
        match self {
            Self::Samples => "samples",
            Self::Fresh => "fresh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub d: usize,
    pub sample_sizes: Vec<usize>,
    pub num_repeats: usize,
    pub kernel: KernelName,
    pub smoothness: f64,
    pub constraint_smoothness: Option<f64>,
    pub bandwidth: f64,
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    pub delta: f64,
    pub rank: Option<usize>,
    pub fill: FillMode,
    pub seed: u64,
    pub output_path: PathBuf,
    pub tol: f64,
    pub max_iter: usize,
    pub z_variant: ZVariant,
    pub w2_convention: W2Convention,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let solver = SolverOptions::default();
        Self {
            d: 2,
            sample_sizes: vec![25, 50, 100, 200],
            num_repeats: 10,
            kernel: KernelName::Sobolev,
            smoothness: 20.0,
            constraint_smoothness: None,
            bandwidth: 1.0,
            lambda1_values: DEFAULT_GRID.to_vec(),
            lambda2_values: DEFAULT_GRID.to_vec(),
            delta: DEFAULT_DELTA,
            rank: Some(DEFAULT_RANK),
            fill: FillMode::Samples,
            seed: 0,
            output_path: PathBuf::from("results.csv"),
            tol: solver.rel_tol,
            max_iter: solver.max_iter,
            z_variant: ZVariant::Derived,
            w2_convention: W2Convention::Half,
            record_wall_time: false,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("invalid value `{v}` for `{key}`"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect()
}

fn list_text<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::io::read_to_string(open_file(path)?)?)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "d" => self.d = parse_value(line, key, v)?,
            "sample_sizes" => self.sample_sizes = parse_list(line, key, v)?,
            "num_repeats" => self.num_repeats = parse_value(line, key, v)?,
            "kernel" => self.kernel = parse_value(line, key, v)?,
            "smoothness" => self.smoothness = parse_value(line, key, v)?,
            "constraint_smoothness" => {
                self.constraint_smoothness = Some(parse_value(line, key, v)?)
            }
            "bandwidth" => self.bandwidth = parse_value(line, key, v)?,
            "lambda1_values" => self.lambda1_values = parse_list(line, key, v)?,
            "lambda2_values" => self.lambda2_values = parse_list(line, key, v)?,
            "delta" => self.delta = parse_value(line, key, v)?,
            "rank" => {
                self.rank = match v {
                    "none" => None,
                    _ => Some(parse_value(line, key, v)?),
                }
            }
            "fill" => self.fill = parse_value(line, key, v)?,
            "seed" => self.seed = parse_value(line, key, v)?,
            "output_path" => self.output_path = PathBuf::from(v),
            "tol" => self.tol = parse_value(line, key, v)?,
            "max_iter" => self.max_iter = parse_value(line, key, v)?,
            "z_variant" => self.z_variant = parse_value(line, key, v)?,
            "w2_convention" => self.w2_convention = parse_value(line, key, v)?,
            "record_wall_time" => self.record_wall_time = parse_value(line, key, v)?,
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return bad("sample_sizes must be a nonempty list of positive integers".into());
        }
        if self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sample_sizes must be strictly ascending".into());
        }
        if self.num_repeats == 0 {
            return bad("num_repeats must be at least 1".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if self.rank == Some(0) {
            return bad("rank must be positive".into());
        }
        self.kernel_spec().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        self.constraint_kernel_spec().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        self.grid().validate().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Kernel on `X` and `Y`.
    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        self.kernel.spec(self.smoothness, self.bandwidth, self.d)
    }

    /// Kernel on each factor of `X x Y` for the constraint features.
    pub fn constraint_kernel_spec(&self) -> Result<KernelSpec> {
        self.kernel.spec(
            self.constraint_smoothness.unwrap_or(self.smoothness),
            self.bandwidth,
            self.d,
        )
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            lambda1_values: self.lambda1_values.clone(),
            lambda2_values: self.lambda2_values.clone(),
            delta: self.delta,
            rank: self.rank,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            rel_tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    pub fn search_options(&self, nystrom_seed: u64) -> SearchOptions {
        SearchOptions {
            z_variant: self.z_variant,
            solver: self.solver_options(),
            nystrom_seed,
            selection_kernel: None,
            w2_convention: self.w2_convention,
        }
    }

    /// Renders the config in the file format; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("d", self.d.to_string());
        kv("sample_sizes", list_text(&self.sample_sizes));
        kv("num_repeats", self.num_repeats.to_string());
        kv("kernel", self.kernel.as_str().into());
        kv("smoothness", self.smoothness.to_string());
        if let Some(cs) = self.constraint_smoothness {
            kv("constraint_smoothness", cs.to_string());
        }
        kv("bandwidth", self.bandwidth.to_string());
        kv("lambda1_values", list_text(&self.lambda1_values));
        kv("lambda2_values", list_text(&self.lambda2_values));
        kv("delta", self.delta.to_string());
        kv("rank", self.rank.map_or("none".into(), |r| r.to_string()));
        kv("fill", self.fill.as_str().into());
        kv("seed", self.seed.to_string());
        kv("output_path", self.output_path.display().to_string());
        kv("tol", self.tol.to_string());
        kv("max_iter", self.max_iter.to_string());
        kv("z_variant", self.z_variant.to_string());
        kv("w2_convention", self.w2_convention.to_string());
        kv("record_wall_time", self.record_wall_time.to_string());
        s
    }
}
