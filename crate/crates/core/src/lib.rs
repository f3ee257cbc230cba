//! Kernel sum-of-squares estimation of optimal transport potentials and maps.

pub mod baselines;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernels;
pub mod numerics;
pub mod nystrom;
pub mod selection;
pub mod solver;
pub mod transport;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use kernels::{FillingPairs, KernelFamily, KernelSpec, SampleSet};
pub use numerics::SymMatrix;
pub use solver::{
    DualProblemData, DualSolution, Hyperparameters, ProblemGeometry, SolverOptions, ZVariant,
};
pub use transport::{PointMap, TransportModel, W2Convention};
