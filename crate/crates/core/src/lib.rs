//! Multi-fidelity Gaussian process regression whose low-fidelity level is an
//! active-subspace response surface.
//!
//! The pieces compose bottom-up: [`kernels`] and [`gp`] give exact GP
//! regression, [`subspace`] finds the active subspace and fits the reduced
//! response surface, [`nargp`] stacks GPs into a nonlinear autoregressive
//! multi-fidelity model, and [`harness`] runs the error studies on the
//! analytic [`benchmarks`].

pub mod benchmarks;
pub mod error;
pub mod gp;
pub mod harness;
pub mod kernels;
pub mod nargp;
pub mod optim;
pub mod sampling;
pub mod subspace;

pub use benchmarks::{benchmark_registry, BenchmarkSpec, RangeConfig, Registry};
pub use error::{Error, Result};
pub use gp::{fit, Dataset, FitOptions, InputScaling, Jitter, PredictiveDistribution, TrainedGp};
pub use harness::{
    emit_results, l1_error, run_algorithm1, run_algorithm2, run_study, run_study_with, Algorithm, Model, StudyConfig,
    StudyResult,
};
pub use kernels::{KernelParams, KernelSpec, NargpKernelParams, RbfArdParams};
pub use nargp::{train_mf, McConfig, MfOptions, MultiFidelityModel};
pub use sampling::{latin_hypercube, stream_rng, DesignConfig, Scheme};
pub use subspace::{build_response_surface, find_subspace, ActiveSubspace, DimPolicy, ResponseSurface};
