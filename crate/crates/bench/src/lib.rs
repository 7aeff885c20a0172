//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;

use mfas::sampling::scale_to_box;
use mfas::{benchmark_registry, latin_hypercube, Dataset, DesignConfig, Scheme};

/// `n` Latin-hypercube samples of a built-in benchmark, with gradients.
pub fn sample(name: &str, n: usize, seed: u64) -> Dataset {
    let spec = benchmark_registry(name).expect("built-in benchmark");
    spec.sample(&design(name, n, seed)).expect("benchmark evaluates on its box")
}

/// `n` Latin-hypercube points in the box of a built-in benchmark.
pub fn design(name: &str, n: usize, seed: u64) -> DMatrix<f64> {
    let spec = benchmark_registry(name).expect("built-in benchmark");
    let u = latin_hypercube(&DesignConfig { n_points: n, dim: spec.dim(), seed, scheme: Scheme::LatinHypercube })
        .expect("valid design");
    scale_to_box(&u, &spec.ranges).expect("matching dimensions")
}
