//! Designs of experiments and seeded random streams.

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// FNV-1a, used to turn stream labels into ChaCha stream ids.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Independent random stream identified by `(master_seed, label)`.
///
/// ChaCha keys on the seed and selects the stream from the label hash, so
/// draws on one label never shift when other labels are added.
pub fn stream_rng(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(label_hash(label));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LatinHypercube,
    UniformIid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub n_points: usize,
    pub dim: usize,
    pub seed: u64,
    pub scheme: Scheme,
}

impl DesignConfig {
    fn validate(&self) -> Result<()> {
        ensure!(self.n_points >= 1, "a design needs at least one point");
        ensure!(self.dim >= 1, "a design needs at least one dimension");
        Ok(())
    }
}

/// Latin-Hypercube design in the open unit cube: in every column the sorted
/// values fall one per stratum `[i/n, (i+1)/n)`.
pub fn latin_hypercube(cfg: &DesignConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    ensure!(cfg.scheme == Scheme::LatinHypercube, "latin_hypercube called with {:?}", cfg.scheme);
    let mut rng = stream_rng(cfg.seed, "latin-hypercube");
    Ok(lhs_with(cfg.n_points, cfg.dim, &mut rng))
}

fn lhs_with<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, dim);
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        perm.shuffle(rng);
        for (i, p) in perm.iter().enumerate() {
            let offset: f64 = rng.sample(Open01);
            let upper = (*p as f64 + 1.0) / n as f64;
            // Rounding of `p + offset` may land on the stratum's upper edge.
            out[(i, j)] = ((*p as f64 + offset) / n as f64).min(upper.next_down());
        }
    }
    out
}

/// I.i.d. uniform design in the open unit cube.
pub fn uniform(cfg: &DesignConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, "uniform-iid");
    Ok(DMatrix::from_fn(cfg.n_points, cfg.dim, |_, _| rng.sample(Open01)))
}

pub fn design(cfg: &DesignConfig) -> Result<DMatrix<f64>> {
    match cfg.scheme {
        Scheme::LatinHypercube => latin_hypercube(cfg),
        Scheme::UniformIid => uniform(cfg),
    }
}

fn check_ranges(ranges: &[(f64, f64)], dim: usize) -> Result<()> {
    ensure!(ranges.len() == dim, "{} ranges for {} columns", ranges.len(), dim);
    for (d, (lo, hi)) in ranges.iter().enumerate() {
        ensure!(lo < hi, "range {} has lower {} >= upper {}", d, lo, hi);
    }
    Ok(())
}

/// Maps unit-cube coordinates to `lower + u * (upper - lower)` per column.
pub fn scale_to_box(u: &DMatrix<f64>, ranges: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    check_ranges(ranges, u.ncols())?;
    Ok(DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| {
        let (lo, hi) = ranges[j];
        lo + u[(i, j)] * (hi - lo)
    }))
}

/// Inverse of [`scale_to_box`].
pub fn unscale_from_box(x: &DMatrix<f64>, ranges: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    check_ranges(ranges, x.ncols())?;
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        let (lo, hi) = ranges[j];
        (x[(i, j)] - lo) / (hi - lo)
    }))
}

/// Uniformly random `k`-subset of the rows of `x`, without replacement.
/// Returns the selected rows and their indices in `x`.
pub fn nested_subset<R: Rng + ?Sized>(x: &DMatrix<f64>, k: usize, rng: &mut R) -> Result<(DMatrix<f64>, Vec<usize>)> {
    ensure!(k >= 1, "subset size must be at least 1");
    ensure!(k <= x.nrows(), "subset of {} rows requested from {}", k, x.nrows());
    let idx = index::sample(rng, x.nrows(), k).into_vec();
    Ok((x.select_rows(&idx), idx))
}
