//! Active subspaces from gradient samples and the reduced response surface
//! built on top of them.
//!
//! All gradients and inputs handled here live in the normalized `[-1, 1]^m`
//! coordinates of the parameter box; [`gradients_to_normalized`] and
//! [`ResponseSurface`] take care of the conversion from physical units.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::gp::{self, Dataset, FitOptions, InputMap, InputScaling, PredictiveDistribution, TrainedGp};
use crate::kernels::KernelSpec;

/// How many leading eigenvectors span the active subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimPolicy {
    Fixed(usize),
    /// Largest spectral gap `lambda_r - lambda_{r+1}`.
    SpectralGap,
}

impl Default for DimPolicy {
    fn default() -> Self {
        DimPolicy::Fixed(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSubspace {
    /// Descending, clamped at zero.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors as columns, matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    pub active_dim: usize,
}

impl ActiveSubspace {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// The `m x r` projector onto the active variables.
    pub fn w1(&self) -> DMatrix<f64> {
        self.eigenvectors.columns(0, self.active_dim).into_owned()
    }

    /// Active variables `W1^T u` for every row of `u` (normalized inputs).
    pub fn project(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure!(u.ncols() == self.dim(), "projecting {} columns with a {}-dimensional subspace", u.ncols(), self.dim());
        Ok(u * self.w1())
    }
}

/// Monte Carlo estimate `(1/N) sum g_i g_i^T` of the gradient outer product.
pub fn correlation_matrix(gradients: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if gradients.nrows() == 0 {
        return Err(Error::EmptyInput("no gradient samples".into()));
    }
    let mut c = gradients.tr_mul(gradients) / gradients.nrows() as f64;
    // Exact symmetry regardless of the product's summation order.
    let m = c.nrows();
    for i in 0..m {
        for j in 0..i {
            c[(i, j)] = c[(j, i)];
        }
    }
    Ok(c)
}

/// Chain rule for `x = center + half_width * u`: `df/du = df/dx * half_width`.
pub fn gradients_to_normalized(gradients: &DMatrix<f64>, ranges: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    ensure!(ranges.len() == gradients.ncols(), "{} ranges for {} gradient columns", ranges.len(), gradients.ncols());
    let map = InputMap::from_ranges(ranges)?;
    Ok(DMatrix::from_fn(gradients.nrows(), gradients.ncols(), |i, j| gradients[(i, j)] * map.half_width[j]))
}

/// Full symmetric eigendecomposition of `c`, sorted descending, with each
/// eigenvector's largest-magnitude entry made positive.
pub fn find_subspace(c: &DMatrix<f64>, policy: DimPolicy) -> Result<ActiveSubspace> {
    ensure!(c.is_square() && c.nrows() >= 1, "correlation matrix must be square and non-empty");
    let m = c.nrows();
    let scale = c.amax().max(f64::MIN_POSITIVE);
    ensure!((c - c.transpose()).amax() <= 1e-10 * scale.max(1.0), "correlation matrix is not symmetric");

    let eig = SymmetricEigen::new(c.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(m, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let mut eigenvectors = DMatrix::from_fn(m, m, |r, k| eig.eigenvectors[(r, order[k])]);
    for mut col in eigenvectors.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }

    let active_dim = match policy {
        DimPolicy::Fixed(r) => {
            ensure!(r >= 1 && r <= m, "active dimension {} outside 1..={}", r, m);
            r
        }
        DimPolicy::SpectralGap => spectral_gap_dim(&eigenvalues),
    };
    Ok(ActiveSubspace { eigenvalues, eigenvectors, active_dim })
}

fn spectral_gap_dim(eigenvalues: &DVector<f64>) -> usize {
    let m = eigenvalues.len();
    if m < 2 {
        return 1;
    }
    let gaps: Vec<f64> = (0..m - 1).map(|j| eigenvalues[j] - eigenvalues[j + 1]).collect();
    let (lo, hi) = gaps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| (lo.min(*g), hi.max(*g)));
    if hi - lo <= 1e-12 * eigenvalues[0].abs().max(1.0) {
        log::warn!("spectral gaps are all equal; falling back to a one-dimensional active subspace");
        return 1;
    }
    // First index attaining the maximum gap.
    gaps.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bg), (i, g)| if *g > bg { (i, *g) } else { (bi, bg) }).0
        + 1
}

/// Groups rows whose projections coincide within `tol` (max norm) and
/// averages their outputs; returns the representative projections and means.
pub(crate) fn dedup_projections(z: &DMatrix<f64>, y: &DVector<f64>, tol: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut reps: Vec<usize> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for i in 0..z.nrows() {
        let hit = reps.iter().position(|&r| (z.row(r) - z.row(i)).amax() <= tol);
        match hit {
            Some(k) => {
                sums[k].0 += y[i];
                sums[k].1 += 1;
            }
            None => {
                reps.push(i);
                sums.push((y[i], 1));
            }
        }
    }
    let zr = z.select_rows(&reps);
    let yr = DVector::from_iterator(reps.len(), sums.iter().map(|(s, c)| s / *c as f64));
    (zr, yr)
}

/// GP regression over the active variables.
#[derive(Debug, Clone)]
pub struct ResponseSurface {
    subspace: ActiveSubspace,
    /// Physical box -> `[-1, 1]^m`, the coordinates the subspace lives in.
    input_map: InputMap,
    surrogate: TrainedGp,
}

const DEDUP_TOL: f64 = 1e-12;

/// Fits a GP on the pairs `(W1^T u_i, y_i)`, `u_i` being `x` mapped from `ranges`.
pub fn build_response_surface(
    subspace: &ActiveSubspace,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    ranges: &[(f64, f64)],
    opts: &FitOptions,
) -> Result<ResponseSurface> {
    ensure!(x.nrows() == y.len(), "{} inputs but {} outputs", x.nrows(), y.len());
    ensure!(x.nrows() >= 1, "response surface needs at least one sample");
    ensure!(x.ncols() == subspace.dim(), "inputs have {} columns, subspace has {}", x.ncols(), subspace.dim());
    let input_map = InputMap::from_ranges(ranges)?;
    let z = subspace.project(&input_map.apply(x))?;
    let (z, y) = dedup_projections(&z, y, DEDUP_TOL);
    let data = Dataset::new(z, y)?;
    let opts = FitOptions { input_scaling: InputScaling::DataBounds, ..opts.clone() };
    let surrogate = gp::fit(&data, KernelSpec::RbfArd { dim: subspace.active_dim }, &opts)?;
    Ok(ResponseSurface { subspace: subspace.clone(), input_map, surrogate })
}

impl ResponseSurface {
    pub fn subspace(&self) -> &ActiveSubspace {
        &self.subspace
    }

    pub fn surrogate(&self) -> &TrainedGp {
        &self.surrogate
    }

    /// Active-variable coordinates of physical inputs.
    pub fn active_coordinates(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure!(
            x.ncols() == self.subspace.dim(),
            "queries have {} columns, subspace has {}",
            x.ncols(),
            self.subspace.dim()
        );
        self.subspace.project(&self.input_map.apply(x))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        self.surrogate.predict(&self.active_coordinates(x)?)
    }

    pub fn predict_mean(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.surrogate.predict_mean(&self.active_coordinates(x)?)
    }
}

/// Same as [`ResponseSurface::predict`].
pub fn predict_response_surface(rs: &ResponseSurface, x: &DMatrix<f64>) -> Result<PredictiveDistribution> {
    rs.predict(x)
}

/// Writes `index,eigenvalue` rows.
pub fn write_eigenvalues_csv(path: &Path, subspace: &ActiveSubspace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["index", "eigenvalue"]).map_err(|e| Error::csv(path, e))?;
    for (i, l) in subspace.eigenvalues.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")]).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sufficient-summary data: one row per sample with its active coordinates
/// (`z1..zr`) and output.
pub fn write_summary_csv<W: Write>(out: W, active: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    ensure!(active.nrows() == y.len(), "{} projections but {} outputs", active.nrows(), y.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=active.ncols()).map(|i| format!("z{i}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
    for i in 0..y.len() {
        let mut rec: Vec<String> = active.row(i).iter().map(|v| format!("{v:e}")).collect();
        rec.push(format!("{:e}", y[i]));
        w.write_record(&rec).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}
