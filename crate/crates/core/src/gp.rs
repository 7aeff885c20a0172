//! Exact Gaussian process regression, noiseless by default.
//!
//! Inputs are mapped affinely to `[-1, 1]` per column and outputs are
//! standardized before fitting; everything stored inside [`TrainedGp`]
//! (Cholesky factor, `alpha`, jitter, likelihood) lives in that normalized
//! space, and predictions are mapped back to model units.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::kernels::{KernelParams, KernelSpec, NargpKernelParams, RbfArdParams};
use crate::optim::{self, LbfgsConfig};
use crate::sampling::stream_rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-hyperparameters outside `[-LOG_BOUND, LOG_BOUND]` are treated as infeasible.
const LOG_BOUND: f64 = 12.0;

/// Input/output pairs for one fidelity level.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub outputs: DVector<f64>,
    pub gradients: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DVector<f64>) -> Result<Self> {
        let d = Self { inputs, outputs, gradients: None };
        d.validate()?;
        Ok(d)
    }

    pub fn with_gradients(inputs: DMatrix<f64>, outputs: DVector<f64>, gradients: DMatrix<f64>) -> Result<Self> {
        let d = Self { inputs, outputs, gradients: Some(gradients) };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput("dataset has no rows".into()));
        }
        ensure!(
            self.inputs.nrows() == self.outputs.len(),
            "dataset has {} input rows but {} outputs",
            self.inputs.nrows(),
            self.outputs.len()
        );
        if let Some(g) = &self.gradients {
            ensure!(
                g.shape() == self.inputs.shape(),
                "gradient matrix shape {:?} does not match inputs {:?}",
                g.shape(),
                self.inputs.shape()
            );
        }
        ensure!(
            self.inputs.iter().chain(self.outputs.iter()).all(|v| v.is_finite()),
            "dataset contains non-finite values"
        );
        let rows = self.inputs.transpose();
        for i in 0..rows.ncols() {
            for j in 0..i {
                ensure!(
                    rows.column(i) != rows.column(j),
                    "duplicate input rows {} and {} make the noiseless covariance singular",
                    j,
                    i
                );
            }
        }
        Ok(())
    }
}

/// Per-column affine map `u = (x - center) / half_width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl InputMap {
    pub fn identity(dim: usize) -> Self {
        Self { center: vec![0.0; dim], half_width: vec![1.0; dim] }
    }

    /// Maps each `(lower, upper)` interval onto `[-1, 1]`.
    pub fn from_ranges(ranges: &[(f64, f64)]) -> Result<Self> {
        for (d, (lo, hi)) in ranges.iter().enumerate() {
            ensure!(lo < hi, "range {} has lower {} >= upper {}", d, lo, hi);
        }
        Ok(Self {
            center: ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
            half_width: ranges.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect(),
        })
    }

    /// Bounding box of the data; constant columns keep unit width.
    pub fn from_data(x: &DMatrix<f64>) -> Self {
        let (center, half_width) = x
            .column_iter()
            .map(|c| {
                let (lo, hi) = (c.min(), c.max());
                let hw = 0.5 * (hi - lo);
                (0.5 * (lo + hi), if hw > 0.0 { hw } else { 1.0 })
            })
            .unzip();
        Self { center, half_width }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    #[inline]
    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), c), h) in out.iter_mut().zip(x).zip(&self.center).zip(&self.half_width) {
            *o = (v - c) / h;
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.center[j]) / self.half_width[j])
    }
}

/// Output standardization `z = (y - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub mean: f64,
    pub scale: f64,
}

impl OutputMap {
    pub const IDENTITY: OutputMap = OutputMap { mean: 0.0, scale: 1.0 };

    pub fn standardizing(y: &DVector<f64>) -> Self {
        let n = y.len() as f64;
        let mean = y.mean();
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputScaling {
    /// Use inputs as given.
    None,
    /// Map the given per-column ranges onto `[-1, 1]`.
    Ranges(Vec<(f64, f64)>),
    /// Map the data bounding box onto `[-1, 1]`.
    DataBounds,
}

/// Diagonal regularization added before the Cholesky factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Jitter {
    /// Exactly this absolute value; factorization failure is an error.
    Fixed(f64),
    /// Start at `initial * mean(diag K)`, multiply by ten up to `max * mean(diag K)`.
    Relative { initial: f64, max: f64 },
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::Relative { initial: 1e-10, max: 1e-4 }
    }
}

/// Factorizes `k + jitter * I`, escalating the jitter per `policy`.
pub fn jittered_cholesky(k: &DMatrix<f64>, policy: Jitter) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    let attempt = |jitter: f64| {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        m.cholesky().map(|c| c.unpack())
    };
    match policy {
        Jitter::Fixed(j) => attempt(j).map(|l| (l, j)).ok_or(Error::SingularCovariance { jitter: j }),
        Jitter::Relative { initial, max } => {
            let scale = (k.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
            let mut jitter = initial * scale;
            let limit = max * scale * (1.0 + 1e-9);
            loop {
                if let Some(l) = attempt(jitter) {
                    return Ok((l, jitter));
                }
                jitter *= 10.0;
                if jitter > limit {
                    return Err(Error::SingularCovariance { jitter: jitter / 10.0 });
                }
            }
        }
    }
}

/// Observation model of the training outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// Outputs are exact; the posterior interpolates them.
    #[default]
    Noiseless,
    /// Homoscedastic Gaussian noise whose variance is fitted with the kernel.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub lbfgs: LbfgsConfig,
    pub seed: u64,
    pub standardize_outputs: bool,
    pub input_scaling: InputScaling,
    pub jitter: Jitter,
    #[serde(default)]
    pub noise: Noise,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            lbfgs: LbfgsConfig::default(),
            seed: 0,
            standardize_outputs: true,
            input_scaling: InputScaling::DataBounds,
            jitter: Jitter::default(),
            noise: Noise::Noiseless,
        }
    }
}

/// Log marginal likelihood and its gradient with respect to the
/// log-hyperparameters, evaluated on `data` exactly as given.
pub fn log_marginal_likelihood(params: &KernelParams, data: &Dataset, jitter: Jitter) -> Result<(f64, Vec<f64>)> {
    data.validate()?;
    params.validate()?;
    ensure!(
        data.dim() == params.input_dim(),
        "kernel expects {} input columns, dataset has {}",
        params.input_dim(),
        data.dim()
    );
    lml_with_grad(params, &data.inputs.transpose(), &data.outputs, None, jitter)
}

/// `inputs_t` holds one training point per column.
fn lml_with_grad(
    params: &KernelParams,
    inputs_t: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: Option<f64>,
    jitter: Jitter,
) -> Result<(f64, Vec<f64>)> {
    let n = inputs_t.ncols();
    let mut k = DMatrix::from_fn(n, n, |i, j| {
        params.eval_unchecked(inputs_t.column(i).as_slice(), inputs_t.column(j).as_slice())
    });
    if let Some(s2) = noise_variance {
        for i in 0..n {
            k[(i, i)] += s2;
        }
    }
    let (l, jitter_value) = jittered_cholesky(&k, jitter)?;
    let alpha = cholesky_solve(&l, y);
    let log_det_half: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    let value = -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n as f64 * LN_2PI;

    // d lml / d theta = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta)
    let mut w = cholesky_inverse(&l);
    w.ger(1.0, &alpha, &alpha, -1.0);
    let np = params.spec().n_params();
    let mut grad = vec![0.0; np];
    let mut buf = vec![0.0; np];
    let mut diag_grad = vec![0.0; np];
    for j in 0..n {
        let xj = inputs_t.column(j);
        for i in j..n {
            params.eval_with_grad(inputs_t.column(i).as_slice(), xj.as_slice(), &mut buf);
            let weight = if i == j { 0.5 * w[(i, j)] } else { w[(i, j)] };
            for (g, b) in grad.iter_mut().zip(&buf) {
                *g += weight * b;
            }
            if i == j {
                diag_grad.iter_mut().zip(&buf).for_each(|(d, b)| *d += b);
            }
        }
    }
    let half_trace_w = 0.5 * w.trace();
    if let Some(s2) = noise_variance {
        // d(s2 I)/d log s2 = s2 I on every diagonal entry.
        grad.push(half_trace_w * s2);
        diag_grad.push(n as f64 * s2);
    }
    // A relative jitter is c * mean(diag K) and moves with the hyperparameters.
    if let Jitter::Relative { .. } = jitter {
        let c = jitter_value / (k.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        for (g, d) in grad.iter_mut().zip(&diag_grad) {
            *g += half_trace_w * c * d / n as f64;
        }
    }
    Ok((value, grad))
}

fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    l.solve_lower_triangular_mut(&mut x);
    l.tr_solve_lower_triangular_mut(&mut x);
    x
}

fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut linv = DMatrix::identity(n, n);
    l.solve_lower_triangular_mut(&mut linv);
    linv.tr_mul(&linv)
}

/// Posterior mean and variance over a set of query points.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

/// A Gaussian process conditioned on its training data.
#[derive(Debug, Clone)]
pub struct TrainedGp {
    data: Dataset,
    params: KernelParams,
    input_map: InputMap,
    output_map: OutputMap,
    /// Normalized training inputs, one point per column.
    train_t: DMatrix<f64>,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    /// Observation noise variance, normalized output units; zero if noiseless.
    noise_variance: f64,
    jitter: f64,
    log_likelihood: f64,
}

impl TrainedGp {
    /// Conditions on `data` with fixed hyperparameters (no optimization).
    pub fn condition(
        data: Dataset,
        params: KernelParams,
        input_map: InputMap,
        output_map: OutputMap,
        jitter: Jitter,
    ) -> Result<Self> {
        Self::condition_noisy(data, params, input_map, output_map, 0.0, jitter)
    }

    /// As [`Self::condition`] with Gaussian observation noise of the given
    /// variance in normalized output units. Predictions stay those of the
    /// latent function.
    pub fn condition_noisy(
        data: Dataset,
        params: KernelParams,
        input_map: InputMap,
        output_map: OutputMap,
        noise_variance: f64,
        jitter: Jitter,
    ) -> Result<Self> {
        ensure!(noise_variance >= 0.0 && noise_variance.is_finite(), "noise variance {} is invalid", noise_variance);
        data.validate()?;
        params.validate()?;
        ensure!(
            data.dim() == params.input_dim() && input_map.dim() == data.dim(),
            "dimension mismatch: data {}, kernel {}, input map {}",
            data.dim(),
            params.input_dim(),
            input_map.dim()
        );
        let train_t = input_map.apply(&data.inputs).transpose();
        let y = data.outputs.map(|v| (v - output_map.mean) / output_map.scale);
        let n = data.len();
        let mut k = DMatrix::from_fn(n, n, |i, j| {
            params.eval_unchecked(train_t.column(i).as_slice(), train_t.column(j).as_slice())
        });
        if noise_variance > 0.0 {
            for i in 0..n {
                k[(i, i)] += noise_variance;
            }
        }
        let (chol, jitter) = jittered_cholesky(&k, jitter)?;
        let alpha = cholesky_solve(&chol, &y);
        let log_likelihood =
            -0.5 * y.dot(&alpha) - chol.diagonal().iter().map(|v| v.ln()).sum::<f64>() - 0.5 * n as f64 * LN_2PI;
        Ok(Self { data, params, input_map, output_map, train_t, chol, alpha, noise_variance, jitter, log_likelihood })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn input_map(&self) -> &InputMap {
        &self.input_map
    }

    pub fn output_map(&self) -> OutputMap {
        self.output_map
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Fitted observation noise variance in model output units.
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance * self.output_map.scale * self.output_map.scale
    }

    /// Log marginal likelihood in normalized space at the fitted hyperparameters.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn input_dim(&self) -> usize {
        self.data.dim()
    }

    /// Lower Cholesky factor of `K + jitter * I` (normalized space).
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub(crate) fn train_t(&self) -> &DMatrix<f64> {
        &self.train_t
    }

    fn check_queries(&self, x_star: &DMatrix<f64>) -> Result<()> {
        ensure!(
            x_star.ncols() == self.input_dim(),
            "queries have {} columns, model expects {}",
            x_star.ncols(),
            self.input_dim()
        );
        Ok(())
    }

    fn cross_kernel(&self, x_star: &DMatrix<f64>) -> DMatrix<f64> {
        let u_t = self.input_map.apply(x_star).transpose();
        // n x q
        DMatrix::from_fn(self.train_t.ncols(), u_t.ncols(), |i, j| {
            self.params.eval_unchecked(self.train_t.column(i).as_slice(), u_t.column(j).as_slice())
        })
    }

    /// Posterior mean only.
    pub fn predict_mean(&self, x_star: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_queries(x_star)?;
        let k_ns = self.cross_kernel(x_star);
        let om = self.output_map;
        Ok(k_ns.tr_mul(&self.alpha).map(|v| om.mean + om.scale * v))
    }

    /// Posterior mean and marginal variances.
    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        self.check_queries(x_star)?;
        let mut v = self.cross_kernel(x_star);
        let om = self.output_map;
        let mean = v.tr_mul(&self.alpha).map(|m| om.mean + om.scale * m);
        self.chol.solve_lower_triangular_mut(&mut v);
        let prior = self.params.prior_variance();
        let s2 = om.scale * om.scale;
        let variance =
            DVector::from_iterator(v.ncols(), v.column_iter().map(|c| (prior - c.norm_squared()).max(0.0) * s2));
        Ok(PredictiveDistribution { mean, variance, covariance: None })
    }

    /// Posterior mean with the full (symmetric) posterior covariance.
    pub fn predict_full(&self, x_star: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        self.check_queries(x_star)?;
        let mut v = self.cross_kernel(x_star);
        let om = self.output_map;
        let mean = v.tr_mul(&self.alpha).map(|m| om.mean + om.scale * m);
        self.chol.solve_lower_triangular_mut(&mut v);
        let u = self.input_map.apply(x_star);
        let mut cov = self.params.matrix(&u, &u)?;
        cov.gemm_tr(-1.0, &v, &v, 1.0);
        let s2 = om.scale * om.scale;
        cov = (&cov + cov.transpose()) * (0.5 * s2);
        let variance = cov.diagonal().map(|v| v.max(0.0));
        Ok(PredictiveDistribution { mean, variance, covariance: Some(cov) })
    }

    /// Joint posterior draws, one sample per row.
    pub fn sample_posterior<R: Rng + ?Sized>(
        &self,
        x_star: &DMatrix<f64>,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        ensure!(n_samples >= 1, "need at least one posterior sample");
        let pred = self.predict_full(x_star)?;
        let cov = pred.covariance.expect("full prediction carries a covariance");
        let q = cov.nrows();
        // The posterior covariance is often numerically rank deficient; the
        // jitter floor is tied to the prior scale rather than to its diagonal.
        let floor = 1e-12 * self.params.prior_variance() * self.output_map.scale.powi(2);
        let mut attempt = Err(Error::SingularCovariance { jitter: 0.0 });
        let mut jitter = floor;
        for _ in 0..8 {
            attempt = jittered_cholesky(&cov, Jitter::Fixed(jitter));
            if attempt.is_ok() {
                break;
            }
            jitter *= 10.0;
        }
        let (l, _) = attempt?;
        let z = DMatrix::from_fn(q, n_samples, |_, _| StandardNormal.sample(rng));
        let mut draws = l * z;
        for mut col in draws.column_iter_mut() {
            col += &pred.mean;
        }
        Ok(draws.transpose())
    }

    pub fn to_saved(&self) -> SavedGp {
        SavedGp {
            kernel: self.params.clone(),
            input_map: self.input_map.clone(),
            output_map: self.output_map,
            noise_variance: self.noise_variance,
            jitter: self.jitter,
            log_likelihood: self.log_likelihood,
            inputs: self.data.inputs.row_iter().map(|r| r.iter().copied().collect()).collect(),
            outputs: self.data.outputs.iter().copied().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_saved()).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let saved: SavedGp = serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        saved.restore()
    }
}

/// Serialized form of a [`TrainedGp`]: hyperparameters, normalization
/// constants and raw training data. The factorization is recomputed on load
/// with the stored jitter, which reproduces it bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedGp {
    pub kernel: KernelParams,
    pub input_map: InputMap,
    pub output_map: OutputMap,
    /// Normalized output units.
    #[serde(default)]
    pub noise_variance: f64,
    pub jitter: f64,
    pub log_likelihood: f64,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
}

impl SavedGp {
    pub fn restore(self) -> Result<TrainedGp> {
        let n = self.inputs.len();
        let m = self.inputs.first().map_or(0, Vec::len);
        ensure!(self.inputs.iter().all(|r| r.len() == m), "ragged input rows");
        let inputs = DMatrix::from_row_iterator(n, m, self.inputs.into_iter().flatten());
        let data = Dataset::new(inputs, DVector::from_vec(self.outputs))?;
        TrainedGp::condition_noisy(
            data,
            self.kernel,
            self.input_map,
            self.output_map,
            self.noise_variance,
            Jitter::Fixed(self.jitter),
        )
    }
}

fn initial_log_params(spec: KernelSpec, u: &DMatrix<f64>, y: &DVector<f64>) -> Vec<f64> {
    let var = {
        let mean = y.mean();
        let v = y.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / y.len() as f64;
        if v > 0.0 {
            v
        } else {
            1.0
        }
    };
    let half_ranges: Vec<f64> = u
        .column_iter()
        .map(|c| {
            let r = c.max() - c.min();
            if r > 0.0 {
                0.5 * r
            } else {
                1.0
            }
        })
        .collect();
    let params: KernelParams = match spec {
        KernelSpec::RbfArd { .. } => RbfArdParams { signal_variance: var, lengthscales: half_ranges }.into(),
        KernelSpec::Nargp { dim } => NargpKernelParams {
            rho: RbfArdParams { signal_variance: var, lengthscales: half_ranges[..dim].to_vec() },
            f: RbfArdParams { signal_variance: 1.0, lengthscales: vec![half_ranges[dim]] },
            delta: RbfArdParams { signal_variance: var, lengthscales: half_ranges[..dim].to_vec() },
        }
        .into(),
    };
    params.to_log()
}

/// Fits kernel hyperparameters by maximizing the log marginal likelihood with
/// L-BFGS from several starting points and conditions on the data at the best one.
pub fn fit(data: &Dataset, spec: KernelSpec, opts: &FitOptions) -> Result<TrainedGp> {
    data.validate()?;
    ensure!(
        spec.input_dim() == data.dim(),
        "kernel expects {} input columns, dataset has {}",
        spec.input_dim(),
        data.dim()
    );
    ensure!(opts.restarts >= 1, "at least one optimizer start is required");
    let input_map = match &opts.input_scaling {
        InputScaling::None => InputMap::identity(data.dim()),
        InputScaling::Ranges(r) => {
            ensure!(r.len() == data.dim(), "{} ranges for {} input columns", r.len(), data.dim());
            InputMap::from_ranges(r)?
        }
        InputScaling::DataBounds => InputMap::from_data(&data.inputs),
    };
    let output_map =
        if opts.standardize_outputs { OutputMap::standardizing(&data.outputs) } else { OutputMap::IDENTITY };
    let u = input_map.apply(&data.inputs);
    let u_t = u.transpose();
    let y = data.outputs.map(|v| (v - output_map.mean) / output_map.scale);

    let learn_noise = opts.noise == Noise::Learned;
    let n_kernel = spec.n_params();
    let mut base = initial_log_params(spec, &u, &y);
    if learn_noise {
        // One percent of the (normalized) output variance.
        let var = y.variance();
        base.push((1e-2 * if var > 0.0 { var } else { 1.0 }).ln());
    }
    let mut rng = stream_rng(opts.seed, "gp-fit-restarts");
    let perturb = Uniform::new_inclusive(-1.0, 1.0).expect("valid interval");

    let objective = |log: &[f64]| -> (f64, Vec<f64>) {
        let infeasible = (f64::INFINITY, vec![0.0; log.len()]);
        if log.iter().any(|v| v.abs() > LOG_BOUND) {
            return infeasible;
        }
        let Ok(params) = KernelParams::from_log(spec, &log[..n_kernel]) else { return infeasible };
        let noise = learn_noise.then(|| log[n_kernel].exp());
        match lml_with_grad(&params, &u_t, &y, noise, opts.jitter) {
            Ok((v, g)) => (-v, g.into_iter().map(|x| -x).collect()),
            Err(_) => infeasible,
        }
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut failures = Vec::new();
    for restart in 0..opts.restarts {
        let start: Vec<f64> =
            if restart == 0 { base.clone() } else { base.iter().map(|v| v + perturb.sample(&mut rng)).collect() };
        match optim::minimize(objective, start, &opts.lbfgs) {
            Some(m) => {
                log::debug!(
                    "restart {restart}: -lml {:.6} after {} iterations ({:?})",
                    m.value,
                    m.iterations,
                    m.termination
                );
                if best.as_ref().is_none_or(|(v, _)| m.value < *v) {
                    best = Some((m.value, m.x));
                }
            }
            None => {
                log::warn!("restart {restart}: likelihood not finite at the starting point, skipped");
                failures.push(restart);
            }
        }
    }
    let (_, log) = best.ok_or_else(|| {
        Error::AllRestartsFailed(format!("{} restarts, none had a finite likelihood", failures.len()))
    })?;
    let params = KernelParams::from_log(spec, &log[..n_kernel])?;
    let noise = if learn_noise { log[n_kernel].exp() } else { 0.0 };
    TrainedGp::condition_noisy(data.clone(), params, input_map, output_map, noise, opts.jitter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rbf(sv: f64, ls: &[f64]) -> KernelParams {
        RbfArdParams::new(sv, ls.to_vec()).unwrap().into()
    }

    fn fixed(data: Dataset, params: KernelParams, jitter: f64) -> TrainedGp {
        let dim = data.dim();
        TrainedGp::condition(data, params, InputMap::identity(dim), OutputMap::IDENTITY, Jitter::Fixed(jitter)).unwrap()
    }

    fn two_point() -> Dataset {
        Dataset::new(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), DVector::from_vec(vec![0.0, 1.0])).unwrap()
    }

    #[test]
    fn rejects_bad_datasets() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        assert!(Dataset::new(x, DVector::from_vec(vec![1.0, 2.0])).is_err());
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(Dataset::new(x, DVector::from_vec(vec![1.0])).is_err());
        assert!(matches!(Dataset::new(DMatrix::zeros(0, 2), DVector::zeros(0)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn lml_scalar_cases() {
        let d = Dataset::new(DMatrix::from_row_slice(1, 1, &[0.3]), DVector::from_vec(vec![0.0])).unwrap();
        let (v, _) = log_marginal_likelihood(&rbf(1.0, &[1.0]), &d, Jitter::Fixed(0.0)).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
        assert!((v + 0.91894).abs() < 1e-5);

        let (y0, s2) = (1.7, 2.3);
        let d = Dataset::new(DMatrix::from_row_slice(1, 1, &[0.3]), DVector::from_vec(vec![y0])).unwrap();
        let (v, _) = log_marginal_likelihood(&rbf(s2, &[1.0]), &d, Jitter::Fixed(0.0)).unwrap();
        let expected = -y0 * y0 / (2.0 * s2) - 0.5 * s2.ln() - 0.5 * LN_2PI;
        assert!((v - expected).abs() < 1e-14);
    }

    fn fd_lml_check(params: &KernelParams, data: &Dataset) -> f64 {
        let jitter = Jitter::Fixed(1e-6);
        let (_, g) = log_marginal_likelihood(params, data, jitter).unwrap();
        let log = params.to_log();
        let h = 1e-6;
        let fd: Vec<f64> = (0..log.len())
            .map(|k| {
                let mut up = log.clone();
                let mut dn = log.clone();
                up[k] += h;
                dn[k] -= h;
                let f = |l: &[f64]| {
                    log_marginal_likelihood(&KernelParams::from_log(params.spec(), l).unwrap(), data, jitter).unwrap().0
                };
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::<f64>::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let d = Dataset::new(x, y).unwrap();
        assert!(fd_lml_check(&rbf(0.9, &[0.7, 1.3]), &d) < 1e-5);
    }

    #[test]
    fn two_point_posterior_matches_explicit_inverse() {
        let gp = fixed(two_point(), rbf(1.0, &[1.0]), 0.0);
        let e = (-0.5f64).exp();
        // K = [[1, e], [e, 1]], K^-1 = [[1, -e], [-e, 1]] / (1 - e^2)
        let det = 1.0 - e * e;
        let kinv_y = [-e / det, 1.0 / det];
        let ks = (-0.125f64).exp();
        let expected_mean = ks * kinv_y[0] + ks * kinv_y[1];
        let expected_var = 1.0 - (ks * ks * (1.0 - e) * 2.0) / det;
        let p = gp.predict(&DMatrix::from_row_slice(1, 1, &[0.5])).unwrap();
        assert!((p.mean[0] - expected_mean).abs() < 1e-12, "{} vs {}", p.mean[0], expected_mean);
        assert!((p.variance[0] - expected_var).abs() < 1e-12);
    }

    #[test]
    fn interpolates_training_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::<f64>::from_fn(15, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(15, |i, _| (2.0 * x[(i, 0)]).sin() + x[(i, 1)] * x[(i, 2)]);
        let d = Dataset::new(x.clone(), y.clone()).unwrap();
        let gp = fixed(d, rbf(1.0, &[0.8, 0.8, 0.8]), 1e-10);
        let p = gp.predict(&x).unwrap();
        for i in 0..15 {
            assert!((p.mean[i] - y[i]).abs() < 1e-6);
            assert!(p.variance[i] < 1e-6);
        }
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let gp = fixed(two_point(), rbf(1.4, &[0.5]), 0.0);
        let p = gp.predict(&DMatrix::from_row_slice(1, 1, &[1e3])).unwrap();
        assert_eq!(p.mean[0], 0.0);
        assert_eq!(p.variance[0], 1.4);
    }

    #[test]
    fn predict_dimension_mismatch() {
        let gp = fixed(two_point(), rbf(1.0, &[1.0]), 0.0);
        assert!(matches!(gp.predict(&DMatrix::zeros(3, 2)), Err(Error::Contract(_))));
    }

    #[test]
    fn cholesky_and_alpha_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::<f64>::from_fn(20, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(20, |i, _| x[(i, 0)].exp() - x[(i, 1)]);
        let gp = fixed(Dataset::new(x.clone(), y.clone()).unwrap(), rbf(1.0, &[0.5, 0.5]), 1e-10);
        let mut k = gp.params().matrix(&x, &x).unwrap();
        for i in 0..20 {
            k[(i, i)] += gp.jitter();
        }
        let l = gp.cholesky_factor();
        assert!((l * l.transpose() - &k).norm() / k.norm() < 1e-10);
        assert!((&k * gp.alpha() - &y).norm() < 1e-8 * y.norm());
    }

    #[test]
    fn jitter_escalates_for_duplicate_like_points() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1e-9, 1.0]);
        let k = rbf(1.0, &[1.0]).matrix(&x, &x).unwrap();
        let (_, j) = jittered_cholesky(&k, Jitter::default()).unwrap();
        assert!(j >= 1e-10);
        assert!(jittered_cholesky(&DMatrix::from_element(2, 2, -1.0), Jitter::default()).is_err());
    }

    #[test]
    fn constant_outputs_give_constant_mean() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.5, 0.2, 0.9, 0.7, 0.1]);
        let d = Dataset::new(x, DVector::from_element(4, 3.25)).unwrap();
        let gp = fit(&d, KernelSpec::RbfArd { dim: 2 }, &FitOptions { restarts: 2, ..Default::default() }).unwrap();
        let q = DMatrix::from_row_slice(3, 2, &[0.3, 0.3, -4.0, 2.0, 0.9, 0.9]);
        for m in gp.predict_mean(&q).unwrap().iter() {
            assert!((m - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_beats_true_hyperparameters_on_gp_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(30, 1, |i, _| -1.0 + 2.0 * (i as f64 + rng.random::<f64>()) / 30.0);
        let truth = rbf(1.0, &[0.3]);
        let k = truth.matrix(&x, &x).unwrap();
        let (l, _) = jittered_cholesky(&k, Jitter::Fixed(1e-8)).unwrap();
        let z = DVector::from_fn(30, |_, _| StandardNormal.sample(&mut rng));
        let y = l * z;
        let d = Dataset::new(x, y).unwrap();
        let opts = FitOptions {
            standardize_outputs: false,
            input_scaling: InputScaling::None,
            jitter: Jitter::Fixed(1e-8),
            ..Default::default()
        };
        let gp = fit(&d, KernelSpec::RbfArd { dim: 1 }, &opts).unwrap();
        let (at_truth, _) = log_marginal_likelihood(&truth, &d, Jitter::Fixed(1e-8)).unwrap();
        assert!(gp.log_likelihood() >= at_truth - 1e-9, "{} < {}", gp.log_likelihood(), at_truth);
    }

    #[test]
    fn fit_is_invariant_to_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::<f64>::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(12, |i, _| (1.5 * x[(i, 0)]).sin() + 0.3 * x[(i, 1)]);
        let perm: Vec<usize> = (0..12).rev().collect();
        let xp = DMatrix::from_fn(12, 2, |i, j| x[(perm[i], j)]);
        let yp = DVector::from_fn(12, |i, _| y[perm[i]]);
        let opts = FitOptions { restarts: 3, ..Default::default() };
        let spec = KernelSpec::RbfArd { dim: 2 };
        let a = fit(&Dataset::new(x, y).unwrap(), spec, &opts).unwrap();
        let b = fit(&Dataset::new(xp, yp).unwrap(), spec, &opts).unwrap();
        // The optimum is flat along the long lengthscale, so compare the
        // objective and the fitted function rather than raw hyperparameters.
        assert!((a.log_likelihood() - b.log_likelihood()).abs() < 1e-6 * a.log_likelihood().abs().max(1.0));
        let q = DMatrix::<f64>::from_fn(20, 2, |_, _| rng.random_range(-1.0..1.0));
        let (pa, pb) = (a.predict_mean(&q).unwrap(), b.predict_mean(&q).unwrap());
        assert!((pa - pb).amax() < 1e-4);
    }

    #[test]
    fn full_covariance_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = DMatrix::<f64>::from_fn(10, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(10, |i, _| x[(i, 0)] - x[(i, 1)].powi(2));
        let gp = fixed(Dataset::new(x, y).unwrap(), rbf(1.0, &[0.6, 0.6]), 1e-10);
        let q = DMatrix::<f64>::from_fn(8, 2, |_, _| rng.random_range(-1.5..1.5));
        let cov = gp.predict_full(&q).unwrap().covariance.unwrap();
        assert!((&cov - cov.transpose()).amax() < 1e-10);
        let min = (&cov + DMatrix::identity(8, 8) * 1e-10).symmetric_eigenvalues().min();
        assert!(min >= -1e-12);
    }

    #[test]
    fn posterior_samples() {
        let gp = fixed(two_point(), rbf(1.0, &[1.0]), 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let at_train = gp.sample_posterior(&DMatrix::from_row_slice(1, 1, &[1.0]), 200, &mut rng).unwrap();
        assert!(at_train.iter().all(|v| (v - 1.0).abs() < 1e-3));

        let far = DMatrix::from_row_slice(1, 1, &[2.5]);
        let draws = gp.sample_posterior(&far, 10_000, &mut rng).unwrap();
        let p = gp.predict(&far).unwrap();
        let mean = draws.mean();
        let se = (p.variance[0] / 10_000.0).sqrt();
        assert!((mean - p.mean[0]).abs() < 4.0 * se);

        let q = DMatrix::from_row_slice(3, 1, &[0.2, 0.5, 1.7]);
        let a = gp.sample_posterior(&q, 5, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = gp.sample_posterior(&q, 5, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert!(gp.sample_posterior(&q, 0, &mut rng).is_err());
    }

    #[test]
    fn json_roundtrip_reproduces_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = DMatrix::<f64>::from_fn(9, 2, |_, _| rng.random_range(0.0..5.0));
        let y = DVector::from_fn(9, |i, _| x[(i, 0)].sqrt() * x[(i, 1)]);
        let gp = fit(&Dataset::new(x, y).unwrap(), KernelSpec::RbfArd { dim: 2 }, &FitOptions::default()).unwrap();
        let back = TrainedGp::from_json(&gp.to_json().unwrap()).unwrap();
        let q = DMatrix::<f64>::from_fn(4, 2, |_, _| rng.random_range(0.0..5.0));
        assert_eq!(gp.predict(&q).unwrap(), back.predict(&q).unwrap());
    }

    #[test]
    fn noisy_lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = DMatrix::<f64>::from_fn(15, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(15, |i, _| (2.0 * x[(i, 0)]).sin() + 0.1 * rng.random_range(-1.0..1.0));
        let x_t = x.transpose();
        let params = rbf(0.8, &[0.5, 1.3]);
        let eval = |log: &[f64]| {
            let p = KernelParams::from_log(params.spec(), &log[..3]).unwrap();
            lml_with_grad(&p, &x_t, &y, Some(log[3].exp()), Jitter::default()).unwrap()
        };
        let mut log = params.to_log();
        log.push((0.02f64).ln());
        let (_, g) = eval(&log);
        assert_eq!(g.len(), 4);
        let h = 1e-6;
        for k in 0..4 {
            let (mut up, mut dn) = (log.clone(), log.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * g[k].abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn learned_noise_smooths_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 60;
        let x = DMatrix::<f64>::from_fn(n, 1, |i, _| -1.0 + 2.0 * (i as f64 + rng.random::<f64>()) / n as f64);
        let noise: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.1 * z
            })
            .collect();
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].powi(2) + noise[i]);
        let data = Dataset::new(x.clone(), y.clone()).unwrap();
        let noisy =
            fit(&data, KernelSpec::RbfArd { dim: 1 }, &FitOptions { noise: Noise::Learned, ..Default::default() })
                .unwrap();
        let s2 = noisy.noise_variance();
        assert!(s2 > 0.003 && s2 < 0.03, "noise variance {s2}");
        let q = DMatrix::from_fn(41, 1, |i, _| -0.95 + 1.9 * i as f64 / 40.0);
        let p = noisy.predict(&q).unwrap();
        let err = q.iter().zip(p.mean.iter()).map(|(u, m)| (u * u - m).abs()).sum::<f64>() / 41.0;
        assert!(err < 0.04, "mean deviation from the clean curve {err}");
        // Latent predictions: not pinned to the noisy training outputs.
        let at_train = noisy.predict_mean(&x).unwrap();
        assert!((at_train - &y).amax() > 0.05);

        let exact = fit(&data, KernelSpec::RbfArd { dim: 1 }, &FitOptions::default()).unwrap();
        assert_eq!(exact.noise_variance(), 0.0);
        let back = TrainedGp::from_json(&noisy.to_json().unwrap()).unwrap();
        assert_eq!(back.predict(&q).unwrap(), p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lml_gradient_property(
            n in 2usize..=10,
            m in 1usize..=8,
            seed in any::<u64>(),
            log_sv in -1.0f64..1.0,
            log_l in -2.3f64..-1.2,
        ) {
            // Stratified columns keep points at least 1/n apart, so the
            // kernel matrix stays well conditioned for finite differences.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = DMatrix::<f64>::zeros(n, m);
            for j in 0..m {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                for (i, p) in perm.iter().enumerate() {
                    x[(i, j)] = -1.0 + 2.0 * (*p as f64 + 0.25 + 0.5 * rng.random::<f64>()) / n as f64;
                }
            }
            let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let ls: Vec<f64> = (0..m).map(|_| (log_l + rng.random_range(-0.3..0.3)).exp()).collect();
            let d = Dataset::new(x, y).unwrap();
            prop_assert!(fd_lml_check(&rbf(log_sv.exp(), &ls), &d) < 1e-5);
        }

        #[test]
        fn variance_bounded_by_prior(seed in any::<u64>(), sv in 0.2f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::<f64>::from_fn(8, 2, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
            let gp = fixed(Dataset::new(x, y).unwrap(), rbf(sv, &[0.5, 0.9]), 1e-10);
            let q = DMatrix::<f64>::from_fn(20, 2, |_, _| rng.random_range(-3.0..3.0));
            let p = gp.predict(&q).unwrap();
            prop_assert!(p.variance.iter().all(|v| *v >= 0.0 && *v <= sv + 1e-8));
        }
    }
}
