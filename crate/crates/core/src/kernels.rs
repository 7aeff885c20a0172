//! Covariance functions: ARD squared-exponential and the NARGP composite
//! kernel `k = k_rho(x, x') * k_f(f, f') + k_delta(x, x')`.
//!
//! Hyperparameters are optimized in log space. The flattened log-parameter
//! layout is `[log sv, log l_1 .. log l_m]` for an ARD kernel and the
//! concatenation `rho | f | delta` of three such blocks for the composite
//! kernel, where the `f` block has a single lengthscale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Parameters of an ARD radial basis function kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfArdParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl RbfArdParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let p = Self { signal_variance, lengthscales };
        p.validate()?;
        ensure!(p.signal_variance > 0.0, "signal variance must be positive, got {}", signal_variance);
        Ok(p)
    }

    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(signal_variance, vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    // A zero signal variance is accepted here so that a factor can be switched
    // off explicitly; the optimizer never produces one.
    fn validate(&self) -> Result<()> {
        ensure!(!self.lengthscales.is_empty(), "ARD kernel needs at least one lengthscale");
        ensure!(
            self.signal_variance.is_finite() && self.signal_variance >= 0.0,
            "signal variance must be finite and non-negative, got {}",
            self.signal_variance
        );
        ensure!(
            self.lengthscales.iter().all(|l| l.is_finite() && *l > 0.0),
            "lengthscales must be finite and positive: {:?}",
            self.lengthscales
        );
        Ok(())
    }

    #[inline]
    fn scaled_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let t = (x - y) / l;
                t * t
            })
            .sum()
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        self.signal_variance * (-0.5 * self.scaled_sq_dist(a, b)).exp()
    }

    /// Writes `dk/dlog(theta)` into `out` (length `1 + dim`) and returns `k`.
    #[inline]
    fn eval_with_grad(&self, a: &[f64], b: &[f64], out: &mut [f64]) -> f64 {
        let mut r2 = 0.0;
        for (d, ((x, y), l)) in a.iter().zip(b).zip(&self.lengthscales).enumerate() {
            let t = (x - y) / l;
            let t2 = t * t;
            out[1 + d] = t2;
            r2 += t2;
        }
        let k = self.signal_variance * (-0.5 * r2).exp();
        out[0] = k;
        for g in &mut out[1..=self.dim()] {
            *g *= k;
        }
        k
    }

    fn push_log(&self, out: &mut Vec<f64>) {
        out.push(self.signal_variance.ln());
        out.extend(self.lengthscales.iter().map(|l| l.ln()));
    }

    fn from_log(log: &[f64]) -> Self {
        Self { signal_variance: log[0].exp(), lengthscales: log[1..].iter().map(|v| v.exp()).collect() }
    }
}

/// Parameters of the NARGP composite kernel over augmented inputs `(x, f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NargpKernelParams {
    /// Scale kernel over the physical inputs.
    pub rho: RbfArdParams,
    /// Kernel over the previous-level posterior value (one lengthscale).
    pub f: RbfArdParams,
    /// Discrepancy kernel over the physical inputs.
    pub delta: RbfArdParams,
}

impl NargpKernelParams {
    pub fn dim(&self) -> usize {
        self.rho.dim()
    }

    fn validate(&self) -> Result<()> {
        self.rho.validate()?;
        self.f.validate()?;
        self.delta.validate()?;
        ensure!(self.f.dim() == 1, "previous-level kernel must be one-dimensional, got {}", self.f.dim());
        ensure!(
            self.rho.dim() == self.delta.dim(),
            "rho and delta kernels disagree on dimension ({} vs {})",
            self.rho.dim(),
            self.delta.dim()
        );
        Ok(())
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let m = self.dim();
        self.rho.eval_unchecked(&a[..m], &b[..m]) * self.f.eval_unchecked(&a[m..], &b[m..])
            + self.delta.eval_unchecked(&a[..m], &b[..m])
    }
}

/// Kernel family and the physical input dimension it is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    RbfArd {
        dim: usize,
    },
    /// Composite kernel; the model input is `dim + 1` wide (last column is `f`).
    Nargp {
        dim: usize,
    },
}

impl KernelSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            KernelSpec::RbfArd { dim } => dim,
            KernelSpec::Nargp { dim } => dim + 1,
        }
    }

    pub fn n_params(&self) -> usize {
        match *self {
            KernelSpec::RbfArd { dim } => 1 + dim,
            KernelSpec::Nargp { dim } => 2 * (1 + dim) + 2,
        }
    }
}

/// Concrete kernel hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelParams {
    RbfArd(RbfArdParams),
    Nargp(NargpKernelParams),
}

impl KernelParams {
    pub fn spec(&self) -> KernelSpec {
        match self {
            KernelParams::RbfArd(p) => KernelSpec::RbfArd { dim: p.dim() },
            KernelParams::Nargp(p) => KernelSpec::Nargp { dim: p.dim() },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec().input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelParams::RbfArd(p) => p.validate(),
            KernelParams::Nargp(p) => p.validate(),
        }
    }

    /// Prior variance `k(x, x)`; constant because every kernel here is stationary.
    pub fn prior_variance(&self) -> f64 {
        match self {
            KernelParams::RbfArd(p) => p.signal_variance,
            KernelParams::Nargp(p) => p.rho.signal_variance * p.f.signal_variance + p.delta.signal_variance,
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelParams::RbfArd(p) => p.eval_unchecked(a, b),
            KernelParams::Nargp(p) => p.eval_unchecked(a, b),
        }
    }

    /// Checked evaluation on two model-space input vectors.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let d = self.input_dim();
        ensure!(
            a.len() == d && b.len() == d,
            "kernel expects inputs of dimension {}, got {} and {}",
            d,
            a.len(),
            b.len()
        );
        Ok(self.eval_unchecked(a, b))
    }

    /// Writes `dk/dlog(theta)` for one input pair into `out` and returns `k`.
    pub(crate) fn eval_with_grad(&self, a: &[f64], b: &[f64], out: &mut [f64]) -> f64 {
        match self {
            KernelParams::RbfArd(p) => p.eval_with_grad(a, b, out),
            KernelParams::Nargp(p) => {
                let m = p.dim();
                let (g_rho, rest) = out.split_at_mut(1 + m);
                let (g_f, g_delta) = rest.split_at_mut(2);
                let k_rho = p.rho.eval_with_grad(&a[..m], &b[..m], g_rho);
                let k_f = p.f.eval_with_grad(&a[m..], &b[m..], g_f);
                let k_delta = p.delta.eval_with_grad(&a[..m], &b[..m], g_delta);
                g_rho.iter_mut().for_each(|g| *g *= k_f);
                g_f.iter_mut().for_each(|g| *g *= k_rho);
                k_rho * k_f + k_delta
            }
        }
    }

    pub fn to_log(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec().n_params());
        match self {
            KernelParams::RbfArd(p) => p.push_log(&mut out),
            KernelParams::Nargp(p) => {
                p.rho.push_log(&mut out);
                p.f.push_log(&mut out);
                p.delta.push_log(&mut out);
            }
        }
        out
    }

    pub fn from_log(spec: KernelSpec, log: &[f64]) -> Result<Self> {
        ensure!(log.len() == spec.n_params(), "expected {} log-parameters, got {}", spec.n_params(), log.len());
        let params = match spec {
            KernelSpec::RbfArd { .. } => KernelParams::RbfArd(RbfArdParams::from_log(log)),
            KernelSpec::Nargp { dim } => KernelParams::Nargp(NargpKernelParams {
                rho: RbfArdParams::from_log(&log[..1 + dim]),
                f: RbfArdParams::from_log(&log[1 + dim..3 + dim]),
                delta: RbfArdParams::from_log(&log[3 + dim..]),
            }),
        };
        params.validate()?;
        Ok(params)
    }

    /// Covariance matrix between the rows of `x` and the rows of `x2`.
    pub fn matrix(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.input_dim();
        ensure!(
            x.ncols() == d && x2.ncols() == d,
            "kernel bound to dimension {} but inputs have {} and {} columns",
            d,
            x.ncols(),
            x2.ncols()
        );
        kernel_matrix(x, x2, |a, b| self.eval_unchecked(a, b))
    }
}

/// ARD squared-exponential covariance between two points.
pub fn rbf_ard(x: &[f64], x2: &[f64], p: &RbfArdParams) -> Result<f64> {
    p.validate()?;
    ensure!(
        x.len() == p.dim() && x2.len() == p.dim(),
        "rbf_ard: inputs have dimensions {} and {}, kernel has {}",
        x.len(),
        x2.len(),
        p.dim()
    );
    Ok(p.eval_unchecked(x, x2))
}

/// NARGP composite covariance between `(x, f1)` and `(x2, f2)`.
pub fn nargp_kernel(x: &[f64], x2: &[f64], f1: f64, f2: f64, p: &NargpKernelParams) -> Result<f64> {
    p.validate()?;
    let m = p.dim();
    ensure!(
        x.len() == m && x2.len() == m,
        "nargp_kernel: inputs have dimensions {} and {}, kernel has {}",
        x.len(),
        x2.len(),
        m
    );
    Ok(p.rho.eval_unchecked(x, x2) * p.f.eval_unchecked(&[f1], &[f2]) + p.delta.eval_unchecked(x, x2))
}

/// Evaluates `kernel` on every pair of rows of `x` and `x2`.
pub fn kernel_matrix<F>(x: &DMatrix<f64>, x2: &DMatrix<f64>, kernel: F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    ensure!(x.ncols() == x2.ncols(), "kernel_matrix: column dimensions differ ({} vs {})", x.ncols(), x2.ncols());
    // Columns of the transposes are the rows, stored contiguously.
    let xt = x.transpose();
    let x2t = x2.transpose();
    Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| kernel(xt.column(i).as_slice(), x2t.column(j).as_slice())))
}

/// `dK/dlog(theta_k)` for every hyperparameter, one `n x n` matrix each.
pub fn kernel_param_gradients(x: &DMatrix<f64>, params: &KernelParams) -> Result<Vec<DMatrix<f64>>> {
    params.validate()?;
    let spec = params.spec();
    ensure!(
        x.ncols() == spec.input_dim(),
        "kernel_param_gradients: inputs have {} columns, kernel expects {}",
        x.ncols(),
        spec.input_dim()
    );
    let n = x.nrows();
    let np = spec.n_params();
    let xt = x.transpose();
    let mut grads = vec![DMatrix::zeros(n, n); np];
    let mut buf = vec![0.0; np];
    for i in 0..n {
        for j in 0..=i {
            params.eval_with_grad(xt.column(i).as_slice(), xt.column(j).as_slice(), &mut buf);
            for (g, v) in grads.iter_mut().zip(&buf) {
                g[(i, j)] = *v;
                g[(j, i)] = *v;
            }
        }
    }
    Ok(grads)
}

impl From<RbfArdParams> for KernelParams {
    fn from(p: RbfArdParams) -> Self {
        KernelParams::RbfArd(p)
    }
}

impl From<NargpKernelParams> for KernelParams {
    fn from(p: NargpKernelParams) -> Self {
        KernelParams::Nargp(p)
    }
}

impl TryFrom<&KernelParams> for NargpKernelParams {
    type Error = Error;

    fn try_from(p: &KernelParams) -> Result<Self> {
        match p {
            KernelParams::Nargp(n) => Ok(n.clone()),
            KernelParams::RbfArd(_) => Err(Error::Contract("expected NARGP kernel parameters".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn unit(dim: usize) -> RbfArdParams {
        RbfArdParams::isotropic(1.0, 1.0, dim).unwrap()
    }

    #[test]
    fn rbf_zero_distance_is_signal_variance() {
        let p = RbfArdParams::new(2.5, vec![0.3, 7.0]).unwrap();
        assert_eq!(rbf_ard(&[0.4, -1.0], &[0.4, -1.0], &p).unwrap(), 2.5);
    }

    #[test]
    fn rbf_closed_form_values() {
        let v = rbf_ard(&[0.0], &[1.0], &unit(1)).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
        let p = RbfArdParams::new(1.0, vec![3.0, 4.0]).unwrap();
        let v = rbf_ard(&[0.0, 0.0], &[3.0, 4.0], &p).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rbf_dimension_mismatch() {
        assert!(matches!(rbf_ard(&[0.0, 1.0], &[1.0], &unit(2)), Err(Error::Contract(_))));
        assert!(matches!(rbf_ard(&[0.0, 1.0], &[1.0, 2.0], &unit(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_non_positive_lengthscale() {
        assert!(RbfArdParams::new(1.0, vec![0.0]).is_err());
        assert!(RbfArdParams::new(0.0, vec![1.0]).is_err());
    }

    fn nargp_unit(dim: usize) -> NargpKernelParams {
        NargpKernelParams { rho: unit(dim), f: unit(1), delta: unit(dim) }
    }

    #[test]
    fn nargp_closed_form_values() {
        let p = nargp_unit(1);
        assert_eq!(nargp_kernel(&[0.2], &[0.2], 3.0, 3.0, &p).unwrap(), 2.0);
        let v = nargp_kernel(&[0.0], &[1.0], 0.5, 0.5, &p).unwrap();
        assert!((v - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 1.21306).abs() < 1e-5);
    }

    #[test]
    fn nargp_far_previous_level_leaves_delta() {
        let mut p = nargp_unit(2);
        p.delta.signal_variance = 0.7;
        let v = nargp_kernel(&[0.1, 0.2], &[0.1, 0.2], 0.0, 1e3, &p).unwrap();
        assert_eq!(v, 0.7);
    }

    #[test]
    fn nargp_f_shutoff_is_delta_kernel() {
        let mut p = nargp_unit(3);
        p.f.signal_variance = 0.0;
        p.delta.lengthscales = vec![0.4, 1.3, 2.0];
        let (a, b) = ([0.1, -0.5, 0.9], [0.7, 0.2, -0.3]);
        let v = nargp_kernel(&a, &b, 0.3, -1.2, &p).unwrap();
        assert_eq!(v, rbf_ard(&a, &b, &p.delta).unwrap());
    }

    #[test]
    fn matrix_shapes_and_degenerate_cases() {
        let k = KernelParams::RbfArd(RbfArdParams::new(1.7, vec![1.0]).unwrap());
        let single = DMatrix::from_row_slice(1, 1, &[0.3]);
        assert_eq!(k.matrix(&single, &single).unwrap()[(0, 0)], 1.7);

        let dup = DMatrix::from_row_slice(3, 1, &[0.3, 0.3, 0.3]);
        let m = k.matrix(&dup, &dup).unwrap();
        assert!(m.iter().all(|v| *v == 1.7));

        let two = DMatrix::from_row_slice(2, 1, &[0.0, 0.5]);
        let k = KernelParams::RbfArd(RbfArdParams::new(1.0, vec![0.25]).unwrap());
        let m = k.matrix(&two, &two).unwrap();
        assert!((m[(0, 1)] - (-0.5f64 * 4.0).exp()).abs() < 1e-15);
        assert_eq!(m[(0, 1)], m[(1, 0)]);

        let wrong = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(k.matrix(&wrong, &wrong).is_err());
    }

    #[test]
    fn log_sv_gradient_equals_kernel_matrix() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.1, 0.3, -0.5, 1.0, 0.2, -0.7, 0.9]);
        let k = KernelParams::RbfArd(RbfArdParams::new(1.3, vec![0.5, 2.0]).unwrap());
        let g = kernel_param_gradients(&x, &k).unwrap();
        let kx = k.matrix(&x, &x).unwrap();
        assert!((&g[0] - &kx).norm() < 1e-15);
    }

    #[test]
    fn single_point_has_no_lengthscale_gradient() {
        let x = DMatrix::from_row_slice(1, 3, &[0.2, 0.4, 0.6]);
        let k = KernelParams::RbfArd(RbfArdParams::new(1.0, vec![0.5, 1.0, 2.0]).unwrap());
        let g = kernel_param_gradients(&x, &k).unwrap();
        assert!(g[1..].iter().all(|m| m[(0, 0)] == 0.0));
    }

    // Central differences in log-space, step 1e-6.
    fn fd_check(x: &DMatrix<f64>, params: &KernelParams, tol: f64) {
        let spec = params.spec();
        let log = params.to_log();
        let analytic = kernel_param_gradients(x, params).unwrap();
        let h = 1e-6;
        for k in 0..log.len() {
            let mut up = log.clone();
            let mut dn = log.clone();
            up[k] += h;
            dn[k] -= h;
            let kp = KernelParams::from_log(spec, &up).unwrap().matrix(x, x).unwrap();
            let km = KernelParams::from_log(spec, &dn).unwrap().matrix(x, x).unwrap();
            let fd = (kp - km) / (2.0 * h);
            let err = (&fd - &analytic[k]).norm() / analytic[k].norm().max(1e-12);
            assert!(err < tol, "param {k}: relative error {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_1d() {
        let x = DMatrix::from_row_slice(5, 1, &[-0.9, -0.31, 0.05, 0.44, 0.87]);
        let k = KernelParams::RbfArd(RbfArdParams::new(0.8, vec![0.6]).unwrap());
        fd_check(&x, &k, 1e-6);
    }

    #[test]
    fn nargp_gradients_match_finite_differences() {
        let x = DMatrix::from_row_slice(4, 3, &[0.1, -0.2, 0.5, 0.7, 0.3, -0.1, -0.4, 0.9, 1.2, 0.0, 0.0, 0.3]);
        let p = NargpKernelParams {
            rho: RbfArdParams::new(1.2, vec![0.8, 1.5]).unwrap(),
            f: RbfArdParams::new(0.9, vec![0.7]).unwrap(),
            delta: RbfArdParams::new(0.3, vec![0.5, 0.6]).unwrap(),
        };
        fd_check(&x, &KernelParams::Nargp(p), 1e-6);
    }

    #[test]
    fn log_roundtrip() {
        let p = KernelParams::Nargp(NargpKernelParams {
            rho: RbfArdParams::new(1.2, vec![0.8, 1.5]).unwrap(),
            f: RbfArdParams::new(0.9, vec![0.7]).unwrap(),
            delta: RbfArdParams::new(0.3, vec![0.5, 0.6]).unwrap(),
        });
        let back = KernelParams::from_log(p.spec(), &p.to_log()).unwrap();
        assert_eq!(back.to_log(), p.to_log());
        assert_eq!(p.spec().n_params(), 8);
    }

    fn rbf_strategy(dim: usize) -> impl Strategy<Value = RbfArdParams> {
        (-2.0f64..2.0, proptest::collection::vec(-2.0f64..1.5, dim)).prop_map(|(sv, ls)| RbfArdParams {
            signal_variance: sv.exp(),
            lengthscales: ls.into_iter().map(f64::exp).collect(),
        })
    }

    fn points(n: usize, dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-1.0f64..1.0, n * dim).prop_map(move |v| DMatrix::from_row_slice(n, dim, &v))
    }

    proptest! {
        #[test]
        fn symmetric_for_all_kernels(
            p in rbf_strategy(3),
            f in rbf_strategy(1),
            d in rbf_strategy(3),
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let r = KernelParams::RbfArd(p.clone());
            prop_assert_eq!(r.eval(&a[..3], &b[..3]).unwrap(), r.eval(&b[..3], &a[..3]).unwrap());
            let n = KernelParams::Nargp(NargpKernelParams { rho: p, f, delta: d });
            prop_assert_eq!(n.eval(&a, &b).unwrap(), n.eval(&b, &a).unwrap());
        }

        #[test]
        fn psd_with_jitter(p in rbf_strategy(2), x in points(12, 2)) {
            let k = KernelParams::RbfArd(p);
            let m = k.matrix(&x, &x).unwrap();
            let jitter = 1e-10 * k.prior_variance();
            let shifted = &m + DMatrix::identity(12, 12) * jitter;
            let min = shifted.symmetric_eigenvalues().min();
            // Eigenvalue roundoff scales with the matrix norm.
            prop_assert!(min >= -1e-12 * m.norm(), "min eigenvalue {}", min);
        }

        #[test]
        fn random_gradients_match_finite_differences(p in rbf_strategy(2), x in points(6, 2)) {
            let k = KernelParams::RbfArd(p);
            let log = k.to_log();
            let analytic = kernel_param_gradients(&x, &k).unwrap();
            let h = 1e-6;
            for i in 0..log.len() {
                let mut up = log.clone();
                let mut dn = log.clone();
                up[i] += h;
                dn[i] -= h;
                let kp = KernelParams::from_log(k.spec(), &up).unwrap().matrix(&x, &x).unwrap();
                let km = KernelParams::from_log(k.spec(), &dn).unwrap().matrix(&x, &x).unwrap();
                let fd = (kp - km) / (2.0 * h);
                let scale = analytic[i].norm();
                if scale > 1e-8 {
                    prop_assert!(rel_err((&fd - &analytic[i]).norm() + scale, scale) < 1e-5);
                }
            }
        }
    }
}
