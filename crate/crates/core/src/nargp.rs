//! Nonlinear autoregressive multi-fidelity GP (NARGP).
//!
//! Level 1 is a plain ARD GP on the low-fidelity data. Every higher level is
//! a GP over the augmented input `(x, f_prev)` with the composite kernel
//! `k_rho(x, x') k_f(f, f') + k_delta(x, x')`, where `f_prev` is the previous
//! level's output at `x`. Prediction integrates over the previous level's
//! posterior by Monte Carlo, one independent sample set per query point.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::gp::{self, Dataset, FitOptions, InputScaling, PredictiveDistribution, SavedGp, TrainedGp};
use crate::kernels::{KernelParams, KernelSpec, NargpKernelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_mc: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfOptions {
    pub level1: FitOptions,
    pub level2: FitOptions,
    /// Physical parameter box; the data bounding box is used when absent.
    pub ranges: Option<Vec<(f64, f64)>>,
    pub mc: McConfig,
}

impl Default for MfOptions {
    fn default() -> Self {
        Self {
            level1: FitOptions::default(),
            level2: FitOptions { seed: 1, ..FitOptions::default() },
            ranges: None,
            mc: McConfig::default(),
        }
    }
}

/// Chain of fidelity levels, lowest first.
#[derive(Debug, Clone)]
pub struct MultiFidelityModel {
    levels: Vec<TrainedGp>,
    mc: McConfig,
}

/// Trains the two-level model: level 1 on `low`, level 2 on
/// `([x_h | lf_h], y_h)`.
pub fn train_mf(
    low: &Dataset,
    high_inputs: &DMatrix<f64>,
    high_lf_values: &DVector<f64>,
    high_outputs: &DVector<f64>,
    opts: &MfOptions,
) -> Result<MultiFidelityModel> {
    low.validate()?;
    let m = low.dim();
    ensure!(high_inputs.ncols() == m, "high-fidelity inputs have {} columns, low-fidelity {}", high_inputs.ncols(), m);
    ensure!(
        high_inputs.nrows() == high_lf_values.len() && high_inputs.nrows() == high_outputs.len(),
        "high-fidelity arrays disagree: {} inputs, {} previous-level values, {} outputs",
        high_inputs.nrows(),
        high_lf_values.len(),
        high_outputs.len()
    );
    if let Some(r) = &opts.ranges {
        ensure!(r.len() == m, "{} ranges for {} input columns", r.len(), m);
    }

    let l1_opts = FitOptions {
        input_scaling: opts.ranges.clone().map_or(InputScaling::DataBounds, InputScaling::Ranges),
        ..opts.level1.clone()
    };
    let level1 = gp::fit(low, KernelSpec::RbfArd { dim: m }, &l1_opts)?;

    let augmented = augment(high_inputs, high_lf_values);
    let data = Dataset::new(augmented, high_outputs.clone())?;
    let l2_scaling = match &opts.ranges {
        Some(r) => {
            let (lo, hi) = (high_lf_values.min(), high_lf_values.max());
            let f_range = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
            InputScaling::Ranges(r.iter().copied().chain(std::iter::once(f_range)).collect())
        }
        None => InputScaling::DataBounds,
    };
    let l2_opts = FitOptions { input_scaling: l2_scaling, ..opts.level2.clone() };
    let level2 = gp::fit(&data, KernelSpec::Nargp { dim: m }, &l2_opts)?;
    Ok(MultiFidelityModel { levels: vec![level1, level2], mc: opts.mc })
}

fn augment(x: &DMatrix<f64>, f: &DVector<f64>) -> DMatrix<f64> {
    let m = x.ncols();
    DMatrix::from_fn(x.nrows(), m + 1, |i, j| if j < m { x[(i, j)] } else { f[i] })
}

/// Stream id for a query point, so each point gets the same samples
/// regardless of its position in the query set.
fn point_stream(x: &[f64]) -> u64 {
    x.iter().fold(0x9e37_79b9_7f4a_7c15u64, |h, v| {
        let mut z = h ^ v.to_bits();
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Level-2 conditional posterior at a fixed physical query and varying
/// previous-level values. The `rho` and `delta` factors do not depend on the
/// previous-level value and are computed once per query.
struct ConditionalPredictor<'a> {
    gp: &'a TrainedGp,
    kernel: &'a NargpKernelParams,
    rho: Vec<f64>,
    delta: Vec<f64>,
    k: Vec<f64>,
    u: Vec<f64>,
}

impl<'a> ConditionalPredictor<'a> {
    fn new(gp: &'a TrainedGp) -> Result<Self> {
        let KernelParams::Nargp(kernel) = gp.params() else {
            return Err(Error::Contract("upper fidelity level must use the NARGP kernel".into()));
        };
        let n = gp.data().len();
        Ok(Self { gp, kernel, rho: vec![0.0; n], delta: vec![0.0; n], k: vec![0.0; n], u: vec![0.0; kernel.dim()] })
    }

    fn set_query(&mut self, x: &[f64]) {
        let m = self.kernel.dim();
        // Only the physical columns; `u` is shorter than the map.
        self.gp.input_map().apply_into(x, &mut self.u);
        let train = self.gp.train_t().as_slice();
        for i in 0..self.rho.len() {
            let xi = &train[i * (m + 1)..i * (m + 1) + m];
            self.rho[i] = self.kernel.rho.eval_unchecked(&self.u, xi);
            self.delta[i] = self.kernel.delta.eval_unchecked(&self.u, xi);
        }
    }

    /// `(mean, variance)` in model units at previous-level value `f`.
    fn at(&mut self, f: f64, with_variance: bool) -> (f64, f64) {
        let m = self.kernel.dim();
        let map = self.gp.input_map();
        let fu = [(f - map.center[m]) / map.half_width[m]];
        let train = self.gp.train_t().as_slice();
        let alpha = self.gp.alpha();
        let mut mean = 0.0;
        for i in 0..self.k.len() {
            let fi = &train[i * (m + 1) + m..(i + 1) * (m + 1)];
            let k = self.rho[i] * self.kernel.f.eval_unchecked(&fu, fi) + self.delta[i];
            self.k[i] = k;
            mean += k * alpha[i];
        }
        let om = self.gp.output_map();
        let mean = om.mean + om.scale * mean;
        if !with_variance {
            return (mean, 0.0);
        }
        // Column-oriented forward substitution L v = k.
        let l = self.gp.cholesky_factor();
        let n = self.k.len();
        let mut sq = 0.0;
        for j in 0..n {
            let col = l.column(j);
            let col = col.as_slice();
            let vj = self.k[j] / col[j];
            self.k[j] = vj;
            sq += vj * vj;
            for i in j + 1..n {
                self.k[i] -= col[i] * vj;
            }
        }
        let var = (self.gp.params().prior_variance() - sq).max(0.0) * om.scale * om.scale;
        (mean, var)
    }
}

impl MultiFidelityModel {
    /// Assembles a model from already-trained levels. Every level after the
    /// first must use the NARGP kernel over `dim + 1` inputs.
    pub fn from_levels(levels: Vec<TrainedGp>, mc: McConfig) -> Result<Self> {
        ensure!(levels.len() >= 2, "a multi-fidelity model needs at least two levels");
        let m = levels[0].input_dim();
        ensure!(matches!(levels[0].params(), KernelParams::RbfArd(_)), "level 1 must use the ARD kernel");
        for (q, l) in levels.iter().enumerate().skip(1) {
            ensure!(
                l.params().spec() == (KernelSpec::Nargp { dim: m }),
                "level {} must use the NARGP kernel over {} inputs",
                q + 1,
                m
            );
        }
        Ok(Self { levels, mc })
    }

    pub fn level1(&self) -> &TrainedGp {
        &self.levels[0]
    }

    pub fn level2(&self) -> &TrainedGp {
        &self.levels[1]
    }

    pub fn levels(&self) -> &[TrainedGp] {
        &self.levels
    }

    pub fn mc_config(&self) -> McConfig {
        self.mc
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].input_dim()
    }

    fn check_queries(&self, x: &DMatrix<f64>) -> Result<()> {
        ensure!(
            x.ncols() == self.input_dim(),
            "queries have {} columns, model expects {}",
            x.ncols(),
            self.input_dim()
        );
        Ok(())
    }

    /// Recursive Monte Carlo prediction with the model's own [`McConfig`].
    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        self.predict_mf(x_star, self.mc.n_mc, self.mc.seed)
    }

    /// Mixture mean and total variance from `n_mc` previous-level samples per query.
    pub fn predict_mf(&self, x_star: &DMatrix<f64>, n_mc: usize, seed: u64) -> Result<PredictiveDistribution> {
        self.check_queries(x_star)?;
        let base = self.levels[0].predict(x_star)?;
        self.propagate(x_star, &base.mean, &base.variance, n_mc, seed, true)
    }

    /// Mixture mean only; identical samples to [`Self::predict_mf`], skipping
    /// the conditional variances at the top level.
    pub fn predict_mf_mean(&self, x_star: &DMatrix<f64>, n_mc: usize, seed: u64) -> Result<DVector<f64>> {
        self.check_queries(x_star)?;
        let base = self.levels[0].predict(x_star)?;
        Ok(self.propagate(x_star, &base.mean, &base.variance, n_mc, seed, false)?.mean)
    }

    /// Monte Carlo propagation from given level-1 moments.
    pub(crate) fn propagate(
        &self,
        x_star: &DMatrix<f64>,
        mean1: &DVector<f64>,
        var1: &DVector<f64>,
        n_mc: usize,
        seed: u64,
        with_variance: bool,
    ) -> Result<PredictiveDistribution> {
        ensure!(n_mc >= 1, "need at least one Monte Carlo sample");
        let rows = x_star.transpose();
        let upper = &self.levels[1..];
        let moments: Vec<(f64, f64)> = (0..x_star.nrows())
            .into_par_iter()
            .map(|q| -> Result<(f64, f64)> {
                let x = rows.column(q);
                let x = x.as_slice();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(point_stream(x));
                let sd = var1[q].max(0.0).sqrt();
                let mut samples: Vec<f64> = (0..n_mc).map(|_| mean1[q] + sd * normal(&mut rng)).collect();
                let mut cond = vec![(0.0, 0.0); n_mc];
                for (level, gp) in upper.iter().enumerate() {
                    let last = level + 1 == upper.len();
                    let mut pred = ConditionalPredictor::new(gp)?;
                    pred.set_query(x);
                    for (c, s) in cond.iter_mut().zip(&samples) {
                        *c = pred.at(*s, with_variance || !last);
                    }
                    if !last {
                        for (s, (m, v)) in samples.iter_mut().zip(&cond) {
                            *s = m + v.sqrt() * normal(&mut rng);
                        }
                    }
                }
                let n = n_mc as f64;
                let mean = cond.iter().map(|c| c.0).sum::<f64>() / n;
                let var = if with_variance {
                    let within = cond.iter().map(|c| c.1).sum::<f64>() / n;
                    let between = cond.iter().map(|c| (c.0 - mean).powi(2)).sum::<f64>() / n;
                    within + between
                } else {
                    0.0
                };
                Ok((mean, var))
            })
            .collect::<Result<_>>()?;
        let q = moments.len();
        Ok(PredictiveDistribution {
            mean: DVector::from_iterator(q, moments.iter().map(|m| m.0)),
            variance: DVector::from_iterator(q, moments.iter().map(|m| m.1)),
            covariance: None,
        })
    }

    /// Deterministic approximation: feeds each level's posterior mean into
    /// the next level. Ignores the previous level's uncertainty, so it is a
    /// biased estimate of the Monte Carlo mixture.
    pub fn predict_mf_mean_propagation(&self, x_star: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        self.check_queries(x_star)?;
        let mut pred = self.levels[0].predict(x_star)?;
        for gp in &self.levels[1..] {
            pred = gp.predict(&augment(x_star, &pred.mean))?;
        }
        Ok(pred)
    }

    pub fn to_json(&self) -> Result<String> {
        let saved = SavedModel { levels: self.levels.iter().map(TrainedGp::to_saved).collect(), mc: self.mc };
        serde_json::to_string_pretty(&saved).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let saved: SavedModel = serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        let levels = saved.levels.into_iter().map(SavedGp::restore).collect::<Result<Vec<_>>>()?;
        Self::from_levels(levels, saved.mc)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    levels: Vec<SavedGp>,
    mc: McConfig,
}
