//! Analytic benchmark functions with closed-form gradients.
//!
//! * `piston`: cycle time of a cylindrical piston, 7 inputs
//!   `(M, S, V0, k, P0, Ta, T0)`.
//! * `ebola`: basic reproduction number of the SEIR Ebola model, 8 inputs
//!   `(beta1, beta2, beta3, rho1, gamma1, gamma2, omega, psi)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::gp::Dataset;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;

/// A named test function with its parameter box.
#[derive(Clone)]
pub struct BenchmarkSpec {
    pub name: String,
    pub parameter_names: Vec<String>,
    pub ranges: Vec<(f64, f64)>,
    pub evaluate: ScalarFn,
    pub gradient: GradientFn,
}

impl fmt::Debug for BenchmarkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BenchmarkSpec")
            .field("name", &self.name)
            .field("parameter_names", &self.parameter_names)
            .field("ranges", &self.ranges)
            .finish_non_exhaustive()
    }
}

impl BenchmarkSpec {
    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.ranges.is_empty(), "benchmark `{}` has no parameters", self.name);
        ensure!(
            self.parameter_names.len() == self.ranges.len(),
            "benchmark `{}` names {} parameters but has {} ranges",
            self.name,
            self.parameter_names.len(),
            self.ranges.len()
        );
        for (n, (lo, hi)) in self.parameter_names.iter().zip(&self.ranges) {
            ensure!(lo < hi, "benchmark `{}`: parameter {} has lower {} >= upper {}", self.name, n, lo, hi);
        }
        Ok(())
    }

    /// Evaluates outputs and gradients at every row of `x` (physical units).
    pub fn sample(&self, x: &DMatrix<f64>) -> Result<Dataset> {
        ensure!(x.ncols() == self.dim(), "benchmark `{}` takes {} inputs, got {}", self.name, self.dim(), x.ncols());
        let mut y = DVector::zeros(x.nrows());
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        for (i, row) in x.row_iter().enumerate() {
            let p: Vec<f64> = row.iter().copied().collect();
            y[i] = (self.evaluate)(&p)?;
            for (j, v) in (self.gradient)(&p)?.into_iter().enumerate() {
                g[(i, j)] = v;
            }
        }
        Dataset::with_gradients(x.clone(), y, g)
    }

    /// Outputs only.
    pub fn outputs(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        ensure!(x.ncols() == self.dim(), "benchmark `{}` takes {} inputs, got {}", self.name, self.dim(), x.ncols());
        let mut y = DVector::zeros(x.nrows());
        for (i, row) in x.row_iter().enumerate() {
            let p: Vec<f64> = row.iter().copied().collect();
            y[i] = (self.evaluate)(&p)?;
        }
        Ok(y)
    }
}

fn check_len(function: &'static str, p: &[f64], n: usize) -> Result<()> {
    ensure!(p.len() == n, "{} takes {} parameters, got {}", function, n, p.len());
    Ok(())
}

/// `R0 = (b1 + b2 r1 g1 / w + b3 psi / g2) / (g1 + psi)`.
pub fn ebola_r0(p: &[f64]) -> Result<f64> {
    check_len("ebola_r0", p, 8)?;
    let [b1, b2, b3, r1, g1, g2, w, psi] = [p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]];
    let den = g1 + psi;
    if !(den > 0.0 && w > 0.0 && g2 > 0.0) {
        return Err(Error::Domain {
            function: "ebola_r0",
            reason: format!("need gamma1 + psi > 0, omega > 0, gamma2 > 0 (got {den}, {w}, {g2})"),
        });
    }
    Ok((b1 + b2 * r1 * g1 / w + b3 * psi / g2) / den)
}

pub fn ebola_r0_gradient(p: &[f64]) -> Result<Vec<f64>> {
    let r0 = ebola_r0(p)?;
    let [_, b2, b3, r1, g1, g2, w, psi] = [p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]];
    let den = g1 + psi;
    Ok(vec![
        1.0 / den,
        r1 * g1 / (w * den),
        psi / (g2 * den),
        b2 * g1 / (w * den),
        b2 * r1 / (w * den) - r0 / den,
        -b3 * psi / (g2 * g2 * den),
        -b2 * r1 * g1 / (w * w * den),
        b3 / (g2 * den) - r0 / den,
    ])
}

/// Value and gradient of the piston cycle time, propagated through the chain
/// `A -> V -> C` in forward mode.
fn piston_with_gradient(p: &[f64]) -> Result<(f64, [f64; 7])> {
    check_len("piston_cycle_time", p, 7)?;
    let [m, s, v0, k, p0, ta, t0] = [p[0], p[1], p[2], p[3], p[4], p[5], p[6]];
    let domain = |reason: String| Error::Domain { function: "piston_cycle_time", reason };
    if !(s > 0.0 && k > 0.0 && m > 0.0 && t0 > 0.0) {
        return Err(domain(format!("need M, S, k, T0 > 0 (got {m}, {s}, {k}, {t0})")));
    }
    // Parameter indices: M 0, S 1, V0 2, k 3, P0 4, Ta 5, T0 6.
    let unit = |i: usize| {
        let mut e = [0.0; 7];
        e[i] = 1.0;
        e
    };
    let lin = |terms: &[(f64, [f64; 7])]| {
        let mut out = [0.0; 7];
        for (c, d) in terms {
            for (o, v) in out.iter_mut().zip(d) {
                *o += c * v;
            }
        }
        out
    };

    // A = P0 S + 19.62 M - k V0 / S
    let a = p0 * s + 19.62 * m - k * v0 / s;
    let da =
        lin(&[(p0 + k * v0 / (s * s), unit(1)), (s, unit(4)), (19.62, unit(0)), (-v0 / s, unit(3)), (-k / s, unit(2))]);
    // q = P0 V0 Ta / T0
    let q = p0 * v0 * ta / t0;
    let dq = lin(&[(q / p0, unit(4)), (q / v0, unit(2)), (q / ta, unit(5)), (-q / t0, unit(6))]);
    // D = sqrt(A^2 + 4 k q)
    let radicand = a * a + 4.0 * k * q;
    if radicand < 0.0 {
        return Err(domain(format!("negative radicand {radicand}")));
    }
    let d = radicand.sqrt();
    let dd = lin(&[(a / d, da), (2.0 * q / d, unit(3)), (2.0 * k / d, dq)]);
    // V = S / (2k) (D - A)
    let v = s / (2.0 * k) * (d - a);
    if !(v > 0.0) {
        return Err(domain(format!("non-positive volume {v}")));
    }
    let dv = lin(&[(v / s, unit(1)), (-v / k, unit(3)), (s / (2.0 * k), dd), (-s / (2.0 * k), da)]);
    // C = 2 pi sqrt(M / (k + S^2 q / V^2))
    let den = k + s * s * q / (v * v);
    let dden = lin(&[
        (1.0, unit(3)),
        (2.0 * s * q / (v * v), unit(1)),
        (s * s / (v * v), dq),
        (-2.0 * s * s * q / (v * v * v), dv),
    ]);
    let c = 2.0 * PI * (m / den).sqrt();
    let dc = lin(&[(0.5 * c / m, unit(0)), (-0.5 * c / den, dden)]);
    Ok((c, dc))
}

/// Piston cycle time in seconds.
pub fn piston_cycle_time(p: &[f64]) -> Result<f64> {
    piston_with_gradient(p).map(|(c, _)| c)
}

pub fn piston_cycle_time_gradient(p: &[f64]) -> Result<Vec<f64>> {
    piston_with_gradient(p).map(|(_, g)| g.to_vec())
}

/// Per-parameter box as read from a ranges file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRange {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRanges {
    pub name: String,
    pub parameters: Vec<ParameterRange>,
}

/// Contents of a ranges configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RangeConfig {
    #[serde(default, rename = "benchmark")]
    pub benchmarks: Vec<BenchmarkRanges>,
}

pub const DEFAULT_RANGES: &str = include_str!("../config/ranges.toml");

impl RangeConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("ranges file: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

/// Named benchmarks; starts with `piston` and `ebola`.
#[derive(Debug, Clone)]
pub struct Registry {
    specs: BTreeMap<String, BenchmarkSpec>,
}

impl Registry {
    pub fn with_defaults() -> Self {
        let defaults = RangeConfig::from_toml_str(DEFAULT_RANGES).expect("bundled ranges file parses");
        let find = |name: &str| {
            let b = defaults.benchmarks.iter().find(|b| b.name == name).expect("bundled benchmark present");
            (
                b.parameters.iter().map(|p| p.name.clone()).collect::<Vec<_>>(),
                b.parameters.iter().map(|p| (p.lower, p.upper)).collect::<Vec<_>>(),
            )
        };
        let mut specs = BTreeMap::new();
        let (names, ranges) = find("piston");
        specs.insert(
            "piston".to_string(),
            BenchmarkSpec {
                name: "piston".into(),
                parameter_names: names,
                ranges,
                evaluate: Arc::new(piston_cycle_time),
                gradient: Arc::new(piston_cycle_time_gradient),
            },
        );
        let (names, ranges) = find("ebola");
        specs.insert(
            "ebola".to_string(),
            BenchmarkSpec {
                name: "ebola".into(),
                parameter_names: names,
                ranges,
                evaluate: Arc::new(ebola_r0),
                gradient: Arc::new(ebola_r0_gradient),
            },
        );
        Self { specs }
    }

    pub fn register(&mut self, spec: BenchmarkSpec) -> Result<()> {
        spec.validate()?;
        self.specs.insert(spec.name.clone(), spec);
        Ok(())
    }

    /// Replaces parameter boxes of already-registered benchmarks.
    pub fn apply_ranges(&mut self, cfg: &RangeConfig) -> Result<()> {
        for b in &cfg.benchmarks {
            let spec = self.specs.get_mut(&b.name).ok_or_else(|| Error::UnknownBenchmark(b.name.clone()))?;
            let names: Vec<&str> = b.parameters.iter().map(|p| p.name.as_str()).collect();
            let expected: Vec<&str> = spec.parameter_names.iter().map(String::as_str).collect();
            if names != expected {
                return Err(Error::Config(format!(
                    "ranges for `{}` list parameters {:?}, expected {:?}",
                    b.name, names, expected
                )));
            }
            let mut updated = spec.clone();
            updated.ranges = b.parameters.iter().map(|p| (p.lower, p.upper)).collect();
            updated.validate()?;
            *spec = updated;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<BenchmarkSpec> {
        self.specs.get(name).cloned().ok_or_else(|| Error::UnknownBenchmark(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }
}

/// Looks up a built-in benchmark with its default ranges.
pub fn benchmark_registry(name: &str) -> Result<BenchmarkSpec> {
    Registry::with_defaults().get(name)
}

/// Writes a dataset as CSV with columns `x1..xm, y` and, when gradients are
/// present, `dy1..dym`.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let m = data.dim();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header: Vec<String> = (1..=m).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    if data.gradients.is_some() {
        header.extend((1..=m).map(|i| format!("dy{i}")));
    }
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.inputs.row(i).iter().map(|v| format!("{v:e}")).collect();
        rec.push(format!("{:e}", data.outputs[i]));
        if let Some(g) = &data.gradients {
            rec.extend(g.row(i).iter().map(|v| format!("{v:e}")));
        }
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    let m = header.iter().filter(|h| h.starts_with('x')).count();
    let has_grad = header.len() == 2 * m + 1;
    ensure!(header.len() == m + 1 || has_grad, "unexpected dataset header in {}: {:?}", path.display(), header);
    let (mut xs, mut ys, mut gs) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        xs.extend_from_slice(&vals[..m]);
        ys.push(vals[m]);
        if has_grad {
            gs.extend_from_slice(&vals[m + 1..]);
        }
    }
    let n = ys.len();
    let inputs = DMatrix::from_row_slice(n, m, &xs);
    let outputs = DVector::from_vec(ys);
    if has_grad {
        Dataset::with_gradients(inputs, outputs, DMatrix::from_row_slice(n, m, &gs))
    } else {
        Dataset::new(inputs, outputs)
    }
}
