//! Error studies comparing the low-fidelity, high-fidelity and
//! multi-fidelity surrogates over a grid of high-fidelity budgets.
//!
//! Every `(n_high, repetition)` cell is an independent job. Its random
//! streams derive from the master seed and the cell coordinates only, so
//! cells can run in any order and a study replays bit-for-bit from its
//! manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{BenchmarkSpec, Registry};
use crate::error::{ensure, Error, Result};
use crate::gp::{self, Dataset, FitOptions, InputScaling, Noise};
use crate::kernels::KernelSpec;
use crate::nargp::{train_mf, McConfig, MfOptions};
use crate::optim::LbfgsConfig;
use crate::sampling::{latin_hypercube, nested_subset, scale_to_box, stream_rng, DesignConfig, Scheme};
use crate::subspace::{build_response_surface, correlation_matrix, find_subspace, gradients_to_normalized, DimPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Active subspace and response surface from the same high-fidelity samples.
    #[serde(rename = "alg1")]
    Shared,
    /// Active subspace and response surface from an independent design.
    #[serde(rename = "alg2")]
    Independent,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Shared => "alg1",
            Algorithm::Independent => "alg2",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg1" => Ok(Algorithm::Shared),
            "alg2" => Ok(Algorithm::Independent),
            other => Err(Error::Config(format!("unknown algorithm `{other}`, expected alg1 or alg2"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    MonteCarlo,
    MeanPropagation,
}

/// Normalization of the L1 discrete error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNormalization {
    Mean,
    Sum,
}

/// `numerator / denominator`, applied to sample counts with floor rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub numerator: usize,
    pub denominator: usize,
}

impl Fraction {
    pub const ONE_THIRD: Fraction = Fraction { numerator: 1, denominator: 3 };
    pub const ONE_HALF: Fraction = Fraction { numerator: 1, denominator: 2 };

    pub fn of(self, n: usize) -> usize {
        n * self.numerator / self.denominator
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Model {
    Lf,
    Hf,
    Mf,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Lf, Model::Hf, Model::Mf];

    pub fn as_str(self) -> &'static str {
        match self {
            Model::Lf => "LF",
            Model::Hf => "HF",
            Model::Mf => "MF",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub benchmark: String,
    pub algorithm: Algorithm,
    pub n_low: usize,
    pub n_high_grid: Vec<usize>,
    pub n_test: usize,
    pub n_repetitions: usize,
    pub seed: u64,
    /// Share of the high-fidelity samples whose gradients give the active
    /// subspace under [`Algorithm::Shared`].
    pub as_fraction: Fraction,
    /// Independent active-subspace design size under
    /// [`Algorithm::Independent`]; `None` means `floor(n_high / 2)`, so that
    /// one third of all high-fidelity evaluations go to the subspace.
    pub n_as: Option<usize>,
    pub as_dim: DimPolicy,
    pub prediction: Prediction,
    pub n_mc: usize,
    pub error_normalization: ErrorNormalization,
    /// Parameter box; the benchmark's registered box when absent.
    pub ranges: Option<Vec<(f64, f64)>>,
    pub restarts: usize,
    pub lbfgs: LbfgsConfig,
    /// Observation model of the active-subspace response surface. The
    /// noiseless default interpolates the projected pairs.
    #[serde(default)]
    pub response_surface_noise: Noise,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            benchmark: "piston".into(),
            algorithm: Algorithm::Shared,
            n_low: 200,
            n_high_grid: vec![10, 25, 50, 100, 150],
            n_test: 10_000,
            n_repetitions: 5,
            seed: 0,
            as_fraction: Fraction::ONE_THIRD,
            n_as: None,
            as_dim: DimPolicy::Fixed(1),
            prediction: Prediction::MonteCarlo,
            n_mc: 100,
            error_normalization: ErrorNormalization::Mean,
            ranges: None,
            restarts: 5,
            lbfgs: LbfgsConfig::default(),
            response_surface_noise: Noise::Noiseless,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_high_grid.is_empty() {
            return bad("the n_high grid is empty".into());
        }
        if self.n_repetitions == 0 {
            return bad("at least one repetition is required".into());
        }
        if self.n_low == 0 || self.n_test == 0 {
            return bad("n_low and n_test must be positive".into());
        }
        if self.as_fraction.numerator == 0 || self.as_fraction.numerator > self.as_fraction.denominator {
            return bad(format!(
                "as_fraction {}/{} is outside (0, 1]",
                self.as_fraction.numerator, self.as_fraction.denominator
            ));
        }
        if self.n_mc == 0 {
            return bad("n_mc must be positive".into());
        }
        if let DimPolicy::Fixed(0) = self.as_dim {
            return bad("active subspace dimension must be positive".into());
        }
        for &n in &self.n_high_grid {
            if n == 0 || n > self.n_low {
                return bad(format!("n_high = {n} must lie in 1..={} to nest in the low-fidelity design", self.n_low));
            }
            if self.as_samples(n) == 0 {
                return bad(format!("n_high = {n} leaves no samples for the active subspace"));
            }
        }
        if let Some(r) = &self.ranges {
            for (lo, hi) in r {
                if !(lo < hi) {
                    return bad(format!("range ({lo}, {hi}) is empty"));
                }
            }
        }
        Ok(())
    }

    /// Gradient samples used for the active subspace at `n_high`.
    pub fn as_samples(&self, n_high: usize) -> usize {
        match self.algorithm {
            Algorithm::Shared => self.as_fraction.of(n_high),
            Algorithm::Independent => self.n_as.unwrap_or(n_high / 2),
        }
    }

    /// High-fidelity evaluations consumed per cell.
    pub fn total_high(&self, n_high: usize) -> usize {
        match self.algorithm {
            Algorithm::Shared => n_high,
            Algorithm::Independent => n_high + self.as_samples(n_high),
        }
    }

    fn resolve_benchmark(&self, registry: &Registry) -> Result<BenchmarkSpec> {
        let mut spec = registry.get(&self.benchmark)?;
        if let Some(r) = &self.ranges {
            ensure!(r.len() == spec.dim(), "{} ranges for the {}-input benchmark `{}`", r.len(), spec.dim(), spec.name);
            spec.ranges = r.clone();
            spec.validate()?;
        }
        Ok(spec)
    }

    fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions { restarts: self.restarts, lbfgs: self.lbfgs, seed, ..FitOptions::default() }
    }
}

/// Error of one model in one cell; `None` if its fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub n_high: usize,
    pub repetition: usize,
    pub model: Model,
    pub l1_error: Option<f64>,
    pub seed: u64,
    pub n_as: usize,
    pub n_high_total: usize,
}

/// Sufficient-summary sample: first active coordinate and output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryPoint {
    pub n_high: usize,
    pub repetition: usize,
    pub active: f64,
    pub output: f64,
}

/// Level-1 against level-2 prediction at a test point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationPoint {
    pub n_high: usize,
    pub repetition: usize,
    pub level1: f64,
    pub level2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub config: StudyConfig,
    /// Parameter box actually used.
    pub ranges: Vec<(f64, f64)>,
    pub repetition_seeds: Vec<u64>,
    pub errors: Vec<ErrorRecord>,
    pub summary: Vec<SummaryPoint>,
    pub correlation: Vec<CorrelationPoint>,
}

impl StudyResult {
    /// Mean error over successful repetitions, or `None` if all failed.
    pub fn mean_error(&self, n_high: usize, model: Model) -> Option<f64> {
        let v: Vec<f64> =
            self.errors.iter().filter(|e| e.n_high == n_high && e.model == model).filter_map(|e| e.l1_error).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Mean absolute deviation between `pred` and `truth`.
pub fn l1_error(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    l1_error_with(pred, truth, ErrorNormalization::Mean)
}

pub fn l1_error_with(pred: &DVector<f64>, truth: &DVector<f64>, norm: ErrorNormalization) -> Result<f64> {
    ensure!(pred.len() == truth.len(), "{} predictions for {} reference values", pred.len(), truth.len());
    ensure!(!pred.is_empty(), "error over an empty test set");
    let sum: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t).abs()).sum();
    Ok(match norm {
        ErrorNormalization::Mean => sum / pred.len() as f64,
        ErrorNormalization::Sum => sum,
    })
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    stream_rng(seed, label).next_u64()
}

fn lhs_in_box(n: usize, ranges: &[(f64, f64)], seed: u64) -> Result<DMatrix<f64>> {
    let u = latin_hypercube(&DesignConfig { n_points: n, dim: ranges.len(), seed, scheme: Scheme::LatinHypercube })?;
    scale_to_box(&u, ranges)
}

struct TestSet {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

struct CellOutput {
    errors: Vec<ErrorRecord>,
    summary: Vec<SummaryPoint>,
    correlation: Vec<CorrelationPoint>,
}

struct MfOutcome {
    lf: f64,
    mf: f64,
    summary: Vec<SummaryPoint>,
    correlation: Vec<CorrelationPoint>,
}

fn run_cell(
    cfg: &StudyConfig,
    bench: &BenchmarkSpec,
    test: &TestSet,
    n_high: usize,
    repetition: usize,
    rep_seed: u64,
) -> Result<CellOutput> {
    let ranges = &bench.ranges;
    let tag = format!("n{n_high}");
    let x_low = lhs_in_box(cfg.n_low, ranges, derive_seed(rep_seed, "low-design"))?;
    let mut subset_rng = stream_rng(rep_seed, &format!("high-subset/{tag}"));
    let (x_high, _) = nested_subset(&x_low, n_high, &mut subset_rng)?;
    let high = bench.sample(&x_high)?;

    let hf = gp::fit(
        &Dataset::new(high.inputs.clone(), high.outputs.clone())?,
        KernelSpec::RbfArd { dim: bench.dim() },
        &FitOptions {
            input_scaling: InputScaling::Ranges(ranges.clone()),
            ..cfg.fit_options(derive_seed(rep_seed, &format!("fit-hf/{tag}")))
        },
    )
    .and_then(|g| g.predict_mean(&test.x))
    .and_then(|p| l1_error_with(&p, &test.y, cfg.error_normalization));
    if let Err(e) = &hf {
        warn!("{} {} n_high={n_high} rep={repetition}: HF model failed: {e}", cfg.benchmark, cfg.algorithm);
    }

    let mf = run_mf(cfg, bench, test, &x_low, &high, n_high, repetition, rep_seed);
    if let Err(e) = &mf {
        warn!("{} {} n_high={n_high} rep={repetition}: LF/MF models failed: {e}", cfg.benchmark, cfg.algorithm);
    }
    let (lf_err, mf_err, summary, correlation) = match mf {
        Ok(o) => (Some(o.lf), Some(o.mf), o.summary, o.correlation),
        Err(_) => (None, None, Vec::new(), Vec::new()),
    };
    let record = |model, l1_error| ErrorRecord {
        n_high,
        repetition,
        model,
        l1_error,
        seed: rep_seed,
        n_as: cfg.as_samples(n_high),
        n_high_total: cfg.total_high(n_high),
    };
    Ok(CellOutput {
        errors: vec![record(Model::Lf, lf_err), record(Model::Hf, hf.ok()), record(Model::Mf, mf_err)],
        summary,
        correlation,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_mf(
    cfg: &StudyConfig,
    bench: &BenchmarkSpec,
    test: &TestSet,
    x_low: &DMatrix<f64>,
    high: &Dataset,
    n_high: usize,
    repetition: usize,
    rep_seed: u64,
) -> Result<MfOutcome> {
    let ranges = &bench.ranges;
    let tag = format!("n{n_high}");
    let n_as = cfg.as_samples(n_high);
    ensure!(n_as >= 1, "no samples for the active subspace");

    // (inputs, outputs, gradients) for the subspace, pairs for the surface.
    let (as_grads, rs_x, rs_y) = match cfg.algorithm {
        Algorithm::Shared => {
            let rows: Vec<usize> = (0..n_as).collect();
            let grads = high.gradients.as_ref().expect("benchmark samples carry gradients").select_rows(&rows);
            (grads, high.inputs.clone(), high.outputs.clone())
        }
        Algorithm::Independent => {
            let x_as = lhs_in_box(n_as, ranges, derive_seed(rep_seed, &format!("as-design/{tag}")))?;
            let d = bench.sample(&x_as)?;
            (d.gradients.expect("benchmark samples carry gradients"), d.inputs, d.outputs)
        }
    };
    let c = correlation_matrix(&gradients_to_normalized(&as_grads, ranges)?)?;
    let subspace = find_subspace(&c, cfg.as_dim)?;
    let rs = build_response_surface(
        &subspace,
        &rs_x,
        &rs_y,
        ranges,
        &FitOptions {
            noise: cfg.response_surface_noise,
            ..cfg.fit_options(derive_seed(rep_seed, &format!("fit-rs/{tag}")))
        },
    )?;

    let y_low = rs.predict_mean(x_low)?;
    let y_high_train = rs.predict_mean(&high.inputs)?;
    let opts = MfOptions {
        level1: cfg.fit_options(derive_seed(rep_seed, &format!("fit-level1/{tag}"))),
        level2: cfg.fit_options(derive_seed(rep_seed, &format!("fit-level2/{tag}"))),
        ranges: Some(ranges.clone()),
        mc: McConfig { n_mc: cfg.n_mc, seed: derive_seed(rep_seed, &format!("mc/{tag}")) },
    };
    let model = train_mf(&Dataset::new(x_low.clone(), y_low)?, &high.inputs, &y_high_train, &high.outputs, &opts)?;

    let lf_pred = model.level1().predict_mean(&test.x)?;
    let mf_pred = match cfg.prediction {
        Prediction::MonteCarlo => model.predict_mf_mean(&test.x, opts.mc.n_mc, opts.mc.seed)?,
        Prediction::MeanPropagation => model.predict_mf_mean_propagation(&test.x)?.mean,
    };
    let lf = l1_error_with(&lf_pred, &test.y, cfg.error_normalization)?;
    let mf = l1_error_with(&mf_pred, &test.y, cfg.error_normalization)?;

    let z = rs.active_coordinates(&rs_x)?;
    let summary =
        (0..rs_y.len()).map(|i| SummaryPoint { n_high, repetition, active: z[(i, 0)], output: rs_y[i] }).collect();
    let correlation = if repetition == 0 {
        (0..lf_pred.len())
            .map(|i| CorrelationPoint { n_high, repetition, level1: lf_pred[i], level2: mf_pred[i] })
            .collect()
    } else {
        Vec::new()
    };
    Ok(MfOutcome { lf, mf, summary, correlation })
}

/// Runs the study described by `cfg` against the default benchmark registry.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    run_study_with(cfg, &Registry::with_defaults())
}

pub fn run_study_with(cfg: &StudyConfig, registry: &Registry) -> Result<StudyResult> {
    cfg.validate()?;
    let bench = cfg.resolve_benchmark(registry)?;
    let test_x = lhs_in_box(cfg.n_test, &bench.ranges, derive_seed(cfg.seed, "test-set"))?;
    let test = TestSet { y: bench.outputs(&test_x)?, x: test_x };
    let repetition_seeds: Vec<u64> =
        (0..cfg.n_repetitions).map(|r| derive_seed(cfg.seed, &format!("repetition/{r}"))).collect();

    let cells: Vec<(usize, usize)> =
        cfg.n_high_grid.iter().flat_map(|&n| (0..cfg.n_repetitions).map(move |r| (n, r))).collect();
    info!("{} {}: {} cells", cfg.benchmark, cfg.algorithm, cells.len());
    let outputs = cells
        .par_iter()
        .map(|&(n, r)| {
            let out = run_cell(cfg, &bench, &test, n, r, repetition_seeds[r]);
            info!("{} {} n_high={n} rep={r} done", cfg.benchmark, cfg.algorithm);
            out
        })
        .collect::<Result<Vec<_>>>()?;

    let mut result = StudyResult {
        config: cfg.clone(),
        ranges: bench.ranges.clone(),
        repetition_seeds,
        errors: Vec::new(),
        summary: Vec::new(),
        correlation: Vec::new(),
    };
    for o in outputs {
        result.errors.extend(o.errors);
        result.summary.extend(o.summary);
        result.correlation.extend(o.correlation);
    }
    Ok(result)
}

/// Runs [`Algorithm::Shared`] regardless of `cfg.algorithm`.
pub fn run_algorithm1(cfg: &StudyConfig) -> Result<StudyResult> {
    run_study(&StudyConfig { algorithm: Algorithm::Shared, ..cfg.clone() })
}

/// Runs [`Algorithm::Independent`] regardless of `cfg.algorithm`.
pub fn run_algorithm2(cfg: &StudyConfig) -> Result<StudyResult> {
    if cfg.n_as == Some(0) {
        return Err(Error::Config("the independent active-subspace design needs N_AS >= 1".into()));
    }
    run_study(&StudyConfig { algorithm: Algorithm::Independent, ..cfg.clone() })
}

pub const ERRORS_FILE: &str = "errors.csv";
pub const SUMMARY_FILE: &str = "summary_plot.csv";
pub const CORRELATION_FILE: &str = "correlation.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: StudyConfig,
    pub repetition_seeds: Vec<u64>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the CSV outputs and the manifest into `dir`, creating it if needed.
pub fn emit_results(result: &StudyResult, dir: &Path) -> Result<Vec<PathBuf>> {
    result.config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &result.config;

    let errors = dir.join(ERRORS_FILE);
    write_rows(
        &errors,
        &["benchmark", "algorithm", "n_high", "repetition", "model", "l1_error", "seed", "n_as", "n_high_total"],
        result.errors.iter().map(|e| {
            vec![
                cfg.benchmark.clone(),
                cfg.algorithm.to_string(),
                e.n_high.to_string(),
                e.repetition.to_string(),
                e.model.as_str().to_string(),
                e.l1_error.map_or_else(|| "failed".to_string(), |v| v.to_string()),
                e.seed.to_string(),
                e.n_as.to_string(),
                e.n_high_total.to_string(),
            ]
        }),
    )?;

    let summary = dir.join(SUMMARY_FILE);
    write_rows(
        &summary,
        &["n_high", "repetition", "active_coordinate", "output"],
        result
            .summary
            .iter()
            .map(|p| vec![p.n_high.to_string(), p.repetition.to_string(), p.active.to_string(), p.output.to_string()]),
    )?;

    let correlation = dir.join(CORRELATION_FILE);
    write_rows(
        &correlation,
        &["n_high", "repetition", "level1", "level2"],
        result
            .correlation
            .iter()
            .map(|p| vec![p.n_high.to_string(), p.repetition.to_string(), p.level1.to_string(), p.level2.to_string()]),
    )?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: StudyConfig { ranges: Some(result.ranges.clone()), ..cfg.clone() },
        repetition_seeds: result.repetition_seeds.clone(),
        files: [ERRORS_FILE, SUMMARY_FILE, CORRELATION_FILE].map(String::from).to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(vec![errors, summary, correlation, manifest_path])
}

/// Reruns the study recorded in `manifest` and checks the derived seeds
/// against the recorded ones.
pub fn replay(manifest: &Manifest) -> Result<StudyResult> {
    let result = run_study(&manifest.config)?;
    if result.repetition_seeds != manifest.repetition_seeds {
        return Err(Error::Config("repetition seeds differ from the manifest; incompatible tool version".into()));
    }
    Ok(result)
}

/// Per `(n_high, model)` aggregate of an errors file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub benchmark: String,
    pub algorithm: String,
    pub n_high: usize,
    pub model: String,
    pub mean: Option<f64>,
    pub std_dev: Option<f64>,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Deserialize)]
struct ErrorRow {
    benchmark: String,
    algorithm: String,
    n_high: usize,
    model: String,
    l1_error: String,
}

/// Reads `errors.csv` from a results directory and aggregates over repetitions.
pub fn summarize(dir: &Path) -> Result<Vec<ErrorSummary>> {
    let path = dir.join(ERRORS_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let mut groups: Vec<(ErrorRow, Vec<f64>, usize)> = Vec::new();
    for row in reader.deserialize::<ErrorRow>() {
        let row = row.map_err(|e| Error::csv(&path, e))?;
        let value = match row.l1_error.as_str() {
            "failed" => None,
            s => {
                Some(s.parse::<f64>().map_err(|e| Error::Config(format!("{}: bad error `{s}`: {e}", path.display())))?)
            }
        };
        let pos = groups.iter().position(|(g, _, _)| {
            g.benchmark == row.benchmark
                && g.algorithm == row.algorithm
                && g.n_high == row.n_high
                && g.model == row.model
        });
        let idx = match pos {
            Some(i) => i,
            None => {
                groups.push((row, Vec::new(), 0));
                groups.len() - 1
            }
        };
        match value {
            Some(v) => groups[idx].1.push(v),
            None => groups[idx].2 += 1,
        }
    }
    Ok(groups
        .into_iter()
        .map(|(g, v, failed)| {
            let n = v.len() as f64;
            let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / n);
            let std_dev = mean
                .filter(|_| v.len() > 1)
                .map(|m| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            ErrorSummary {
                benchmark: g.benchmark,
                algorithm: g.algorithm,
                n_high: g.n_high,
                model: g.model,
                mean,
                std_dev,
                succeeded: v.len(),
                failed,
            }
        })
        .collect())
}
