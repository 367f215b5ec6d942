//! Declarative experiment runner.
//!
//! An [`ExperimentSpec`] describes one of four experiments: the Gaussian model
//! problem, logistic regression against an HMC reference, a sweep of the
//! convergence bounds, or a check of the batching variance identities. Every
//! runner returns an in-memory report and, when an output directory is set,
//! writes versioned CSV files plus a `manifest.json`.
//!
//! Step sizes in every grid are dimensionless, in units of `1/L`: for the
//! Gaussian model this is the preconditioned step, for logistic regression
//! `L` is the largest Hessian eigenvalue at the mode.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    self, AnalyticsError, BoundParams, ModelProblemParams, Scheme, Theorem,
};
use crate::batching::{self, BatchError, CheckMethod};
use crate::diagnostics::{self, DiagnosticsError, PeriodicityCheck, Welford};
use crate::model::{
    self, CsvOptions, FiniteSumModel, GaussianMeanModel, LogisticRegressionModel, ModelError,
    DEFAULT_PRIOR_VARIANCE,
};
use crate::samplers::{
    self, EnsembleObserver, HmcConfig, InitialState, SamplerConfig, SamplerError,
};
use crate::seeding::{child_seed, stream_rng};

/// Version of every CSV layout written here.
pub const SCHEMA_VERSION: u32 = 1;

/// Number of trailing epochs kept at full resolution for oscillation analysis.
pub const TAIL_EPOCHS: usize = 10;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn invalid<T>(message: impl Into<String>) -> Result<T, ExperimentError> {
    Err(ExperimentError::InvalidSpec(message.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ModelProblem,
    Logreg,
    BoundsSweep,
    VarianceCheck,
}

/// Regularity constants fed to the bound evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub strong_convexity: f64,
    pub smoothness: f64,
    pub hessian_lipschitz: f64,
    pub dim: usize,
    pub sigma_star: f64,
    pub initial_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Step grid in units of `1/L`.
    pub steps: Vec<f64>,
    /// `R`; ignored when `batch_size` is set.
    pub batches: usize,
    /// `n`; when set, `R = N/n`.
    pub batch_size: Option<usize>,
    /// `N`; defaults to `20 R` for the Gaussian model and 1024 for SimData.
    pub num_terms: Option<usize>,
    pub policies: Vec<Scheme>,
    pub realizations: usize,
    /// Realizations are split into this many groups for parallelism and
    /// Monte Carlo standard errors.
    pub groups: usize,
    pub seed: u64,
    pub burn_in: usize,
    /// Overrides the `nₑ = ⌈100 + 20 (hR)⁻³⌉` rule.
    pub epochs: Option<usize>,
    /// Cap on `K = nₑ R`.
    pub max_iterations: usize,
    pub sigma2: f64,
    /// Rescales the Gaussian data so the batch-mean variance equals this.
    pub batch_mean_variance: Option<f64>,
    /// SimData feature count `d − 1`.
    pub features: usize,
    pub dataset: Option<PathBuf>,
    pub standardize: bool,
    pub label_column: isize,
    pub has_header: bool,
    pub prior_variance: f64,
    pub hmc_samples: usize,
    pub hmc_burn_in: usize,
    pub epsilons: Vec<f64>,
    pub iterations_grid: Vec<usize>,
    /// `R` values for the bounds sweep; empty means `[batches]`.
    pub batches_grid: Vec<usize>,
    /// Derived from the Gaussian model when absent.
    pub bound_constants: Option<BoundConstants>,
    pub mc_draws: usize,
    /// Approximate number of thinned points in per-iteration series.
    pub series_points: usize,
    /// Where logistic-regression chains start.
    pub start: ChainStart,
    pub output: Option<PathBuf>,
}

/// Starting point of the logistic-regression chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainStart {
    Zero,
    Mode,
    /// The HMC estimate of the posterior mean.
    Reference,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::ModelProblem,
            steps: vec![0.1, 0.2, 0.4],
            batches: 8,
            batch_size: None,
            num_terms: None,
            policies: vec![Scheme::Ula, Scheme::Rm, Scheme::Rr],
            realizations: 1000,
            groups: 50,
            seed: 0,
            burn_in: samplers::DEFAULT_BURN_IN,
            epochs: None,
            max_iterations: 1_000_000,
            sigma2: 1.0,
            batch_mean_variance: None,
            features: 10,
            dataset: None,
            standardize: false,
            label_column: -1,
            has_header: true,
            prior_variance: DEFAULT_PRIOR_VARIANCE,
            hmc_samples: 20_000,
            hmc_burn_in: 2_000,
            epsilons: vec![1e-4, 1e-5, 1e-6],
            iterations_grid: vec![1_000, 10_000, 100_000],
            batches_grid: Vec::new(),
            bound_constants: None,
            mc_draws: 200_000,
            series_points: 2_000,
            start: ChainStart::Mode,
            output: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json_file(path: &Path) -> Result<Self, ExperimentError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn validate_ensemble(&self) -> Result<(), ExperimentError> {
        if self.steps.is_empty() {
            return invalid("step grid is empty");
        }
        if let Some(h) = self.steps.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
            return invalid(format!("step {h} is not positive"));
        }
        if self.policies.is_empty() {
            return invalid("no policies selected");
        }
        if self.realizations < 4 {
            return invalid("need at least 4 realizations");
        }
        if self.groups < 2 {
            return invalid("need at least 2 groups for standard errors");
        }
        if self.max_iterations == 0 {
            return invalid("max_iterations must be positive");
        }
        Ok(())
    }

    /// Groups actually used: at least two realizations per group.
    fn effective_groups(&self) -> usize {
        self.groups.min(self.realizations / 2).max(2)
    }

    /// `(R, n)` for a data set of `num_terms` points.
    pub fn partition(&self, num_terms: usize) -> Result<(usize, usize), ExperimentError> {
        match self.batch_size {
            Some(n) if n == 0 || !num_terms.is_multiple_of(n) => {
                invalid(format!("batch size {n} does not divide N = {num_terms}"))
            }
            Some(n) => Ok((num_terms / n, n)),
            None if self.batches == 0 || !num_terms.is_multiple_of(self.batches) => {
                invalid(format!("R = {} does not divide N = {num_terms}", self.batches))
            }
            None => Ok((self.batches, num_terms / self.batches)),
        }
    }

    /// `(nₑ, capped)` for step `h` and `R` batches per epoch.
    pub fn epochs_for(&self, h: f64, batches: usize) -> (usize, bool) {
        let wanted = self.epochs.unwrap_or_else(|| epoch_rule(h, batches));
        let cap = (self.max_iterations / batches).max(1);
        if wanted > cap {
            (cap, true)
        } else {
            (wanted, false)
        }
    }
}

/// Burn-in actually applied: the requested value, shortened when needed so at
/// least the trailing [`TAIL_EPOCHS`] epochs remain (or half the run if it is
/// shorter than that).
pub fn effective_burn_in(requested: usize, iterations: usize, batches: usize) -> usize {
    let tail = TAIL_EPOCHS * batches;
    if iterations > tail {
        requested.min(iterations - tail)
    } else {
        requested.min(iterations / 2)
    }
}

/// `nₑ = ⌈100 + 20 (hR)⁻³⌉`.
pub fn epoch_rule(h: f64, batches: usize) -> usize {
    (100.0 + 20.0 * (h * batches as f64).powi(-3)).ceil() as usize
}

/// Every random stream used by a run derives from these seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedTree {
    pub root: u64,
    pub data: u64,
    pub reference: u64,
    pub checks: u64,
    /// One seed per step-grid entry, shared by all policies at that step.
    pub chains: Vec<u64>,
}

impl SeedTree {
    pub fn new(root: u64, steps: usize) -> Self {
        Self {
            root,
            data: child_seed(root, 1),
            reference: child_seed(root, 2),
            checks: child_seed(root, 3),
            chains: (0..steps as u64).map(|i| child_seed(root, 100 + i)).collect(),
        }
    }
}

/// `git describe` of the source tree if available, else the package version.
pub fn version_string() -> String {
    let pkg = env!("CARGO_PKG_VERSION");
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| format!("{pkg}+{}", s.trim()))
        .unwrap_or_else(|| pkg.to_string())
}

#[derive(Debug, Serialize)]
struct Manifest<'a, D: Serialize> {
    version: String,
    spec: &'a ExperimentSpec,
    derived: &'a D,
    seeds: &'a SeedTree,
    warnings: &'a [String],
    started_unix_seconds: u64,
    wall_clock_seconds: f64,
}

fn write_manifest<D: Serialize>(
    dir: &Path,
    spec: &ExperimentSpec,
    derived: &D,
    seeds: &SeedTree,
    warnings: &[String],
    started: (SystemTime, Instant),
) -> Result<(), ExperimentError> {
    let manifest = Manifest {
        version: version_string(),
        spec,
        derived,
        seeds,
        warnings,
        started_unix_seconds: started.0.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        wall_clock_seconds: started.1.elapsed().as_secs_f64(),
    };
    let file = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

/// CSV writer whose first line is `#schema=<name>/v<version>`.
fn csv_writer(dir: &Path, file: &str, schema: &str) -> Result<csv::Writer<File>, ExperimentError> {
    let mut f = File::create(dir.join(file))?;
    writeln!(f, "#schema={schema}/v{SCHEMA_VERSION}")?;
    Ok(csv::Writer::from_writer(f))
}

fn output_dir(spec: &ExperimentSpec) -> Result<Option<&Path>, ExperimentError> {
    match &spec.output {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir.as_path()))
        }
        None => Ok(None),
    }
}

fn warn(warnings: &mut Vec<String>, message: String) {
    log::warn!("{message}");
    warnings.push(message);
}

/// Which iterations keep a per-iteration series entry: every `stride`-th
/// plus all of the trailing epochs.
#[derive(Debug, Clone)]
struct SeriesIndex {
    kept: Vec<usize>,
    slot_of: Vec<Option<usize>>,
    tail_start: usize,
}

impl SeriesIndex {
    fn new(iterations: usize, batches: usize, points: usize) -> Self {
        let stride = (iterations + 1).div_ceil(points.max(1)).max(1);
        let tail_start = iterations.saturating_sub(TAIL_EPOCHS * batches) + 1;
        let mut slot_of = vec![None; iterations + 1];
        let mut kept = Vec::new();
        for (k, slot) in slot_of.iter_mut().enumerate() {
            if k % stride == 0 || k >= tail_start {
                *slot = Some(kept.len());
                kept.push(k);
            }
        }
        Self {
            kept,
            slot_of,
            tail_start: tail_start.min(iterations),
        }
    }
}

fn label(s: Scheme) -> &'static str {
    match s {
        Scheme::Ula => "ula",
        Scheme::Rm => "rm",
        Scheme::Rr => "rr",
    }
}

/// An estimate with its Monte Carlo standard error and the closed-form value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckedEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub predicted: f64,
}

impl CheckedEstimate {
    /// `|estimate − predicted| / standard_error`.
    pub fn z_score(&self) -> f64 {
        (self.estimate - self.predicted).abs() / self.standard_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelProblemRun {
    /// Step in units of `1/L`.
    pub step: f64,
    pub scheme: Scheme,
    pub epochs: usize,
    pub iterations: usize,
    pub burn_in: usize,
    /// Relative variance error per phase `r = k mod R`, time-averaged after
    /// burn-in.
    pub phases: Vec<CheckedEstimate>,
    /// Time average over all iterations after burn-in.
    pub average: CheckedEstimate,
    /// `(k, relative variance error)` of the whole ensemble, thinned.
    pub series: Vec<(usize, f64)>,
    /// Unthinned relative variance error over the last epochs.
    pub tail: Vec<f64>,
    pub tail_periodicity: PeriodicityCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelProblemReport {
    pub num_terms: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub batch_mean_variance: f64,
    pub sigma2: f64,
    pub realizations: usize,
    pub groups: usize,
    pub runs: Vec<ModelProblemRun>,
}

impl ModelProblemReport {
    pub fn run(&self, step: f64, scheme: Scheme) -> Option<&ModelProblemRun> {
        self.runs.iter().find(|r| r.step == step && r.scheme == scheme)
    }
}

/// Group-level ensemble variance statistics for the one-dimensional model.
struct VarianceObserver<'a> {
    index: &'a SeriesIndex,
    burn_in: usize,
    phases: Vec<Welford>,
    all: Welford,
    series: Vec<Welford>,
}

impl EnsembleObserver for VarianceObserver<'_> {
    fn observe(&mut self, k: usize, phase: usize, states: &[Vec<f64>]) {
        let mut w = Welford::new();
        for x in states {
            w.push(x[0]);
        }
        if k >= self.burn_in {
            self.phases[phase].push(w.variance());
            self.all.push(w.variance());
        }
        if let Some(slot) = self.index.slot_of[k] {
            self.series[slot].merge(&w);
        }
    }
}

/// Mean and standard error of per-group estimates.
fn across_groups(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut w = Welford::new();
    for v in values {
        w.push(v);
    }
    (w.mean(), w.standard_error())
}

pub fn build_gaussian_model(spec: &ExperimentSpec, seeds: &SeedTree) -> Result<(GaussianMeanModel, usize, usize), ExperimentError> {
    let num_terms = spec.num_terms.unwrap_or(20 * spec.batches.max(1));
    let (batches, batch_size) = spec.partition(num_terms)?;
    let base = GaussianMeanModel::sample_standard(num_terms, spec.sigma2, seeds.data)?;
    let model = match spec.batch_mean_variance {
        Some(v) => GaussianMeanModel::with_batch_mean_variance(base.data().to_vec(), spec.sigma2, batch_size, v)?,
        None => base,
    };
    Ok((model, batches, batch_size))
}

/// Runs ULA/SGLD-RM/SGLD-RR ensembles on the Gaussian model for every step in
/// the grid and compares the relative variance error with the closed forms.
pub fn run_model_problem(spec: &ExperimentSpec) -> Result<ModelProblemReport, ExperimentError> {
    let started = (SystemTime::now(), Instant::now());
    spec.validate_ensemble()?;
    if let Some(h) = spec.steps.iter().find(|h| **h >= 2.0) {
        return invalid(format!("step {h} must lie below 2 for the Gaussian model"));
    }
    let seeds = SeedTree::new(spec.seed, spec.steps.len());
    let (model, batches, batch_size) = build_gaussian_model(spec, &seeds)?;
    let num_terms = model.num_terms();
    let v = batching::batch_mean_variance(model.data(), batch_size);
    let groups = spec.effective_groups();
    let scale = num_terms as f64 / spec.sigma2;
    let mut warnings = Vec::new();
    let mut runs = Vec::new();

    for (i, &h) in spec.steps.iter().enumerate() {
        let (epochs, capped) = spec.epochs_for(h, batches);
        if capped {
            warn(&mut warnings, format!("h = {h}: epoch count capped at {epochs}"));
        }
        let iterations = epochs * batches;
        let burn_in = effective_burn_in(spec.burn_in, iterations, batches);
        if burn_in < spec.burn_in {
            warn(
                &mut warnings,
                format!("h = {h}: burn-in reduced to {burn_in} for K = {iterations}"),
            );
        }
        let params = ModelProblemParams {
            step: h,
            batches,
            num_terms,
            batch_mean_variance: v,
            sigma2: spec.sigma2,
        };
        let index = SeriesIndex::new(iterations, batches, spec.series_points);
        for &scheme in &spec.policies {
            let predicted_phase = |r: usize| -> Result<f64, AnalyticsError> {
                match scheme {
                    Scheme::Ula => analytics::ula_rel_var_error(h),
                    Scheme::Rm => analytics::rm_rel_var_error(&params),
                    Scheme::Rr => analytics::rr_rel_var_error_phase(&params, r),
                }
            };
            let predicted_avg = match scheme {
                Scheme::Rr => analytics::rr_rel_var_error_avg(&params)?,
                _ => predicted_phase(0)?,
            };
            let config = SamplerConfig {
                step: model.raw_step(h),
                iterations,
                burn_in,
                scheme,
                batch_size,
                seed: seeds.chains[i],
                realizations: spec.realizations,
                langevin: true,
                stride: 1,
            };
            log::info!("model problem: h = {h}, {}, K = {iterations}", label(scheme));
            let observers = samplers::run_ensemble(&model, &config, &InitialState::Fixed(vec![0.0]), groups, || {
                VarianceObserver {
                    index: &index,
                    burn_in,
                    phases: vec![Welford::new(); batches],
                    all: Welford::new(),
                    series: vec![Welford::new(); index.kept.len()],
                }
            })?;
            let phases = (0..batches)
                .map(|r| {
                    let (mean, se) = across_groups(observers.iter().map(|o| o.phases[r].mean()));
                    Ok(CheckedEstimate {
                        estimate: scale * mean - 1.0,
                        standard_error: scale * se,
                        predicted: predicted_phase(r)?,
                    })
                })
                .collect::<Result<Vec<_>, AnalyticsError>>()?;
            let (mean, se) = across_groups(observers.iter().map(|o| o.all.mean()));
            let average = CheckedEstimate {
                estimate: scale * mean - 1.0,
                standard_error: scale * se,
                predicted: predicted_avg,
            };
            let mut merged = vec![Welford::new(); index.kept.len()];
            for o in &observers {
                for (m, s) in merged.iter_mut().zip(&o.series) {
                    m.merge(s);
                }
            }
            let series: Vec<(usize, f64)> = index
                .kept
                .iter()
                .zip(&merged)
                .map(|(&k, w)| (k, diagnostics::relative_variance_error_of(w.variance(), num_terms, spec.sigma2)))
                .collect();
            let tail: Vec<f64> = series
                .iter()
                .filter(|(k, _)| *k >= index.tail_start)
                .map(|(_, e)| *e)
                .collect();
            let tail_periodicity = diagnostics::periodicity(&tail, batches);
            runs.push(ModelProblemRun {
                step: h,
                scheme,
                epochs,
                iterations,
                burn_in,
                phases,
                average,
                series,
                tail,
                tail_periodicity,
            });
        }
    }

    let report = ModelProblemReport {
        num_terms,
        batches,
        batch_size,
        batch_mean_variance: v,
        sigma2: spec.sigma2,
        realizations: spec.realizations,
        groups,
        runs,
    };
    if let Some(dir) = output_dir(spec)? {
        write_model_problem(dir, &report)?;
        let derived = serde_json::json!({
            "num_terms": num_terms,
            "batches": batches,
            "batch_size": batch_size,
            "batch_mean_variance": v,
            "groups": groups,
            "runs": report.runs.iter().map(|r| serde_json::json!({
                "step": r.step, "scheme": r.scheme, "epochs": r.epochs,
                "iterations": r.iterations, "burn_in": r.burn_in,
            })).collect::<Vec<_>>(),
        });
        write_manifest(dir, spec, &derived, &seeds, &warnings, started)?;
    }
    Ok(report)
}

fn write_model_problem(dir: &Path, report: &ModelProblemReport) -> Result<(), ExperimentError> {
    let mut phases = csv_writer(dir, "model_problem_phases.csv", "model-problem-phases")?;
    phases.write_record(["h", "scheme", "phase", "estimate", "standard_error", "predicted"])?;
    let mut summary = csv_writer(dir, "model_problem_summary.csv", "model-problem-summary")?;
    summary.write_record([
        "h", "scheme", "epochs", "iterations", "burn_in", "estimate", "standard_error", "predicted",
    ])?;
    let mut series = csv_writer(dir, "model_problem_series.csv", "model-problem-series")?;
    series.write_record(["h", "scheme", "k", "phase", "rel_var_error", "predicted"])?;
    for run in &report.runs {
        let (h, s) = (run.step.to_string(), label(run.scheme));
        for (r, p) in run.phases.iter().enumerate() {
            phases.write_record([
                h.clone(),
                s.into(),
                r.to_string(),
                p.estimate.to_string(),
                p.standard_error.to_string(),
                p.predicted.to_string(),
            ])?;
        }
        summary.write_record([
            h.clone(),
            s.into(),
            run.epochs.to_string(),
            run.iterations.to_string(),
            run.burn_in.to_string(),
            run.average.estimate.to_string(),
            run.average.standard_error.to_string(),
            run.average.predicted.to_string(),
        ])?;
        for &(k, e) in &run.series {
            let r = k % report.batches;
            series.write_record([
                h.clone(),
                s.into(),
                k.to_string(),
                r.to_string(),
                e.to_string(),
                run.phases[r].predicted.to_string(),
            ])?;
        }
    }
    phases.flush()?;
    summary.flush()?;
    series.flush()?;
    Ok(())
}

/// Reference posterior obtained by HMC.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reference {
    pub mode: Vec<f64>,
    pub mean: Vec<f64>,
    /// Batch-means standard error of each coordinate of `mean`.
    pub standard_error: Vec<f64>,
    /// Extreme Hessian eigenvalues at the mode.
    pub min_curvature: f64,
    pub max_curvature: f64,
    pub hmc: HmcConfig,
    pub acceptance_rate: f64,
    pub divergences: usize,
    /// Acceptance fell outside `[0.4, 0.95]`.
    pub acceptance_flag: bool,
}

/// Pilot grid over leapfrog step sizes (in whitened units).
const HMC_STEP_GRID: [f64; 10] = [1.0, 0.7, 0.5, 0.35, 0.25, 0.18, 0.12, 0.09, 0.06, 0.04];
/// Target trajectory length in whitened units.
const HMC_PATH_LENGTH: f64 = 1.5;

/// Mode, curvature and HMC posterior mean for `model`.
///
/// The mass matrix is the diagonal of the Hessian at the mode. The leapfrog
/// step is the largest on a fixed grid whose pilot acceptance lands in
/// `[0.65, 0.85]`, falling back to the one closest to 0.75.
pub fn hmc_reference<M: FiniteSumModel + ?Sized>(
    model: &M,
    samples: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Reference, ExperimentError> {
    let d = model.dim();
    let mode = model::find_mode(model, &vec![0.0; d], 1e-9, 200);
    let hess = model::numerical_hessian(model, &mode, 1e-5);
    let eig = hess.clone().symmetric_eigen().eigenvalues;
    // Sample z with x = mode + S z and S Sᵀ = H⁻¹, i.e. a dense metric equal to
    // the Hessian at the mode. Falls back to the diagonal if H is not PD.
    let factor = match hess.clone().cholesky().map(|c| c.inverse()) {
        Some(inv) => match inv.cholesky() {
            Some(c) => c.l(),
            None => diagonal_factor(&hess),
        },
        None => diagonal_factor(&hess),
    };
    let whitened = model::AffineReparam::new(model, &mode, factor)?;
    let zero = vec![0.0; d];
    let config_for = |eps: f64, samples: usize, burn_in: usize, seed: u64| HmcConfig {
        step_size: eps,
        leapfrog_steps: (HMC_PATH_LENGTH / eps).ceil() as usize,
        samples,
        burn_in,
        seed,
        inverse_mass: None,
        jitter: 0.2,
    };
    let mut best: Option<(f64, f64)> = None;
    let mut chosen = None;
    for (i, &eps) in HMC_STEP_GRID.iter().enumerate() {
        let pilot = samplers::hmc_run(&whitened, &zero, &config_for(eps, 400, 100, child_seed(seed, i as u64)))?;
        let rate = pilot.acceptance_rate;
        log::debug!("hmc pilot: step {eps}, acceptance {rate}");
        if (0.65..=0.85).contains(&rate) {
            chosen = Some(eps);
            break;
        }
        if best.is_none_or(|(_, r)| (rate - 0.75).abs() < (r - 0.75).abs()) {
            best = Some((eps, rate));
        }
    }
    let eps = chosen.or(best.map(|b| b.0)).unwrap_or(HMC_STEP_GRID[0]);
    let hmc = config_for(eps, samples, burn_in, seed);
    let mut run = samplers::hmc_run(&whitened, &zero, &hmc)?;
    for i in 0..run.len() {
        let x = whitened.to_original(run.sample(i));
        run.samples[i * d..(i + 1) * d].copy_from_slice(&x);
    }
    let mean = run.mean();
    let batches_of = 50.min(run.len().max(1));
    let per = run.len() / batches_of;
    let mut standard_error = vec![0.0; d];
    if per > 0 {
        for (j, se) in standard_error.iter_mut().enumerate() {
            let (_, s) = across_groups((0..batches_of).map(|b| {
                (b * per..(b + 1) * per).map(|i| run.sample(i)[j]).sum::<f64>() / per as f64
            }));
            *se = s;
        }
    }
    let acceptance_flag = !(0.4..=0.95).contains(&run.acceptance_rate);
    Ok(Reference {
        mode,
        mean,
        standard_error,
        min_curvature: eig.min(),
        max_curvature: eig.max(),
        hmc,
        acceptance_rate: run.acceptance_rate,
        divergences: run.divergences,
        acceptance_flag,
    })
}

fn diagonal_factor(hess: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(hess.nrows(), hess.ncols(), |i, j| {
        if i == j {
            1.0 / hess[(i, i)].max(f64::MIN_POSITIVE).sqrt()
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogregRun {
    pub step: f64,
    pub scheme: Scheme,
    pub epochs: usize,
    pub iterations: usize,
    /// `‖(1/K) Σ_{k≤K} x̄_k − μ‖ / ‖μ‖` for the ensemble mean `x̄_k`.
    pub final_error: f64,
    /// `‖se‖/‖μ‖` from the spread of group running averages.
    pub final_error_noise: f64,
    /// `(k, running-average error, instantaneous error)`, thinned.
    pub series: Vec<(usize, f64, f64)>,
    /// Instantaneous ensemble-mean error over the last epochs, linear trend removed.
    pub oscillation: Vec<f64>,
    pub periodicity: PeriodicityCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogregReport {
    pub num_terms: usize,
    pub dim: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub reference: Reference,
    pub runs: Vec<LogregRun>,
}

impl LogregReport {
    pub fn run(&self, step: f64, scheme: Scheme) -> Option<&LogregRun> {
        self.runs.iter().find(|r| r.step == step && r.scheme == scheme)
    }
}

/// Per-group sums of states for the ensemble-mean trajectory.
struct MeanObserver<'a> {
    index: &'a SeriesIndex,
    dim: usize,
    members: usize,
    cumulative: Vec<f64>,
    sums: Vec<f64>,
    cumulatives: Vec<f64>,
}

impl EnsembleObserver for MeanObserver<'_> {
    fn observe(&mut self, k: usize, _phase: usize, states: &[Vec<f64>]) {
        self.members = states.len();
        let mut sum = vec![0.0; self.dim];
        for x in states {
            for (s, v) in sum.iter_mut().zip(x) {
                *s += v;
            }
        }
        if k >= 1 {
            for (c, s) in self.cumulative.iter_mut().zip(&sum) {
                *c += s;
            }
        }
        if let Some(slot) = self.index.slot_of[k] {
            let range = slot * self.dim..(slot + 1) * self.dim;
            self.sums[range.clone()].copy_from_slice(&sum);
            self.cumulatives[range].copy_from_slice(&self.cumulative);
        }
    }
}

fn relative_error(x: &[f64], reference: &[f64]) -> f64 {
    diagnostics::relative_mean_error(x, reference).unwrap_or(f64::NAN)
}

/// Removes the least-squares line from `series`.
pub fn detrend(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    if series.len() < 2 {
        return vec![0.0; series.len()];
    }
    let tbar = (n - 1.0) / 2.0;
    let ybar = series.iter().sum::<f64>() / n;
    let (mut sty, mut stt) = (0.0, 0.0);
    for (t, y) in series.iter().enumerate() {
        let dt = t as f64 - tbar;
        sty += dt * (y - ybar);
        stt += dt * dt;
    }
    let slope = sty / stt;
    series
        .iter()
        .enumerate()
        .map(|(t, y)| y - ybar - slope * (t as f64 - tbar))
        .collect()
}

/// Logistic model from the CSV given in the spec or from generated SimData,
/// truncated so it splits into whole batches.
pub fn build_logreg_model(spec: &ExperimentSpec, seeds: &SeedTree) -> Result<LogisticRegressionModel, ExperimentError> {
    let model = match &spec.dataset {
        Some(path) => model::load_dataset_csv(
            path,
            &CsvOptions {
                label_column: spec.label_column,
                has_header: spec.has_header,
                standardize: spec.standardize,
                prior_variance: spec.prior_variance,
            },
        )?,
        None => {
            let n = spec.num_terms.unwrap_or(1024);
            let sim = model::generate_simdata(seeds.data, n, spec.features)?;
            if let Some(dir) = output_dir(spec)? {
                sim.write(dir, "simdata")?;
            }
            if spec.standardize {
                sim.model.standardized()
            } else {
                sim.model
            }
        }
    };
    let multiple = spec.batch_size.unwrap_or(spec.batches.max(1));
    Ok(model.truncated_to_multiple(multiple)?)
}

/// Runs ULA/SGLD-RM/SGLD-RR on Bayesian logistic regression and tracks the
/// relative error of the running posterior-mean estimate against HMC.
pub fn run_logreg(spec: &ExperimentSpec) -> Result<LogregReport, ExperimentError> {
    let started = (SystemTime::now(), Instant::now());
    spec.validate_ensemble()?;
    let seeds = SeedTree::new(spec.seed, spec.steps.len());
    let model = build_logreg_model(spec, &seeds)?;
    let (batches, batch_size) = spec.partition(model.num_terms())?;
    let d = model.dim();
    let mut warnings = Vec::new();
    let reference = hmc_reference(&model, spec.hmc_samples, spec.hmc_burn_in, seeds.reference)?;
    if reference.acceptance_flag {
        warn(
            &mut warnings,
            format!("HMC acceptance {} outside [0.4, 0.95]", reference.acceptance_rate),
        );
    }
    let mu = &reference.mean;
    let groups = spec.effective_groups();
    let mut runs = Vec::new();
    for (i, &h) in spec.steps.iter().enumerate() {
        if h >= 1.0 {
            warn(&mut warnings, format!("h = {h} is at or above 1/L"));
        }
        let (epochs, capped) = spec.epochs_for(h, batches);
        if capped {
            warn(&mut warnings, format!("h = {h}: epoch count capped at {epochs}"));
        }
        let iterations = epochs * batches;
        let index = SeriesIndex::new(iterations, batches, spec.series_points);
        for &scheme in &spec.policies {
            let config = SamplerConfig {
                step: h / reference.max_curvature,
                iterations,
                burn_in: 0,
                scheme,
                batch_size,
                seed: seeds.chains[i],
                realizations: spec.realizations,
                langevin: true,
                stride: 1,
            };
            log::info!("logreg: h = {h}, {}, K = {iterations}", label(scheme));
            let init = InitialState::Fixed(match spec.start {
                ChainStart::Zero => vec![0.0; d],
                ChainStart::Mode => reference.mode.clone(),
                ChainStart::Reference => reference.mean.clone(),
            });
            let observers = samplers::run_ensemble(&model, &config, &init, groups, || MeanObserver {
                index: &index,
                dim: d,
                members: 0,
                cumulative: vec![0.0; d],
                sums: vec![0.0; index.kept.len() * d],
                cumulatives: vec![0.0; index.kept.len() * d],
            })?;
            let total: usize = observers.iter().map(|o| o.members).sum();
            let mut series = Vec::with_capacity(index.kept.len());
            for (slot, &k) in index.kept.iter().enumerate() {
                let range = slot * d..(slot + 1) * d;
                let mut inst = vec![0.0; d];
                let mut running = vec![0.0; d];
                for o in &observers {
                    for j in 0..d {
                        inst[j] += o.sums[range.start + j];
                        running[j] += o.cumulatives[range.start + j];
                    }
                }
                inst.iter_mut().for_each(|v| *v /= total as f64);
                if k == 0 {
                    running.copy_from_slice(&inst);
                } else {
                    running.iter_mut().for_each(|v| *v /= (total * k) as f64);
                }
                series.push((k, relative_error(&running, mu), relative_error(&inst, mu)));
            }
            let final_error = series.last().map_or(f64::NAN, |s| s.1);
            let mu_norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            let se2: f64 = (0..d)
                .map(|j| {
                    let (_, se) = across_groups(
                        observers
                            .iter()
                            .map(|o| o.cumulative[j] / (o.members * iterations.max(1)) as f64),
                    );
                    se * se
                })
                .sum();
            let tail: Vec<f64> = series
                .iter()
                .filter(|s| s.0 >= index.tail_start)
                .map(|s| s.2)
                .collect();
            let oscillation = detrend(&tail);
            let periodicity = diagnostics::periodicity(&oscillation, batches);
            runs.push(LogregRun {
                step: h,
                scheme,
                epochs,
                iterations,
                final_error,
                final_error_noise: se2.sqrt() / mu_norm,
                series,
                oscillation,
                periodicity,
            });
        }
    }
    let report = LogregReport {
        num_terms: model.num_terms(),
        dim: d,
        batches,
        batch_size,
        reference,
        runs,
    };
    if let Some(dir) = output_dir(spec)? {
        write_logreg(dir, &report)?;
        let derived = serde_json::json!({
            "num_terms": report.num_terms,
            "dim": d,
            "batches": batches,
            "batch_size": batch_size,
            "groups": groups,
            "step_unit": 1.0 / report.reference.max_curvature,
            "hmc": &report.reference.hmc,
            "hmc_acceptance_rate": report.reference.acceptance_rate,
            "hmc_acceptance_flag": report.reference.acceptance_flag,
            "hmc_divergences": report.reference.divergences,
            "runs": report.runs.iter().map(|r| serde_json::json!({
                "step": r.step, "scheme": r.scheme, "epochs": r.epochs, "iterations": r.iterations,
            })).collect::<Vec<_>>(),
        });
        write_manifest(dir, spec, &derived, &seeds, &warnings, started)?;
    }
    Ok(report)
}

fn write_logreg(dir: &Path, report: &LogregReport) -> Result<(), ExperimentError> {
    let mut reference = csv_writer(dir, "logreg_reference.csv", "logreg-reference")?;
    reference.write_record(["coordinate", "mode", "mean", "standard_error"])?;
    let r = &report.reference;
    for j in 0..report.dim {
        reference.write_record([
            j.to_string(),
            r.mode[j].to_string(),
            r.mean[j].to_string(),
            r.standard_error[j].to_string(),
        ])?;
    }
    reference.flush()?;
    let mut summary = csv_writer(dir, "logreg_summary.csv", "logreg-summary")?;
    summary.write_record([
        "h", "scheme", "epochs", "iterations", "final_error", "noise", "peak_lag", "acf_at_period", "periodic",
    ])?;
    let mut series = csv_writer(dir, "logreg_series.csv", "logreg-series")?;
    series.write_record(["h", "scheme", "k", "phase", "running_error", "instantaneous_error"])?;
    let mut osc = csv_writer(dir, "logreg_oscillations.csv", "logreg-oscillations")?;
    osc.write_record(["h", "scheme", "k", "phase", "detrended_error"])?;
    for run in &report.runs {
        let (h, s) = (run.step.to_string(), label(run.scheme));
        summary.write_record([
            h.clone(),
            s.into(),
            run.epochs.to_string(),
            run.iterations.to_string(),
            run.final_error.to_string(),
            run.final_error_noise.to_string(),
            run.periodicity.peak_lag.to_string(),
            run.periodicity.at_period.to_string(),
            run.periodicity.is_periodic().to_string(),
        ])?;
        for &(k, e, inst) in &run.series {
            series.write_record([
                h.clone(),
                s.into(),
                k.to_string(),
                (k % report.batches).to_string(),
                e.to_string(),
                inst.to_string(),
            ])?;
        }
        let first = run.iterations + 1 - run.oscillation.len();
        for (t, e) in run.oscillation.iter().enumerate() {
            let k = first + t;
            osc.write_record([
                h.clone(),
                s.into(),
                k.to_string(),
                (k % report.batches).to_string(),
                e.to_string(),
            ])?;
        }
    }
    summary.flush()?;
    series.flush()?;
    osc.flush()?;
    Ok(())
}

/// One cell of the bounds table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCell {
    pub theorem: Theorem,
    pub step: f64,
    pub batches: usize,
    pub iterations: usize,
    /// `None` when the cell is outside the theorem's hypotheses.
    pub bound: Option<f64>,
    pub status: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonTarget {
    pub theorem: Theorem,
    pub batches: usize,
    pub epsilon: f64,
    pub step: Option<f64>,
    pub iterations: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub constants: Vec<(usize, BoundConstants)>,
    pub cells: Vec<BoundCell>,
    pub targets: Vec<EpsilonTarget>,
    /// Log-log slope of steps-to-ε against ε per theorem and `R`.
    pub slopes: Vec<(Theorem, usize, f64)>,
}

impl BoundsReport {
    pub fn slope(&self, theorem: Theorem, batches: usize) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.0 == theorem && s.1 == batches)
            .map(|s| s.2)
    }
}

/// Gaussian-model constants: `μ = L = N/σ²`, `L₁ = 0`, `d = 1` and the exact
/// `σ*` for batches of `N/R`, with unit initial distance.
pub fn gaussian_bound_constants(model: &GaussianMeanModel, batches: usize) -> Result<BoundConstants, ExperimentError> {
    let n = model.num_terms();
    if batches == 0 || !n.is_multiple_of(batches) {
        return invalid(format!("R = {batches} does not divide N = {n}"));
    }
    let s2 = batching::sigma_star_exact(model, &[vec![model.mean()]], n / batches)?;
    Ok(BoundConstants {
        strong_convexity: model.curvature(),
        smoothness: model.curvature(),
        hessian_lipschitz: 0.0,
        dim: 1,
        sigma_star: s2.sqrt(),
        initial_distance: 1.0,
    })
}

/// Tabulates all six bounds over the `(h, R, K)` grid, and the cheapest
/// iteration count reaching each ε.
pub fn run_bounds_sweep(spec: &ExperimentSpec) -> Result<BoundsReport, ExperimentError> {
    let started = (SystemTime::now(), Instant::now());
    let seeds = SeedTree::new(spec.seed, spec.steps.len());
    let batches_grid = if spec.batches_grid.is_empty() {
        vec![spec.batches]
    } else {
        spec.batches_grid.clone()
    };
    let gaussian = match spec.bound_constants {
        Some(_) => None,
        None => Some(build_gaussian_model(spec, &seeds)?.0),
    };
    let mut report = BoundsReport {
        constants: Vec::new(),
        cells: Vec::new(),
        targets: Vec::new(),
        slopes: Vec::new(),
    };
    for &batches in &batches_grid {
        let c = match (&spec.bound_constants, &gaussian) {
            (Some(c), _) => *c,
            (None, Some(m)) => gaussian_bound_constants(m, batches)?,
            (None, None) => unreachable!("model built when constants are absent"),
        };
        report.constants.push((batches, c));
        let base = BoundParams {
            strong_convexity: c.strong_convexity,
            smoothness: c.smoothness,
            hessian_lipschitz: c.hessian_lipschitz,
            dim: c.dim,
            step: 0.0,
            batches,
            sigma_star: c.sigma_star,
            iterations: 0.0,
            initial_distance: c.initial_distance,
        };
        for theorem in Theorem::ALL {
            for &h in &spec.steps {
                for &k in &spec.iterations_grid {
                    let p = BoundParams {
                        step: h / c.smoothness,
                        iterations: k as f64,
                        ..base
                    };
                    let (bound, status) = match analytics::theorem_bound(theorem, &p) {
                        Ok(b) => (Some(b), "ok"),
                        Err(AnalyticsError::Inadmissible { .. }) => (None, "inadmissible"),
                        Err(AnalyticsError::PartialEpoch { .. }) => (None, "partial-epoch"),
                        Err(e) => return Err(e.into()),
                    };
                    report.cells.push(BoundCell {
                        theorem,
                        step: h,
                        batches,
                        iterations: k,
                        bound,
                        status,
                    });
                }
            }
            let mut eps_ok = Vec::new();
            let mut k_ok = Vec::new();
            for &epsilon in &spec.epsilons {
                let t = analytics::steps_to_epsilon(theorem, &base, epsilon)?;
                if let Some(t) = t {
                    eps_ok.push(epsilon);
                    k_ok.push(t.iterations);
                }
                report.targets.push(EpsilonTarget {
                    theorem,
                    batches,
                    epsilon,
                    step: t.map(|t| t.step * c.smoothness),
                    iterations: t.map(|t| t.iterations),
                });
            }
            if eps_ok.len() >= 2 {
                if let Ok(slope) = diagnostics::loglog_slope(&eps_ok, &k_ok) {
                    report.slopes.push((theorem, batches, slope));
                }
            }
        }
    }
    if let Some(dir) = output_dir(spec)? {
        let mut cells = csv_writer(dir, "bounds.csv", "bounds")?;
        cells.write_record(["theorem", "h", "R", "K", "bound", "status"])?;
        for c in &report.cells {
            cells.write_record([
                c.theorem.label().to_string(),
                c.step.to_string(),
                c.batches.to_string(),
                c.iterations.to_string(),
                c.bound.map_or(String::new(), |b| b.to_string()),
                c.status.to_string(),
            ])?;
        }
        cells.flush()?;
        let mut targets = csv_writer(dir, "bounds_epsilon.csv", "bounds-epsilon")?;
        targets.write_record(["theorem", "R", "epsilon", "h", "K"])?;
        for t in &report.targets {
            targets.write_record([
                t.theorem.label().to_string(),
                t.batches.to_string(),
                t.epsilon.to_string(),
                t.step.map_or(String::new(), |v| v.to_string()),
                t.iterations.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        targets.flush()?;
        let derived = serde_json::json!({
            "constants": &report.constants,
            "slopes": report.slopes.iter().map(|(t, r, s)| serde_json::json!({
                "theorem": t.label(), "R": r, "slope": s,
            })).collect::<Vec<_>>(),
        });
        write_manifest(dir, spec, &derived, &seeds, &[], started)?;
    }
    Ok(report)
}

/// One identity checked by [`run_variance_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub identity: &'static str,
    pub observed: f64,
    pub predicted: f64,
    pub standard_error: f64,
    pub method: &'static str,
    pub pass: bool,
}

/// Absolute tolerance for identities checked by enumeration.
pub const ENUMERATION_TOLERANCE: f64 = 1e-10;
/// Standard errors allowed for identities checked by Monte Carlo.
pub const MONTE_CARLO_SIGMAS: f64 = 4.0;

fn check(identity: &'static str, observed: f64, predicted: f64, se: f64, method: CheckMethod) -> IdentityCheck {
    let (method, pass) = match method {
        CheckMethod::Enumeration => (
            "enumeration",
            (observed - predicted).abs() <= ENUMERATION_TOLERANCE * predicted.abs().max(1.0),
        ),
        CheckMethod::MonteCarlo => ("monte-carlo", (observed - predicted).abs() <= MONTE_CARLO_SIGMAS * se),
    };
    IdentityCheck {
        identity,
        observed,
        predicted,
        standard_error: se,
        method,
        pass,
    }
}

/// Checks `σ*² = ((R−1)/(N−1)) C_G`, the batch-mean variance formula, and the
/// within-epoch covariance `−V/(R−1)` on the Gaussian model data, by
/// enumeration when small enough and Monte Carlo otherwise.
pub fn run_variance_check(spec: &ExperimentSpec) -> Result<Vec<IdentityCheck>, ExperimentError> {
    let started = (SystemTime::now(), Instant::now());
    let seeds = SeedTree::new(spec.seed, 0);
    let (model, batches, n) = build_gaussian_model(spec, &seeds)?;
    let data = model.data();
    let big_n = data.len();
    let samples = [vec![model.mean()]];
    let mut rng = stream_rng(seeds.checks, 0);
    let mut out = Vec::new();

    let predicted = batching::sigma_star_exact(&model, &samples, n)?;
    out.push(match batching::sigma_star_enumerated(&model, &samples, n) {
        Ok(v) => check("sigma_star_sq", v, predicted, 0.0, CheckMethod::Enumeration),
        Err(BatchError::EnumerationTooLarge(_)) => {
            let e = batching::sigma_star_monte_carlo(&model, &samples, n, spec.mc_draws, &mut rng)?;
            check("sigma_star_sq", e.value, predicted, e.standard_error, CheckMethod::MonteCarlo)
        }
        Err(e) => return Err(e.into()),
    });

    let v = batching::batch_mean_variance(data, n);
    out.push(match batching::batch_mean_variance_enumerated(data, n) {
        Ok(obs) => check("batch_mean_variance", obs, v, 0.0, CheckMethod::Enumeration),
        Err(BatchError::EnumerationTooLarge(_)) => {
            let mean = model.mean();
            let mut acc = Welford::new();
            for _ in 0..spec.mc_draws {
                let omega = batching::sample_omega(1, n, big_n, &mut rng)?;
                let m = omega.row(0).iter().map(|&i| data[i]).sum::<f64>() / n as f64;
                acc.push((m - mean).powi(2));
            }
            check("batch_mean_variance", acc.mean(), v, acc.standard_error(), CheckMethod::MonteCarlo)
        }
        Err(e) => return Err(e.into()),
    });

    out.push(if batches < 2 {
        IdentityCheck {
            identity: "within_epoch_covariance",
            observed: 0.0,
            predicted: 0.0,
            standard_error: 0.0,
            method: "single-batch",
            pass: true,
        }
    } else {
        let c = batching::within_epoch_covariance(data, n, spec.mc_draws, &mut rng)?;
        check("within_epoch_covariance", c.observed, c.predicted, c.standard_error, c.method)
    });

    if let Some(dir) = output_dir(spec)? {
        let mut w = csv_writer(dir, "variance_check.csv", "variance-check")?;
        w.write_record(["identity", "observed", "predicted", "standard_error", "method", "pass"])?;
        for c in &out {
            w.write_record([
                c.identity.to_string(),
                c.observed.to_string(),
                c.predicted.to_string(),
                c.standard_error.to_string(),
                c.method.to_string(),
                c.pass.to_string(),
            ])?;
        }
        w.flush()?;
        let derived = serde_json::json!({
            "num_terms": big_n, "batches": batches, "batch_size": n, "batch_mean_variance": v,
        });
        write_manifest(dir, spec, &derived, &seeds, &[], started)?;
    }
    Ok(out)
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Report {
    ModelProblem(ModelProblemReport),
    Logreg(Box<LogregReport>),
    Bounds(BoundsReport),
    VarianceCheck(Vec<IdentityCheck>),
}

pub fn run(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    Ok(match spec.kind {
        ExperimentKind::ModelProblem => Report::ModelProblem(run_model_problem(spec)?),
        ExperimentKind::Logreg => Report::Logreg(Box::new(run_logreg(spec)?)),
        ExperimentKind::BoundsSweep => Report::Bounds(run_bounds_sweep(spec)?),
        ExperimentKind::VarianceCheck => Report::VarianceCheck(run_variance_check(spec)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_rule_values() {
        assert_eq!(epoch_rule(0.1, 8), 140);
        assert_eq!(epoch_rule(0.4, 8), 101);
        assert_eq!(epoch_rule(1.0, 8), 101);
    }

    #[test]
    fn epoch_cap_applies() {
        let spec = ExperimentSpec {
            max_iterations: 800,
            ..Default::default()
        };
        assert_eq!(spec.epochs_for(0.01, 8), (100, true));
        assert_eq!(spec.epochs_for(0.4, 8), (100, true));
        let spec = ExperimentSpec::default();
        assert_eq!(spec.epochs_for(0.4, 8), (101, false));
    }

    #[test]
    fn partition_rules() {
        let spec = ExperimentSpec::default();
        assert_eq!(spec.partition(160).unwrap(), (8, 20));
        assert!(spec.partition(161).is_err());
        let spec = ExperimentSpec {
            batch_size: Some(2),
            ..Default::default()
        };
        assert_eq!(spec.partition(6).unwrap(), (3, 2));
    }

    #[test]
    fn series_index_keeps_tail_and_stride() {
        let idx = SeriesIndex::new(1000, 8, 10);
        assert_eq!(idx.kept[0], 0);
        assert!(idx.kept.contains(&1000));
        assert_eq!(idx.tail_start, 921);
        assert_eq!(idx.kept.iter().filter(|&&k| k >= 921).count(), 80);
        assert!(idx.slot_of[101].is_some());
        assert!(idx.slot_of[102].is_none());
    }

    #[test]
    fn detrend_removes_lines() {
        let line: Vec<f64> = (0..20).map(|t| 3.0 - 0.5 * t as f64).collect();
        assert!(detrend(&line).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn spec_json_round_trip_and_defaults() {
        let spec: ExperimentSpec = serde_json::from_str(r#"{"kind":"variance-check","num_terms":6,"batch_size":2}"#).unwrap();
        assert_eq!(spec.kind, ExperimentKind::VarianceCheck);
        assert_eq!(spec.batches, 8);
        let back: ExperimentSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"bogus":1}"#).is_err());
    }
}
