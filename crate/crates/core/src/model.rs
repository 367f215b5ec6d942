//! Finite-sum potentials `F(x) = (1/N) Σ g_i(x)` and their gradients.
//!
//! Two concrete models are provided: the one-dimensional Gaussian mean model
//! used for the closed-form bias analysis, and Bayesian logistic regression
//! with a diagonal Gaussian prior. Both are immutable once built and can be
//! shared across threads.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prior variance `λ²` used for every coordinate of the logistic prior.
pub const DEFAULT_PRIOR_VARIANCE: f64 = 25.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("term index {index} out of range for a model with {num_terms} terms")]
    IndexOutOfRange { index: usize, num_terms: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model needs at least one term")]
    Empty,
    #[error("scale parameter must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("row {row}: label {value} is not 0 or 1")]
    InvalidLabel { row: usize, value: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A potential of finite-sum form, `F = (1/N) Σ_i g_i`.
///
/// Term indices are zero-based.
pub trait FiniteSumModel: Send + Sync {
    fn dim(&self) -> usize;

    fn num_terms(&self) -> usize;

    /// `F(x)`.
    fn potential(&self, x: &[f64]) -> f64;

    /// `g_i(x)`. Panics if `i` is out of range.
    fn term_potential(&self, i: usize, x: &[f64]) -> f64;

    /// Writes `∇F(x)` into `out`.
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Writes the mean of `∇g_i(x)` over `batch` into `out`.
    ///
    /// A batch of `N` distinct indices is the whole data set, so the
    /// implementation must agree bit-for-bit with [`FiniteSumModel::gradient`]
    /// in that case. Callers guarantee the indices are distinct and in range.
    fn batch_gradient(&self, batch: &[usize], x: &[f64], out: &mut [f64]);

    /// Writes `∇g_i(x)` into `out`, checking the index.
    fn term_gradient(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        if i >= self.num_terms() {
            return Err(ModelError::IndexOutOfRange {
                index: i,
                num_terms: self.num_terms(),
            });
        }
        self.batch_gradient(&[i], x, out);
        Ok(())
    }
}

/// Overflow-safe `log(1 + e^t)`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Overflow-safe logistic function.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Posterior for the mean of Gaussian data with known scale:
/// `g_i(x) = N (x - y_i)² / (2σ²)`, so `X ~ N(ȳ, σ²/N)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMeanModel {
    data: Vec<f64>,
    mean: f64,
    sigma2: f64,
}

impl GaussianMeanModel {
    pub fn new(data: Vec<f64>, sigma2: f64) -> Result<Self, ModelError> {
        if data.is_empty() {
            return Err(ModelError::Empty);
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(ModelError::InvalidScale(sigma2));
        }
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        Ok(Self { data, mean, sigma2 })
    }

    /// Draws `N` standard normal observations.
    pub fn sample_standard(num_terms: usize, sigma2: f64, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..num_terms).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(data, sigma2)
    }

    /// Rescales the data about its mean so that the without-replacement
    /// variance of a size-`batch_size` batch mean equals `target`.
    pub fn with_batch_mean_variance(
        data: Vec<f64>,
        sigma2: f64,
        batch_size: usize,
        target: f64,
    ) -> Result<Self, ModelError> {
        let base = Self::new(data, sigma2)?;
        let current = crate::batching::batch_mean_variance(&base.data, batch_size);
        if current <= 0.0 || target < 0.0 {
            return Err(ModelError::InvalidScale(target));
        }
        let scale = (target / current).sqrt();
        let data = base
            .data
            .iter()
            .map(|y| base.mean + scale * (y - base.mean))
            .collect();
        Self::new(data, sigma2)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Strong-convexity and smoothness constant, `μ = L = N/σ²`.
    pub fn curvature(&self) -> f64 {
        self.data.len() as f64 / self.sigma2
    }

    /// Target variance `σ²/N`.
    pub fn target_variance(&self) -> f64 {
        self.sigma2 / self.data.len() as f64
    }

    /// Converts a step in preconditioned time (where the drift coefficient on
    /// `x_k` is `1 - h`) to the raw step `σ² h / N`.
    pub fn raw_step(&self, preconditioned_step: f64) -> f64 {
        preconditioned_step / self.curvature()
    }

    pub fn full_gradient_scalar(&self, x: f64) -> f64 {
        self.curvature() * (x - self.mean)
    }
}

impl FiniteSumModel for GaussianMeanModel {
    fn dim(&self) -> usize {
        1
    }

    fn num_terms(&self) -> usize {
        self.data.len()
    }

    fn potential(&self, x: &[f64]) -> f64 {
        self.data
            .iter()
            .map(|y| (x[0] - y).powi(2))
            .sum::<f64>()
            / (2.0 * self.sigma2)
    }

    fn term_potential(&self, i: usize, x: &[f64]) -> f64 {
        self.curvature() * (x[0] - self.data[i]).powi(2) / 2.0
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.full_gradient_scalar(x[0]);
    }

    fn batch_gradient(&self, batch: &[usize], x: &[f64], out: &mut [f64]) {
        if batch.len() == self.data.len() {
            return self.gradient(x, out);
        }
        let batch_mean = batch.iter().map(|&i| self.data[i]).sum::<f64>() / batch.len() as f64;
        out[0] = self.curvature() * (x[0] - batch_mean);
    }
}

/// Bayesian logistic regression with prior `D = diag(N λ_j²)`.
///
/// Per-term potential `g_i(x) = N (xᵀD⁻¹x − z_i xᵀỹ_i + softplus(xᵀỹ_i))`, so
/// the prior quadratic is carried inside every term and
/// `F(x) = |x|²_Λ⁻¹ + Σ_i (softplus(xᵀỹ_i) − z_i xᵀỹ_i)` where `Λ = diag(λ_j²)`.
/// This is a Gaussian prior with variance `λ_j²/2` per coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticRegressionModel {
    dim: usize,
    /// Row-major `N × d` feature matrix, first column is the intercept.
    features: Vec<f64>,
    labels: Vec<f64>,
    /// `1 / D_jj = 1 / (N λ_j²)`.
    prior_precision: Vec<f64>,
}

impl LogisticRegressionModel {
    /// Builds a model from augmented features (intercept column included).
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
        prior_variance: f64,
    ) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::Empty);
        }
        if features.len() != labels.len() * dim {
            return Err(ModelError::DimensionMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if !(prior_variance > 0.0 && prior_variance.is_finite()) {
            return Err(ModelError::InvalidScale(prior_variance));
        }
        for (row, &z) in labels.iter().enumerate() {
            if z > 1 {
                return Err(ModelError::InvalidLabel {
                    row: row + 1,
                    value: z.to_string(),
                });
            }
        }
        let n = labels.len() as f64;
        Ok(Self {
            dim,
            features,
            labels: labels.into_iter().map(f64::from).collect(),
            prior_precision: vec![1.0 / (n * prior_variance); dim],
        })
    }

    /// Builds a model from raw features, prepending the intercept column.
    pub fn from_unaugmented(
        raw_dim: usize,
        raw_features: &[f64],
        labels: Vec<u8>,
        prior_variance: f64,
    ) -> Result<Self, ModelError> {
        if raw_features.len() != labels.len() * raw_dim {
            return Err(ModelError::DimensionMismatch {
                expected: labels.len() * raw_dim,
                got: raw_features.len(),
            });
        }
        let mut features = Vec::with_capacity(labels.len() * (raw_dim + 1));
        for row in raw_features.chunks(raw_dim.max(1)).take(labels.len()) {
            features.push(1.0);
            features.extend_from_slice(&row[..raw_dim]);
        }
        Self::new(raw_dim + 1, features, labels, prior_variance)
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i] as u8
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.labels.iter().map(|&z| z as u8)
    }

    /// Diagonal of `D`.
    pub fn prior_diagonal(&self) -> Vec<f64> {
        self.prior_precision.iter().map(|p| 1.0 / p).collect()
    }

    /// Keeps the first `⌊N/multiple⌋·multiple` rows.
    pub fn truncated_to_multiple(&self, multiple: usize) -> Result<Self, ModelError> {
        let n = self.labels.len();
        let keep = n / multiple.max(1) * multiple.max(1);
        if keep == 0 {
            return Err(ModelError::Empty);
        }
        if keep < n {
            log::warn!(
                "dropping {} of {} rows so the data set splits into batches of {}",
                n - keep,
                n,
                multiple
            );
        }
        let prior_variance = 1.0 / (self.prior_precision[0] * n as f64);
        Self::new(
            self.dim,
            self.features[..keep * self.dim].to_vec(),
            self.labels().take(keep).collect(),
            prior_variance,
        )
    }

    /// Standardizes every non-intercept column to zero mean and unit variance.
    pub fn standardized(&self) -> Self {
        let n = self.labels.len() as f64;
        let mut out = self.clone();
        for j in 1..self.dim {
            let col = || self.features.iter().skip(j).step_by(self.dim);
            let mean = col().sum::<f64>() / n;
            let var = col().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for row in out.features.chunks_mut(self.dim) {
                row[j] = (row[j] - mean) / sd;
            }
        }
        out
    }

    /// Upper bound on the smoothness constant: `2/λ² + (1/4) Σ_i |ỹ_i|²`.
    pub fn smoothness_upper_bound(&self) -> f64 {
        self.prior_curvature() + 0.25 * dot(&self.features, &self.features)
    }

    /// Curvature of the prior part of `F`, `2 N / D_jj` (largest over `j`).
    pub fn prior_curvature(&self) -> f64 {
        let n = self.labels.len() as f64;
        self.prior_precision
            .iter()
            .fold(0.0_f64, |acc, p| acc.max(2.0 * n * p))
    }

    fn data_term(&self, i: usize, x: &[f64]) -> f64 {
        let t = dot(self.feature_row(i), x);
        softplus(t) - self.labels[i] * t
    }

    fn prior_quadratic(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.prior_precision)
            .map(|(v, p)| v * v * p)
            .sum()
    }

    /// Accumulates `Σ_{i∈batch} (sigmoid(xᵀỹ_i) − z_i) ỹ_i` into `acc`.
    fn accumulate_residuals(&self, indices: impl Iterator<Item = usize>, x: &[f64], acc: &mut [f64]) {
        for i in indices {
            let row = self.feature_row(i);
            let w = sigmoid(dot(row, x)) - self.labels[i];
            for (a, r) in acc.iter_mut().zip(row) {
                *a += w * r;
            }
        }
    }

    fn finish_gradient(&self, x: &[f64], residual_scale: f64, out: &mut [f64]) {
        let n = self.labels.len() as f64;
        for ((o, v), p) in out.iter_mut().zip(x).zip(&self.prior_precision) {
            *o = 2.0 * n * p * v + residual_scale * *o;
        }
    }
}

impl FiniteSumModel for LogisticRegressionModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_terms(&self) -> usize {
        self.labels.len()
    }

    fn potential(&self, x: &[f64]) -> f64 {
        let n = self.labels.len() as f64;
        n * self.prior_quadratic(x) + (0..self.labels.len()).map(|i| self.data_term(i, x)).sum::<f64>()
    }

    fn term_potential(&self, i: usize, x: &[f64]) -> f64 {
        let n = self.labels.len() as f64;
        n * (self.prior_quadratic(x) + self.data_term(i, x))
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.accumulate_residuals(0..self.labels.len(), x, out);
        self.finish_gradient(x, 1.0, out);
    }

    fn batch_gradient(&self, batch: &[usize], x: &[f64], out: &mut [f64]) {
        if batch.len() == self.labels.len() {
            return self.gradient(x, out);
        }
        out.fill(0.0);
        self.accumulate_residuals(batch.iter().copied(), x, out);
        let scale = self.labels.len() as f64 / batch.len() as f64;
        self.finish_gradient(x, scale, out);
    }
}

/// Simulated logistic-regression data together with the generating parameters.
#[derive(Debug, Clone)]
pub struct SimData {
    pub model: LogisticRegressionModel,
    pub true_parameters: Vec<f64>,
    pub seed: u64,
}

/// Sidecar metadata written next to an exported SimData CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimDataSidecar {
    pub seed: u64,
    pub num_terms: usize,
    pub num_features: usize,
    pub true_parameters: Vec<f64>,
}

/// Feature variance for raw feature `j` (1-based).
pub fn simdata_feature_variance(j: usize) -> f64 {
    match j {
        0..=5 => 25.0,
        6..=10 => 1.0,
        _ => 0.04,
    }
}

/// Generates a simulated logistic-regression data set with `num_terms` rows and
/// `num_features` raw features (intercept added on top).
pub fn generate_simdata(seed: u64, num_terms: usize, num_features: usize) -> Result<SimData, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = num_features + 1;
    let true_parameters: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let sds: Vec<f64> = (1..=num_features)
        .map(|j| simdata_feature_variance(j).sqrt())
        .collect();
    let mut features = Vec::with_capacity(num_terms * dim);
    let mut labels = Vec::with_capacity(num_terms);
    for _ in 0..num_terms {
        let start = features.len();
        features.push(1.0);
        for sd in &sds {
            let z: f64 = rng.sample(StandardNormal);
            features.push(sd * z);
        }
        let p = sigmoid(dot(&features[start..], &true_parameters));
        let label = Bernoulli::new(p).expect("probability in [0, 1]").sample(&mut rng);
        labels.push(u8::from(label));
    }
    let model = LogisticRegressionModel::new(dim, features, labels, DEFAULT_PRIOR_VARIANCE)?;
    Ok(SimData {
        model,
        true_parameters,
        seed,
    })
}

impl SimData {
    /// Writes `<stem>.csv` (raw features then label, with a header row) and
    /// `<stem>.json` recording the seed and generating parameters.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)?;
        let d = self.model.dim();
        let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?);
        let header: Vec<String> = (1..d)
            .map(|j| format!("x{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.model.num_terms() {
            let row = self.model.feature_row(i);
            let cells: Vec<String> = row[1..]
                .iter()
                .map(|v| format!("{v:e}"))
                .chain(std::iter::once(self.model.label(i).to_string()))
                .collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
        let sidecar = SimDataSidecar {
            seed: self.seed,
            num_terms: self.model.num_terms(),
            num_features: d - 1,
            true_parameters: self.true_parameters.clone(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

/// Options for [`load_dataset_csv`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvOptions {
    /// Zero-based column holding the 0/1 label. Negative values count from the end.
    pub label_column: isize,
    pub has_header: bool,
    pub standardize: bool,
    pub prior_variance: f64,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            label_column: -1,
            has_header: false,
            standardize: false,
            prior_variance: DEFAULT_PRIOR_VARIANCE,
        }
    }
}

fn parse_label(raw: &str, row: usize) -> Result<u8, ModelError> {
    let invalid = || ModelError::InvalidLabel {
        row,
        value: raw.to_string(),
    };
    let v: f64 = raw.trim().parse().map_err(|_| invalid())?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(invalid())
    }
}

/// Loads a rectangular numeric CSV with a binary label column.
///
/// Row numbers in errors are 1-based and count the header line when present.
pub fn load_dataset_csv(path: &Path, options: &CsvOptions) -> Result<LogisticRegressionModel, ModelError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let row_offset = usize::from(options.has_header);
    let mut width: Option<usize> = None;
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1 + row_offset;
        let record = record.map_err(|e| ModelError::Parse {
            row,
            message: e.to_string(),
        })?;
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(ModelError::Parse {
                row,
                message: format!("expected {w} columns, found {}", record.len()),
            });
        }
        let label_col = if options.label_column < 0 {
            w as isize + options.label_column
        } else {
            options.label_column
        };
        if label_col < 0 || label_col as usize >= w {
            return Err(ModelError::Parse {
                row,
                message: format!("label column {} outside {w} columns", options.label_column),
            });
        }
        let label_col = label_col as usize;
        for (j, cell) in record.iter().enumerate() {
            if j == label_col {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| ModelError::Parse {
                row,
                message: format!("column {j}: cannot parse {cell:?} as a number"),
            })?;
            raw.push(v);
        }
        labels.push(parse_label(&record[label_col], row)?);
    }
    let width = width.ok_or(ModelError::Empty)?;
    log::info!(
        "loaded {} rows with {} feature columns from {}",
        labels.len(),
        width - 1,
        path.display()
    );
    let model =
        LogisticRegressionModel::from_unaugmented(width - 1, &raw, labels, options.prior_variance)?;
    Ok(if options.standardize {
        model.standardized()
    } else {
        model
    })
}

/// Central finite-difference directional curvature `vᵀ∇²F(x)v / |v|²`.
pub fn directional_curvature<M: FiniteSumModel + ?Sized>(model: &M, x: &[f64], v: &[f64], eps: f64) -> f64 {
    let d = model.dim();
    let norm2 = dot(v, v);
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - eps * b).collect();
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    model.gradient(&plus, &mut gp);
    model.gradient(&minus, &mut gm);
    gp.iter()
        .zip(&gm)
        .zip(v)
        .map(|((a, b), c)| (a - b) * c)
        .sum::<f64>()
        / (2.0 * eps * norm2)
}

/// Empirical regularity constants along random probes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegularityEstimate {
    /// Smallest directional curvature seen (lower estimate of `μ`).
    pub min_curvature: f64,
    /// Largest directional curvature seen (lower estimate of `L`).
    pub max_curvature: f64,
    /// Largest `|vᵀ(∇²F(x) − ∇²F(y))v| / |x − y|` seen (lower estimate of `L₁`).
    pub hessian_lipschitz: f64,
}

/// Probes strong convexity, smoothness and Hessian-Lipschitz constants at
/// `probes` random points around `center` with the given spread.
pub fn probe_regularity<M: FiniteSumModel + ?Sized>(
    model: &M,
    center: &[f64],
    spread: f64,
    probes: usize,
    seed: u64,
) -> RegularityEstimate {
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let mut est = RegularityEstimate {
        min_curvature: f64::INFINITY,
        max_curvature: 0.0,
        hessian_lipschitz: 0.0,
    };
    let eps = 1e-4 * spread.max(1e-3);
    for _ in 0..probes {
        let x: Vec<f64> = center.iter().zip(normal(d)).map(|(c, z)| c + spread * z).collect();
        let y: Vec<f64> = center.iter().zip(normal(d)).map(|(c, z)| c + spread * z).collect();
        let v = normal(d);
        let cx = directional_curvature(model, &x, &v, eps);
        let cy = directional_curvature(model, &y, &v, eps);
        est.min_curvature = est.min_curvature.min(cx).min(cy);
        est.max_curvature = est.max_curvature.max(cx).max(cy);
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist > 0.0 {
            est.hessian_lipschitz = est.hessian_lipschitz.max((cx - cy).abs() * dot(&v, &v) / dist);
        }
    }
    est
}

/// `z ↦ F(shift + factor·z)`. Running a sampler in `z` with identity mass is
/// the same as using the dense metric `(factor·factorᵀ)⁻¹` in `x`.
pub struct AffineReparam<'a, M: ?Sized> {
    model: &'a M,
    shift: DVector<f64>,
    factor: DMatrix<f64>,
}

impl<'a, M: FiniteSumModel + ?Sized> AffineReparam<'a, M> {
    pub fn new(model: &'a M, shift: &[f64], factor: DMatrix<f64>) -> Result<Self, ModelError> {
        let d = model.dim();
        if shift.len() != d || factor.nrows() != d || factor.ncols() != d {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                got: shift.len().max(factor.nrows()).max(factor.ncols()),
            });
        }
        Ok(Self {
            model,
            shift: DVector::from_column_slice(shift),
            factor,
        })
    }

    /// Maps `z` back to the original coordinates.
    pub fn to_original(&self, z: &[f64]) -> Vec<f64> {
        (&self.shift + &self.factor * DVector::from_column_slice(z)).as_slice().to_vec()
    }

    fn pull_back(&self, grad_x: &[f64], out: &mut [f64]) {
        let g = self.factor.tr_mul(&DVector::from_column_slice(grad_x));
        out.copy_from_slice(g.as_slice());
    }
}

impl<M: FiniteSumModel + ?Sized> FiniteSumModel for AffineReparam<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn num_terms(&self) -> usize {
        self.model.num_terms()
    }

    fn potential(&self, z: &[f64]) -> f64 {
        self.model.potential(&self.to_original(z))
    }

    fn term_potential(&self, i: usize, z: &[f64]) -> f64 {
        self.model.term_potential(i, &self.to_original(z))
    }

    fn gradient(&self, z: &[f64], out: &mut [f64]) {
        let mut g = vec![0.0; self.dim()];
        self.model.gradient(&self.to_original(z), &mut g);
        self.pull_back(&g, out);
    }

    fn batch_gradient(&self, batch: &[usize], z: &[f64], out: &mut [f64]) {
        let mut g = vec![0.0; self.dim()];
        self.model.batch_gradient(batch, &self.to_original(z), &mut g);
        self.pull_back(&g, out);
    }
}

/// Symmetrized central finite-difference Hessian of `F` at `x`.
pub fn numerical_hessian<M: FiniteSumModel + ?Sized>(model: &M, x: &[f64], eps: f64) -> DMatrix<f64> {
    let d = model.dim();
    let mut h = DMatrix::zeros(d, d);
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    let mut probe = x.to_vec();
    for j in 0..d {
        probe[j] = x[j] + eps;
        model.gradient(&probe, &mut gp);
        probe[j] = x[j] - eps;
        model.gradient(&probe, &mut gm);
        probe[j] = x[j];
        for i in 0..d {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * eps);
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Minimizer of `F` by damped Newton iterations from `x0`, stopping when the
/// gradient norm drops below `tol`.
pub fn find_mode<M: FiniteSumModel + ?Sized>(model: &M, x0: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let d = model.dim();
    let mut x = DVector::from_column_slice(x0);
    let mut g = vec![0.0; d];
    for _ in 0..max_iter {
        model.gradient(x.as_slice(), &mut g);
        let grad = DVector::from_column_slice(&g);
        if grad.norm() < tol {
            break;
        }
        let hess = numerical_hessian(model, x.as_slice(), 1e-5);
        let dir = match hess.cholesky() {
            Some(c) => c.solve(&grad),
            None => grad.clone(),
        };
        let f0 = model.potential(x.as_slice());
        let mut t = 1.0;
        loop {
            let trial = &x - &dir * t;
            if model.potential(trial.as_slice()) <= f0 - 1e-4 * t * grad.dot(&dir) || t < 1e-12 {
                x = trial;
                break;
            }
            t *= 0.5;
        }
    }
    x.as_slice().to_vec()
}

/// Extreme eigenvalues `(μ̂, L̂)` of the finite-difference Hessian at `x`.
pub fn curvature_at<M: FiniteSumModel + ?Sized>(model: &M, x: &[f64]) -> (f64, f64) {
    let eig = numerical_hessian(model, x, 1e-5).symmetric_eigen().eigenvalues;
    (eig.min(), eig.max())
}
