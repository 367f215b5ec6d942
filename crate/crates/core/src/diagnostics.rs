//! Ensemble statistics: mergeable moment accumulators, relative variance and
//! mean errors, empirical 1-D Wasserstein distance, log-log slopes and
//! autocorrelation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: u64, got: u64 },
    #[error("reference has zero norm")]
    ZeroReference,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty sample set")]
    Empty,
    #[error("log-log fit needs strictly positive values, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("slot count mismatch when merging: {0} vs {1}")]
    SlotMismatch(usize, usize),
}

/// Online mean and second central moment (Welford), mergeable with Chan's
/// pairwise update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let mut w = Self::new();
        for &v in values {
            w.push(v);
        }
        w
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn population_variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    /// Standard error of the mean.
    pub fn standard_error(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// One [`Welford`] accumulator per slot (iteration or phase).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMoments {
    slots: Vec<Welford>,
}

impl EnsembleMoments {
    pub fn new(slots: usize) -> Self {
        Self {
            slots: vec![Welford::new(); slots],
        }
    }

    pub fn push(&mut self, slot: usize, value: f64) {
        self.slots[slot].push(value);
    }

    pub fn merge(&mut self, other: &EnsembleMoments) -> Result<(), DiagnosticsError> {
        if self.slots.len() != other.slots.len() {
            return Err(DiagnosticsError::SlotMismatch(self.slots.len(), other.slots.len()));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.merge(b);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, i: usize) -> &Welford {
        &self.slots[i]
    }

    pub fn slots(&self) -> &[Welford] {
        &self.slots
    }
}

/// `N V̂ / σ² − 1` for the variance held by `moments`.
pub fn relative_variance_error(moments: &Welford, num_terms: usize, sigma2: f64) -> Result<f64, DiagnosticsError> {
    if moments.count() < 2 {
        return Err(DiagnosticsError::TooFewObservations {
            needed: 2,
            got: moments.count(),
        });
    }
    Ok(relative_variance_error_of(moments.variance(), num_terms, sigma2))
}

pub fn relative_variance_error_of(variance: f64, num_terms: usize, sigma2: f64) -> f64 {
    num_terms as f64 * variance / sigma2 - 1.0
}

/// `|m − μ|₂ / |μ|₂`.
pub fn relative_mean_error(running_mean: &[f64], reference: &[f64]) -> Result<f64, DiagnosticsError> {
    if running_mean.len() != reference.len() {
        return Err(DiagnosticsError::LengthMismatch(running_mean.len(), reference.len()));
    }
    let norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(DiagnosticsError::ZeroReference);
    }
    let diff = running_mean
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

/// Exact W₂ between the empirical measures of two 1-D sample sets.
///
/// Both quantile functions are step functions; they are compared on the merged
/// grid of their breakpoints, which for equal sizes reduces to pairing order
/// statistics.
pub fn empirical_w2_1d(a: &[f64], b: &[f64]) -> Result<f64, DiagnosticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0_f64;
    let mut total = 0.0;
    while i < na && j < nb {
        // next breakpoints, compared exactly in integer arithmetic
        let lhs = (i as u128 + 1) * nb as u128;
        let rhs = (j as u128 + 1) * na as u128;
        let next = if lhs <= rhs {
            (i + 1) as f64 / na as f64
        } else {
            (j + 1) as f64 / nb as f64
        };
        total += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    Ok(total.max(0.0).sqrt())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64, DiagnosticsError> {
    if xs.len() != ys.len() {
        return Err(DiagnosticsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(DiagnosticsError::TooFewObservations {
            needed: 2,
            got: xs.len() as u64,
        });
    }
    if let Some((&x, &y)) = xs.iter().zip(ys).find(|(x, y)| !(**x > 0.0 && **y > 0.0)) {
        return Err(DiagnosticsError::NonPositive(x, y));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Sample autocorrelation of `series` at lags `0..=max_lag`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Vec<f64> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n.max(1) as f64;
    let c0: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|lag| {
            if c0 == 0.0 {
                return if lag == 0 { 1.0 } else { 0.0 };
            }
            series
                .iter()
                .zip(&series[lag..])
                .map(|(a, b)| (a - mean) * (b - mean))
                .sum::<f64>()
                / c0
        })
        .collect()
}

/// Periodicity summary of a series against a candidate period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodicityCheck {
    pub period: usize,
    pub autocorrelation: Vec<f64>,
    /// Lag in `1..=⌊3·period/2⌋` with the largest autocorrelation.
    pub peak_lag: usize,
    /// Autocorrelation at `period`.
    pub at_period: f64,
    /// `3/√T`, the white-noise band for a series of length `T`.
    pub noise_band: f64,
}

impl PeriodicityCheck {
    /// The autocorrelation has a local maximum at the period that clears the
    /// noise band. A smooth periodic signal in short-memory noise keeps a large
    /// lag-1 value, so the global maximum is not required to sit at the period.
    pub fn is_periodic(&self) -> bool {
        let acf = &self.autocorrelation;
        let p = self.period;
        p >= 2
            && p + 1 < acf.len()
            && acf[p] > acf[p - 1]
            && acf[p] > acf[p + 1]
            && self.at_period > self.noise_band
    }
}

pub fn periodicity(series: &[f64], period: usize) -> PeriodicityCheck {
    let window = (3 * period / 2).max(period);
    let acf = autocorrelation(series, window);
    let peak_lag = (1..acf.len())
        .max_by(|&a, &b| acf[a].total_cmp(&acf[b]))
        .unwrap_or(0);
    PeriodicityCheck {
        period,
        at_period: acf.get(period).copied().unwrap_or(0.0),
        peak_lag,
        noise_band: 3.0 / (series.len().max(1) as f64).sqrt(),
        autocorrelation: acf,
    }
}

/// Time-average variance of a single chain after `burn_in` samples.
pub fn time_average_variance(samples: &[f64], burn_in: usize) -> Welford {
    Welford::from_slice(samples.get(burn_in..).unwrap_or(&[]))
}
