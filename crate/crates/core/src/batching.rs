//! Minibatch randomisation: without-replacement index matrices, Robbins-Monro
//! and random-reshuffling schedules, and the variance identities of the
//! resulting stochastic gradients.
//!
//! Indices are zero-based throughout.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FiniteSumModel;
use crate::seeding::stream_rng;

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("cannot draw {rows}x{batch_size} distinct indices from {num_terms}")]
    TooManyIndices {
        rows: usize,
        batch_size: usize,
        num_terms: usize,
    },
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("batch size {batch_size} does not divide {num_terms} terms")]
    NotDivisible { batch_size: usize, num_terms: usize },
    #[error("within-epoch covariance needs at least two batches per epoch, got {0}")]
    SingleBatch(usize),
    #[error("at least one reference sample is required")]
    NoSamples,
    #[error("enumeration over {0} batches is too large; use the Monte Carlo estimator")]
    EnumerationTooLarge(u128),
}

/// Rule for generating the next minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchPolicy {
    /// Independent uniform without-replacement batch every iteration.
    #[serde(rename = "rm")]
    RobbinsMonro,
    /// Shuffle once per epoch and cycle through the `R` resulting batches.
    #[serde(rename = "rr")]
    RandomReshuffling,
}

impl BatchPolicy {
    pub fn short_name(self) -> &'static str {
        match self {
            BatchPolicy::RobbinsMonro => "rm",
            BatchPolicy::RandomReshuffling => "rr",
        }
    }
}

/// An `m × n` matrix of pairwise-distinct indices drawn without replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OmegaMatrix {
    rows: usize,
    batch_size: usize,
    entries: Vec<usize>,
}

impl OmegaMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.entries[i * self.batch_size..(i + 1) * self.batch_size]
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }
}

/// Partial Fisher-Yates over `pool`; the returned slice is a uniformly random
/// ordered selection of `count` elements of the pool.
fn draw_distinct<'a, R: Rng + ?Sized>(pool: &'a mut [usize], count: usize, rng: &mut R) -> &'a [usize] {
    let (chosen, _) = pool.partial_shuffle(rng, count);
    chosen
}

/// Draws `m·n` distinct indices from `0..num_terms`, arranged row-wise.
pub fn sample_omega<R: Rng + ?Sized>(
    rows: usize,
    batch_size: usize,
    num_terms: usize,
    rng: &mut R,
) -> Result<OmegaMatrix, BatchError> {
    if batch_size == 0 {
        return Err(BatchError::EmptyBatch);
    }
    if rows * batch_size > num_terms {
        return Err(BatchError::TooManyIndices {
            rows,
            batch_size,
            num_terms,
        });
    }
    let mut pool: Vec<usize> = (0..num_terms).collect();
    let entries = draw_distinct(&mut pool, rows * batch_size, rng).to_vec();
    Ok(OmegaMatrix {
        rows,
        batch_size,
        entries,
    })
}

/// Serializable replay state of a [`BatchSchedule`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub policy: BatchPolicy,
    pub num_terms: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stream: u64,
    /// Number of batches already handed out.
    pub iteration: u64,
}

/// A seeded, replayable stream of minibatches.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    policy: BatchPolicy,
    num_terms: usize,
    batch_size: usize,
    batches_per_epoch: usize,
    seed: u64,
    stream: u64,
    iteration: u64,
    rng: ChaCha8Rng,
    pool: Vec<usize>,
    /// Current epoch's Ω under RR, row-major.
    epoch: Vec<usize>,
    batch: Vec<usize>,
}

impl BatchSchedule {
    /// Random reshuffling requires `n | N`; Robbins-Monro only `n ≤ N`.
    pub fn new(
        policy: BatchPolicy,
        num_terms: usize,
        batch_size: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Self, BatchError> {
        if batch_size == 0 {
            return Err(BatchError::EmptyBatch);
        }
        if batch_size > num_terms {
            return Err(BatchError::TooManyIndices {
                rows: 1,
                batch_size,
                num_terms,
            });
        }
        if policy == BatchPolicy::RandomReshuffling && !num_terms.is_multiple_of(batch_size) {
            return Err(BatchError::NotDivisible {
                batch_size,
                num_terms,
            });
        }
        Ok(Self {
            policy,
            num_terms,
            batch_size,
            batches_per_epoch: num_terms / batch_size,
            seed,
            stream,
            iteration: 0,
            rng: stream_rng(seed, stream),
            pool: (0..num_terms).collect(),
            epoch: Vec::with_capacity(num_terms),
            batch: Vec::with_capacity(batch_size),
        })
    }

    /// Rebuilds a schedule and fast-forwards it to the recorded iteration.
    pub fn from_state(state: &ScheduleState) -> Result<Self, BatchError> {
        let mut s = Self::new(
            state.policy,
            state.num_terms,
            state.batch_size,
            state.seed,
            state.stream,
        )?;
        for _ in 0..state.iteration {
            s.next_batch();
        }
        Ok(s)
    }

    pub fn state(&self) -> ScheduleState {
        ScheduleState {
            policy: self.policy,
            num_terms: self.num_terms,
            batch_size: self.batch_size,
            seed: self.seed,
            stream: self.stream,
            iteration: self.iteration,
        }
    }

    pub fn policy(&self) -> BatchPolicy {
        self.policy
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_terms(&self) -> usize {
        self.num_terms
    }

    /// `R = ⌊N/n⌋`.
    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Phase of the next batch within its epoch, `k mod R`.
    pub fn phase(&self) -> usize {
        (self.iteration % self.batches_per_epoch as u64) as usize
    }

    /// Returns the batch for the current iteration and advances the counter.
    pub fn next_batch(&mut self) -> &[usize] {
        let n = self.batch_size;
        match self.policy {
            BatchPolicy::RobbinsMonro => {
                let chosen = draw_distinct(&mut self.pool, n, &mut self.rng);
                self.batch.clear();
                self.batch.extend_from_slice(chosen);
            }
            BatchPolicy::RandomReshuffling => {
                let r = self.phase();
                if r == 0 {
                    let all = draw_distinct(&mut self.pool, self.num_terms, &mut self.rng);
                    self.epoch.clear();
                    self.epoch.extend_from_slice(all);
                }
                self.batch.clear();
                self.batch.extend_from_slice(&self.epoch[r * n..(r + 1) * n]);
            }
        }
        self.iteration += 1;
        &self.batch
    }
}

/// Mean of the per-term gradients over `batch`, written into `out`.
pub fn stochastic_gradient<M: FiniteSumModel + ?Sized>(model: &M, batch: &[usize], x: &[f64], out: &mut [f64]) {
    model.batch_gradient(batch, x, out);
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

/// `C_G = N⁻¹ Σ_i E_q |∇g_i − ∇F|²` with the expectation taken over `samples`.
pub fn gradient_spread<M: FiniteSumModel + ?Sized>(model: &M, samples: &[Vec<f64>]) -> Result<f64, BatchError> {
    if samples.is_empty() {
        return Err(BatchError::NoSamples);
    }
    let d = model.dim();
    let n_terms = model.num_terms();
    let mut full = vec![0.0; d];
    let mut term = vec![0.0; d];
    let mut total = 0.0;
    for x in samples {
        model.gradient(x, &mut full);
        for i in 0..n_terms {
            model.batch_gradient(&[i], x, &mut term);
            total += squared_distance(&term, &full);
        }
    }
    Ok(total / (n_terms as f64 * samples.len() as f64))
}

/// Without-replacement finite-population factor `(N − n) / (n (N − 1))`,
/// which is `(R − 1)/(N − 1)` when `R = N/n`.
pub fn finite_population_factor(num_terms: usize, batch_size: usize) -> f64 {
    if num_terms <= 1 {
        return 0.0;
    }
    let (big_n, n) = (num_terms as f64, batch_size as f64);
    (big_n - n) / (n * (big_n - 1.0))
}

/// Stochastic-gradient variance `σ*² = ((R−1)/(N−1)) C_G`.
pub fn sigma_star_exact<M: FiniteSumModel + ?Sized>(
    model: &M,
    samples: &[Vec<f64>],
    batch_size: usize,
) -> Result<f64, BatchError> {
    if batch_size == 0 {
        return Err(BatchError::EmptyBatch);
    }
    let cg = gradient_spread(model, samples)?;
    Ok(finite_population_factor(model.num_terms(), batch_size) * cg)
}

/// Largest number of batches (or batch pairs) enumerated before refusing.
pub const ENUMERATION_LIMIT: u128 = 5_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// `E_{q, ω} |∇f_ω − ∇F|²` by enumerating every size-`n` batch.
pub fn sigma_star_enumerated<M: FiniteSumModel + ?Sized>(
    model: &M,
    samples: &[Vec<f64>],
    batch_size: usize,
) -> Result<f64, BatchError> {
    if samples.is_empty() {
        return Err(BatchError::NoSamples);
    }
    if batch_size == 0 {
        return Err(BatchError::EmptyBatch);
    }
    let n_terms = model.num_terms();
    let count = binomial(n_terms, batch_size);
    if count * samples.len() as u128 > ENUMERATION_LIMIT {
        return Err(BatchError::EnumerationTooLarge(count));
    }
    let d = model.dim();
    let mut full = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut total = 0.0;
    for x in samples {
        model.gradient(x, &mut full);
        for batch in (0..n_terms).combinations(batch_size) {
            model.batch_gradient(&batch, x, &mut g);
            total += squared_distance(&g, &full);
        }
    }
    Ok(total / (count as f64 * samples.len() as f64))
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub standard_error: f64,
}

/// Monte Carlo estimate of `σ*²` from `draws` uniform batches per sample.
pub fn sigma_star_monte_carlo<M: FiniteSumModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    samples: &[Vec<f64>],
    batch_size: usize,
    draws: usize,
    rng: &mut R,
) -> Result<Estimate, BatchError> {
    if samples.is_empty() {
        return Err(BatchError::NoSamples);
    }
    if batch_size == 0 || batch_size > model.num_terms() {
        return Err(BatchError::TooManyIndices {
            rows: 1,
            batch_size,
            num_terms: model.num_terms(),
        });
    }
    let d = model.dim();
    let mut full = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut pool: Vec<usize> = (0..model.num_terms()).collect();
    let mut acc = crate::diagnostics::Welford::new();
    for x in samples {
        model.gradient(x, &mut full);
        for _ in 0..draws {
            let batch = draw_distinct(&mut pool, batch_size, rng);
            model.batch_gradient(batch, x, &mut g);
            acc.push(squared_distance(&g, &full));
        }
    }
    Ok(Estimate {
        value: acc.mean(),
        standard_error: acc.standard_error(),
    })
}

/// Exact variance of a size-`n` without-replacement sample mean of `data`:
/// `(N − n) / (n N (N − 1)) · Σ (y_i − ȳ)²`.
pub fn batch_mean_variance(data: &[f64], batch_size: usize) -> f64 {
    let big_n = data.len() as f64;
    if data.len() <= 1 || batch_size == 0 {
        return 0.0;
    }
    let mean = data.iter().sum::<f64>() / big_n;
    let ss: f64 = data.iter().map(|y| (y - mean).powi(2)).sum();
    finite_population_factor(data.len(), batch_size) * ss / big_n
}

/// Variance of the batch mean by enumerating every size-`n` batch.
pub fn batch_mean_variance_enumerated(data: &[f64], batch_size: usize) -> Result<f64, BatchError> {
    if batch_size == 0 {
        return Err(BatchError::EmptyBatch);
    }
    let count = binomial(data.len(), batch_size);
    if count > ENUMERATION_LIMIT {
        return Err(BatchError::EnumerationTooLarge(count));
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let total: f64 = (0..data.len())
        .combinations(batch_size)
        .map(|b| {
            let m = b.iter().map(|&i| data[i]).sum::<f64>() / batch_size as f64;
            (m - mean).powi(2)
        })
        .sum();
    Ok(total / count as f64)
}

/// How a [`CovarianceCheck`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMethod {
    Enumeration,
    MonteCarlo,
}

/// Observed covariance between two distinct batch means of one RR epoch,
/// together with the predicted value `−V/(R−1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceCheck {
    pub observed: f64,
    pub predicted: f64,
    pub batch_mean_variance: f64,
    /// Zero for enumeration.
    pub standard_error: f64,
    pub method: CheckMethod,
}

/// Largest data set for which [`within_epoch_covariance`] enumerates.
pub const ENUMERATION_MAX_TERMS: usize = 12;

/// Covariance of two distinct same-epoch batch means under random reshuffling.
///
/// Enumerates every ordered pair of disjoint batches when `N ≤ 12`, otherwise
/// averages `mc_draws` random epochs drawn from `rng`.
pub fn within_epoch_covariance<R: Rng + ?Sized>(
    data: &[f64],
    batch_size: usize,
    mc_draws: usize,
    rng: &mut R,
) -> Result<CovarianceCheck, BatchError> {
    let big_n = data.len();
    if batch_size == 0 {
        return Err(BatchError::EmptyBatch);
    }
    if !big_n.is_multiple_of(batch_size) {
        return Err(BatchError::NotDivisible {
            batch_size,
            num_terms: big_n,
        });
    }
    let batches = big_n / batch_size;
    if batches < 2 {
        return Err(BatchError::SingleBatch(batches));
    }
    let mean = data.iter().sum::<f64>() / big_n as f64;
    let v = batch_mean_variance(data, batch_size);
    let predicted = -v / (batches as f64 - 1.0);
    let batch_dev = |b: &[usize]| b.iter().map(|&i| data[i]).sum::<f64>() / batch_size as f64 - mean;

    if big_n <= ENUMERATION_MAX_TERMS {
        let mut total = 0.0;
        let mut count = 0u64;
        for first in (0..big_n).combinations(batch_size) {
            let rest: Vec<usize> = (0..big_n).filter(|i| !first.contains(i)).collect();
            let a = batch_dev(&first);
            for second in rest.iter().copied().combinations(batch_size) {
                total += a * batch_dev(&second);
                count += 1;
            }
        }
        Ok(CovarianceCheck {
            observed: total / count as f64,
            predicted,
            batch_mean_variance: v,
            standard_error: 0.0,
            method: CheckMethod::Enumeration,
        })
    } else {
        let mut pool: Vec<usize> = (0..big_n).collect();
        let mut acc = crate::diagnostics::Welford::new();
        for _ in 0..mc_draws {
            let omega = draw_distinct(&mut pool, 2 * batch_size, rng);
            acc.push(batch_dev(&omega[..batch_size]) * batch_dev(&omega[batch_size..]));
        }
        Ok(CovarianceCheck {
            observed: acc.mean(),
            predicted,
            batch_mean_variance: v,
            standard_error: acc.standard_error(),
            method: CheckMethod::MonteCarlo,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianMeanModel;
    use rand::SeedableRng;

    #[test]
    fn omega_full_row_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let om = sample_omega(1, 7, 7, &mut rng).unwrap();
        let mut v = om.row(0).to_vec();
        v.sort_unstable();
        assert_eq!(v, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn omega_rows_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let om = sample_omega(3, 2, 6, &mut rng).unwrap();
        let mut all: Vec<usize> = (0..3).flat_map(|r| om.row(r).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn omega_rejects_oversized_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            sample_omega(3, 3, 8, &mut rng),
            Err(BatchError::TooManyIndices {
                rows: 3,
                batch_size: 3,
                num_terms: 8
            })
        );
    }

    #[test]
    fn rr_first_epoch_covers_everything() {
        let mut s = BatchSchedule::new(BatchPolicy::RandomReshuffling, 4, 2, 9, 0).unwrap();
        let mut seen = s.next_batch().to_vec();
        seen.extend_from_slice(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rm_inclusion_is_uniform() {
        let (big_n, n, draws) = (10, 3, 20_000);
        let mut s = BatchSchedule::new(BatchPolicy::RobbinsMonro, big_n, n, 4, 0).unwrap();
        let mut hits = vec![0u32; big_n];
        for _ in 0..draws {
            for &i in s.next_batch() {
                hits[i] += 1;
            }
        }
        let p = n as f64 / big_n as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - draws as f64 * p).abs() < 4.0 * sd, "{h}");
        }
    }

    #[test]
    fn rr_requires_divisibility() {
        assert!(matches!(
            BatchSchedule::new(BatchPolicy::RandomReshuffling, 10, 3, 0, 0),
            Err(BatchError::NotDivisible { .. })
        ));
        assert!(BatchSchedule::new(BatchPolicy::RobbinsMonro, 10, 3, 0, 0).is_ok());
    }

    #[test]
    fn replay_from_state_matches() {
        let mut a = BatchSchedule::new(BatchPolicy::RandomReshuffling, 12, 3, 5, 7).unwrap();
        for _ in 0..9 {
            a.next_batch();
        }
        let json = serde_json::to_string(&a.state()).unwrap();
        let mut b = BatchSchedule::from_state(&serde_json::from_str(&json).unwrap()).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn full_batch_gradient_equals_full_gradient() {
        let m = GaussianMeanModel::sample_standard(6, 1.0, 1).unwrap();
        let mut g = [0.0];
        let mut full = [0.0];
        stochastic_gradient(&m, &[3, 1, 0, 5, 2, 4], &[0.4], &mut g);
        m.gradient(&[0.4], &mut full);
        assert_eq!(g, full);
    }

    #[test]
    fn gaussian_stochastic_gradient_uses_batch_mean() {
        let m = GaussianMeanModel::new(vec![1.0, 2.0, 4.0, 8.0], 2.0).unwrap();
        let mut g = [0.0];
        stochastic_gradient(&m, &[1, 3], &[1.0], &mut g);
        assert!((g[0] - 2.0 * (1.0 - 5.0)).abs() < 1e-14);
    }

    #[test]
    fn sigma_star_zero_for_full_batch() {
        let m = GaussianMeanModel::sample_standard(8, 1.0, 4).unwrap();
        assert_eq!(sigma_star_exact(&m, &[vec![0.3]], 8).unwrap(), 0.0);
        assert_eq!(sigma_star_exact(&m, &[], 2), Err(BatchError::NoSamples));
    }

    #[test]
    fn covariance_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            within_epoch_covariance(&[1.0, 2.0], 2, 10, &mut rng),
            Err(BatchError::SingleBatch(1))
        );
    }

    #[test]
    fn constant_data_has_no_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = within_epoch_covariance(&[2.5; 6], 2, 10, &mut rng).unwrap();
        assert_eq!(c.observed, 0.0);
        assert_eq!(c.batch_mean_variance, 0.0);
    }

    #[test]
    fn binomial_small_values() {
        assert_eq!(binomial(6, 2), 15);
        assert_eq!(binomial(10, 5), 252);
        assert_eq!(binomial(3, 4), 0);
    }
}
