//! GD/SGD/ULA/SGLD update rules, chain execution with phase bookkeeping,
//! parallel ensembles, synchronously coupled pairs, and an HMC reference
//! sampler.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::Scheme;
use crate::batching::{BatchError, BatchPolicy, BatchSchedule};
use crate::diagnostics::{EnsembleMoments, Welford};
use crate::model::FiniteSumModel;
use crate::seeding::{stream_id, stream_rng, StreamKind};

/// Default number of discarded steps before ensemble statistics are taken.
pub const DEFAULT_BURN_IN: usize = 1000;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite iterate at step {step} (realization {realization})")]
    NonFinite { step: usize, realization: u64 },
    #[error("gradient source does not match the configured scheme {0:?}")]
    SchemeMismatch(Scheme),
    #[error("expected a point of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Batch(#[from] BatchError),
}

/// `x − h g + √(2h) ξ`, written into `x`.
pub fn sgld_step(x: &mut [f64], grad_hat: &[f64], h: f64, noise: &[f64]) {
    let scale = (2.0 * h).sqrt();
    for ((xi, g), z) in x.iter_mut().zip(grad_hat).zip(noise) {
        *xi = *xi - h * g + scale * z;
    }
}

/// `x − h g`, written into `x`.
pub fn descent_step(x: &mut [f64], grad: &[f64], h: f64) {
    for (xi, g) in x.iter_mut().zip(grad) {
        *xi -= h * g;
    }
}

/// One ULA step with the full gradient; `scratch` receives `∇F(x)`.
pub fn ula_step<M: FiniteSumModel + ?Sized>(model: &M, x: &mut [f64], h: f64, noise: &[f64], scratch: &mut [f64]) {
    model.gradient(x, scratch);
    sgld_step(x, scratch, h, noise);
}

/// Supplier of the `ξ_k` in the Langevin update.
pub trait NoiseSource {
    fn fill(&mut self, out: &mut [f64]);
}

/// Standard normal noise from a ChaCha8 stream.
pub struct GaussianNoise(ChaCha8Rng);

impl GaussianNoise {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self(stream_rng(seed, stream))
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        Self(rng)
    }
}

impl NoiseSource for GaussianNoise {
    fn fill(&mut self, out: &mut [f64]) {
        for z in out {
            *z = self.0.sample(StandardNormal);
        }
    }
}

/// Zero noise, turning the Langevin rules into GD/SGD.
pub struct NoNoise;

impl NoiseSource for NoNoise {
    fn fill(&mut self, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Pre-recorded noise, cycled if exhausted.
pub struct ReplayNoise {
    values: Vec<f64>,
    cursor: usize,
}

impl ReplayNoise {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, cursor: 0 }
    }
}

impl NoiseSource for ReplayNoise {
    fn fill(&mut self, out: &mut [f64]) {
        for z in out {
            *z = self.values[self.cursor % self.values.len()];
            self.cursor += 1;
        }
    }
}

/// Where the drift comes from at each step.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // one per chain, read every step
pub enum GradientSource {
    Full,
    Minibatch(BatchSchedule),
}

impl GradientSource {
    /// Builds the source matching `scheme` for realization `realization`.
    pub fn for_scheme(
        scheme: Scheme,
        num_terms: usize,
        batch_size: usize,
        seed: u64,
        realization: u64,
    ) -> Result<Self, BatchError> {
        let policy = match scheme {
            Scheme::Ula => return Ok(GradientSource::Full),
            Scheme::Rm => BatchPolicy::RobbinsMonro,
            Scheme::Rr => BatchPolicy::RandomReshuffling,
        };
        let stream = stream_id(realization, StreamKind::Batches);
        Ok(GradientSource::Minibatch(BatchSchedule::new(
            policy, num_terms, batch_size, seed, stream,
        )?))
    }

    fn matches(&self, scheme: Scheme) -> bool {
        match (self, scheme) {
            (GradientSource::Full, Scheme::Ula) => true,
            (GradientSource::Minibatch(s), Scheme::Rm) => s.policy() == BatchPolicy::RobbinsMonro,
            (GradientSource::Minibatch(s), Scheme::Rr) => s.policy() == BatchPolicy::RandomReshuffling,
            _ => false,
        }
    }

    pub fn evaluate<M: FiniteSumModel + ?Sized>(&mut self, model: &M, x: &[f64], out: &mut [f64]) {
        match self {
            GradientSource::Full => model.gradient(x, out),
            GradientSource::Minibatch(schedule) => model.batch_gradient(schedule.next_batch(), x, out),
        }
    }
}

/// How realizations are started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Fixed(Vec<f64>),
    /// Independent `N(mean_j, sd_j²)` coordinates.
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Fixed(x) => x.len(),
            InitialState::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn draw(&self, seed: u64, realization: u64) -> Vec<f64> {
        self.draw_from(seed, stream_id(realization, StreamKind::Initial))
    }

    pub fn draw_from(&self, seed: u64, stream: u64) -> Vec<f64> {
        match self {
            InitialState::Fixed(x) => x.clone(),
            InitialState::Gaussian { mean, sd } => {
                let mut rng = stream_rng(seed, stream);
                mean.iter()
                    .zip(sd)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Raw step size `h` (not preconditioned).
    pub step: f64,
    /// `K`.
    pub iterations: usize,
    pub burn_in: usize,
    pub scheme: Scheme,
    pub batch_size: usize,
    pub seed: u64,
    pub realizations: usize,
    /// `false` drops the noise term: ULA becomes GD and SGLD becomes SGD.
    pub langevin: bool,
    /// Keep every `stride`-th iterate in a [`ChainTrace`].
    pub stride: usize,
}

impl SamplerConfig {
    pub fn new(step: f64, iterations: usize, scheme: Scheme, batch_size: usize, seed: u64) -> Self {
        Self {
            step,
            iterations,
            burn_in: DEFAULT_BURN_IN.min(iterations.saturating_sub(1)),
            scheme,
            batch_size,
            seed,
            realizations: 1,
            langevin: true,
            stride: 1,
        }
    }

    pub fn validate(&self, num_terms: usize) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.step));
        }
        if self.iterations > 0 && self.burn_in >= self.iterations {
            return bad(format!("burn-in {} must be below K = {}", self.burn_in, self.iterations));
        }
        if self.batch_size == 0 || self.batch_size > num_terms {
            return bad(format!("batch size {} outside 1..={num_terms}", self.batch_size));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.scheme == Scheme::Rr {
            if !num_terms.is_multiple_of(self.batch_size) {
                return bad(format!("RR needs n | N, got n = {}, N = {num_terms}", self.batch_size));
            }
            let r = num_terms / self.batch_size;
            if !self.iterations.is_multiple_of(r) {
                return bad(format!("RR needs a whole number of epochs, K = {} with R = {r}", self.iterations));
            }
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, num_terms: usize) -> usize {
        (num_terms / self.batch_size).max(1)
    }
}

/// Recorded iterates of one chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainTrace {
    dim: usize,
    batches_per_epoch: usize,
    stride: usize,
    burn_in: usize,
    iterates: Vec<f64>,
}

/// Per-phase summary written next to a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub count: u64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl ChainTrace {
    /// Number of recorded iterates.
    pub fn len(&self) -> usize {
        self.iterates.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    /// The `i`-th recorded iterate.
    pub fn iterate(&self, i: usize) -> &[f64] {
        &self.iterates[i * self.dim..(i + 1) * self.dim]
    }

    /// Iteration index `k` of the `i`-th recorded iterate.
    pub fn step_index(&self, i: usize) -> usize {
        i * self.stride
    }

    /// `r(k) = k mod R` of the `i`-th recorded iterate.
    pub fn phase(&self, i: usize) -> usize {
        self.step_index(i) % self.batches_per_epoch
    }

    pub fn last(&self) -> &[f64] {
        self.iterate(self.len() - 1)
    }

    /// CSV with columns `k, phase, x1, …, xd`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string(), "phase".to_string()];
        header.extend((1..=self.dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.step_index(i).to_string(), self.phase(i).to_string()];
            row.extend(self.iterate(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-phase mean and variance over iterates with `k ≥ burn_in`.
    pub fn phase_summary(&self) -> Vec<PhaseSummary> {
        let r = self.batches_per_epoch;
        let mut acc = vec![vec![Welford::new(); self.dim]; r];
        for i in 0..self.len() {
            if self.step_index(i) < self.burn_in {
                continue;
            }
            for (w, &v) in acc[self.phase(i)].iter_mut().zip(self.iterate(i)) {
                w.push(v);
            }
        }
        acc.into_iter()
            .enumerate()
            .map(|(phase, ws)| PhaseSummary {
                phase,
                count: ws.first().map_or(0, |w| w.count()),
                mean: ws.iter().map(|w| w.mean()).collect(),
                variance: ws.iter().map(|w| w.variance()).collect(),
            })
            .collect()
    }
}

/// One running chain.
pub struct Chain<'a, M: ?Sized> {
    model: &'a M,
    x: Vec<f64>,
    grad: Vec<f64>,
    xi: Vec<f64>,
    step: f64,
    langevin: bool,
    k: usize,
    realization: u64,
}

impl<'a, M: FiniteSumModel + ?Sized> Chain<'a, M> {
    pub fn new(model: &'a M, x0: Vec<f64>, step: f64, langevin: bool) -> Result<Self, SamplerError> {
        let d = model.dim();
        if x0.len() != d {
            return Err(SamplerError::DimensionMismatch {
                expected: d,
                got: x0.len(),
            });
        }
        Ok(Self {
            model,
            x: x0,
            grad: vec![0.0; d],
            xi: vec![0.0; d],
            step,
            langevin,
            k: 0,
            realization: 0,
        })
    }

    fn tagged(mut self, realization: u64) -> Self {
        self.realization = realization;
        self
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    /// Advances one step; aborts if any coordinate becomes non-finite.
    pub fn advance(&mut self, source: &mut GradientSource, noise: &mut dyn NoiseSource) -> Result<(), SamplerError> {
        source.evaluate(self.model, &self.x, &mut self.grad);
        if self.langevin {
            noise.fill(&mut self.xi);
            sgld_step(&mut self.x, &self.grad, self.step, &self.xi);
        } else {
            descent_step(&mut self.x, &self.grad, self.step);
        }
        self.k += 1;
        if self.x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SamplerError::NonFinite {
                step: self.k,
                realization: self.realization,
            })
        }
    }
}

/// Runs `K` steps from `x0` and records the trace.
pub fn run_chain<M: FiniteSumModel + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    x0: &[f64],
    source: &mut GradientSource,
    noise: &mut dyn NoiseSource,
) -> Result<ChainTrace, SamplerError> {
    config.validate(model.num_terms())?;
    if !source.matches(config.scheme) {
        return Err(SamplerError::SchemeMismatch(config.scheme));
    }
    let mut chain = Chain::new(model, x0.to_vec(), config.step, config.langevin)?;
    let d = model.dim();
    let mut iterates = Vec::with_capacity((config.iterations / config.stride + 1) * d);
    iterates.extend_from_slice(x0);
    for k in 1..=config.iterations {
        chain.advance(source, noise)?;
        if k % config.stride == 0 {
            iterates.extend_from_slice(chain.state());
        }
    }
    Ok(ChainTrace {
        dim: d,
        batches_per_epoch: config.batches_per_epoch(model.num_terms()),
        stride: config.stride,
        burn_in: config.burn_in,
        iterates,
    })
}

/// Runs realization `realization` with its own seeded batch and noise streams.
pub fn run_chain_seeded<M: FiniteSumModel + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    init: &InitialState,
    realization: u64,
) -> Result<ChainTrace, SamplerError> {
    let mut source = GradientSource::for_scheme(
        config.scheme,
        model.num_terms(),
        config.batch_size,
        config.seed,
        realization,
    )?;
    let mut noise = GaussianNoise::new(config.seed, stream_id(realization, StreamKind::Noise));
    let x0 = init.draw(config.seed, realization);
    run_chain(model, config, &x0, &mut source, &mut noise).map_err(|e| match e {
        SamplerError::NonFinite { step, .. } => SamplerError::NonFinite { step, realization },
        other => other,
    })
}

/// Sees the states of every realization in a group after each step.
pub trait EnsembleObserver: Send {
    /// Called for `k = 0..=K`; `states` are in realization order.
    fn observe(&mut self, k: usize, phase: usize, states: &[Vec<f64>]);
}

/// Per-iteration, per-coordinate moments across realizations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentObserver {
    dim: usize,
    moments: EnsembleMoments,
}

impl MomentObserver {
    pub fn new(iterations: usize, dim: usize) -> Self {
        Self {
            dim,
            moments: EnsembleMoments::new((iterations + 1) * dim),
        }
    }

    /// Moments of coordinate `j` at iteration `k`.
    pub fn at(&self, k: usize, j: usize) -> &Welford {
        self.moments.slot(k * self.dim + j)
    }

    pub fn iterations(&self) -> usize {
        self.moments.len() / self.dim - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn merge(&mut self, other: &MomentObserver) {
        self.moments
            .merge(&other.moments)
            .expect("observers built for the same run");
    }
}

impl EnsembleObserver for MomentObserver {
    fn observe(&mut self, k: usize, _phase: usize, states: &[Vec<f64>]) {
        for x in states {
            for (j, &v) in x.iter().enumerate() {
                self.moments.push(k * self.dim + j, v);
            }
        }
    }
}

/// Splits `0..total` into `groups` contiguous, nearly equal ranges.
pub fn group_ranges(total: usize, groups: usize) -> Vec<std::ops::Range<usize>> {
    let groups = groups.clamp(1, total.max(1));
    (0..groups)
        .map(|g| (g * total / groups)..((g + 1) * total / groups))
        .collect()
}

/// Runs `config.realizations` independent chains, split into `groups`
/// contiguous groups that execute in parallel. Chains within a group advance
/// in lockstep and feed one observer; observers come back in group order, so
/// results do not depend on thread scheduling.
pub fn run_ensemble<M, O, F>(
    model: &M,
    config: &SamplerConfig,
    init: &InitialState,
    groups: usize,
    make_observer: F,
) -> Result<Vec<O>, SamplerError>
where
    M: FiniteSumModel + ?Sized,
    O: EnsembleObserver,
    F: Fn() -> O + Sync,
{
    config.validate(model.num_terms())?;
    if init.dim() != model.dim() {
        return Err(SamplerError::DimensionMismatch {
            expected: model.dim(),
            got: init.dim(),
        });
    }
    let r = config.batches_per_epoch(model.num_terms());
    group_ranges(config.realizations, groups)
        .into_par_iter()
        .map(|range| {
            let mut members = Vec::with_capacity(range.len());
            for j in range {
                let j = j as u64;
                let source = GradientSource::for_scheme(
                    config.scheme,
                    model.num_terms(),
                    config.batch_size,
                    config.seed,
                    j,
                )?;
                let noise = GaussianNoise::new(config.seed, stream_id(j, StreamKind::Noise));
                let chain = Chain::new(model, init.draw(config.seed, j), config.step, config.langevin)?.tagged(j);
                members.push((chain, source, noise));
            }
            let mut states: Vec<Vec<f64>> = members.iter().map(|m| m.0.state().to_vec()).collect();
            let mut observer = make_observer();
            observer.observe(0, 0, &states);
            for k in 1..=config.iterations {
                for ((chain, source, noise), state) in members.iter_mut().zip(states.iter_mut()) {
                    chain.advance(source, noise)?;
                    state.copy_from_slice(chain.state());
                }
                observer.observe(k, k % r, &states);
            }
            Ok(observer)
        })
        .collect()
}

/// Squared distances `|u_k − v_k|²` of coupled pairs, per iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledDistances {
    pub squared: Vec<Welford>,
}

impl CoupledDistances {
    /// Ensemble RMS distance `(E|u_k − v_k|²)^{1/2}`.
    pub fn rms(&self) -> Vec<f64> {
        self.squared.iter().map(|w| w.mean().sqrt()).collect()
    }

    /// Standard error of the RMS at step `k` (delta method).
    pub fn rms_standard_error(&self, k: usize) -> f64 {
        let w = &self.squared[k];
        let rms = w.mean().sqrt();
        if rms == 0.0 {
            0.0
        } else {
            w.standard_error() / (2.0 * rms)
        }
    }
}

/// Runs pairs of chains from `x0_a` and `x0_b` that share every batch and
/// every noise draw.
pub fn run_coupled_pair<M: FiniteSumModel + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    x0_a: &InitialState,
    x0_b: &InitialState,
    groups: usize,
) -> Result<CoupledDistances, SamplerError> {
    config.validate(model.num_terms())?;
    let d = model.dim();
    let parts: Vec<Vec<Welford>> = group_ranges(config.realizations, groups)
        .into_par_iter()
        .map(|range| -> Result<Vec<Welford>, SamplerError> {
            let mut acc = vec![Welford::new(); config.iterations + 1];
            let mut grad = vec![0.0; d];
            let mut xi = vec![0.0; d];
            for j in range {
                let j = j as u64;
                let mut source = GradientSource::for_scheme(
                    config.scheme,
                    model.num_terms(),
                    config.batch_size,
                    config.seed,
                    j,
                )?;
                let mut noise = GaussianNoise::new(config.seed, stream_id(j, StreamKind::Noise));
                let mut u = x0_a.draw(config.seed, j);
                let mut v = x0_b.draw_from(config.seed, stream_id(j, StreamKind::Auxiliary));
                if u.len() != d || v.len() != d {
                    return Err(SamplerError::DimensionMismatch {
                        expected: d,
                        got: u.len().min(v.len()),
                    });
                }
                acc[0].push(squared_distance(&u, &v));
                for (k, slot) in acc.iter_mut().enumerate().skip(1) {
                    if config.langevin {
                        noise.fill(&mut xi);
                    }
                    let batch: Option<Vec<usize>> = match &mut source {
                        GradientSource::Full => None,
                        GradientSource::Minibatch(s) => Some(s.next_batch().to_vec()),
                    };
                    for x in [&mut u, &mut v] {
                        match &batch {
                            None => model.gradient(x, &mut grad),
                            Some(b) => model.batch_gradient(b, x, &mut grad),
                        }
                        if config.langevin {
                            sgld_step(x, &grad, config.step, &xi);
                        } else {
                            descent_step(x, &grad, config.step);
                        }
                        if !x.iter().all(|c| c.is_finite()) {
                            return Err(SamplerError::NonFinite { step: k, realization: j });
                        }
                    }
                    slot.push(squared_distance(&u, &v));
                }
            }
            Ok(acc)
        })
        .collect::<Result<_, _>>()?;
    let mut squared = vec![Welford::new(); config.iterations + 1];
    for part in &parts {
        for (a, b) in squared.iter_mut().zip(part) {
            a.merge(b);
        }
    }
    Ok(CoupledDistances { squared })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

/// Settings for [`hmc_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub samples: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Diagonal of `M⁻¹`; identity if absent.
    pub inverse_mass: Option<Vec<f64>>,
    /// Each trajectory uses `step_size · U(1 − jitter, 1 + jitter)`.
    pub jitter: f64,
}

impl HmcConfig {
    pub fn new(step_size: f64, leapfrog_steps: usize, samples: usize, seed: u64) -> Self {
        Self {
            step_size,
            leapfrog_steps,
            samples,
            burn_in: 0,
            seed,
            inverse_mass: None,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HmcResult {
    pub dim: usize,
    /// Row-major `samples × d`.
    pub samples: Vec<f64>,
    pub acceptance_rate: f64,
    pub divergences: usize,
}

impl HmcResult {
    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-coordinate moments over the kept samples.
    pub fn moments(&self) -> Vec<Welford> {
        let mut acc = vec![Welford::new(); self.dim];
        for i in 0..self.len() {
            for (w, &v) in acc.iter_mut().zip(self.sample(i)) {
                w.push(v);
            }
        }
        acc
    }

    pub fn mean(&self) -> Vec<f64> {
        self.moments().iter().map(|w| w.mean()).collect()
    }
}

/// Energy rejected as a divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// `F(x) + ½ pᵀM⁻¹p`.
pub fn hamiltonian<M: FiniteSumModel + ?Sized>(model: &M, x: &[f64], p: &[f64], inverse_mass: &[f64]) -> f64 {
    model.potential(x) + 0.5 * p.iter().zip(inverse_mass).map(|(pi, m)| pi * pi * m).sum::<f64>()
}

/// `steps` leapfrog steps of size `eps`, in place. `grad` must hold `∇F(x)`
/// on entry and holds `∇F` at the final point on exit.
pub fn leapfrog<M: FiniteSumModel + ?Sized>(
    model: &M,
    x: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    steps: usize,
    inverse_mass: &[f64],
) {
    for _ in 0..steps {
        for (pi, g) in p.iter_mut().zip(grad.iter()) {
            *pi -= 0.5 * eps * g;
        }
        for ((xi, pi), m) in x.iter_mut().zip(p.iter()).zip(inverse_mass) {
            *xi += eps * m * pi;
        }
        model.gradient(x, grad);
        for (pi, g) in p.iter_mut().zip(grad.iter()) {
            *pi -= 0.5 * eps * g;
        }
    }
}

/// Metropolis-adjusted Hamiltonian Monte Carlo targeting `exp(−F)` from `x0`.
pub fn hmc_run<M: FiniteSumModel + ?Sized>(model: &M, x0: &[f64], config: &HmcConfig) -> Result<HmcResult, SamplerError> {
    let d = model.dim();
    if x0.len() != d {
        return Err(SamplerError::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    if !(config.step_size > 0.0) || config.leapfrog_steps == 0 {
        return Err(SamplerError::InvalidConfig(
            "HMC needs step_size > 0 and at least one leapfrog step".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.jitter) {
        return Err(SamplerError::InvalidConfig("jitter must lie in [0, 1)".into()));
    }
    let inv_mass = match &config.inverse_mass {
        Some(m) if m.len() != d => {
            return Err(SamplerError::DimensionMismatch {
                expected: d,
                got: m.len(),
            })
        }
        Some(m) => m.clone(),
        None => vec![1.0; d],
    };
    let mut rng = stream_rng(config.seed, 0);
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; d];
    model.gradient(&x, &mut grad);
    let mut energy_x = model.potential(&x);
    let mut samples = Vec::with_capacity(config.samples * d);
    let (mut accepted, mut divergences) = (0usize, 0usize);
    let total = config.burn_in + config.samples;
    let mut xp = vec![0.0; d];
    let mut p = vec![0.0; d];
    let mut gp = vec![0.0; d];
    for it in 0..total {
        for (pi, m) in p.iter_mut().zip(&inv_mass) {
            *pi = rng.sample::<f64, _>(StandardNormal) / m.sqrt();
        }
        let kinetic: f64 = 0.5 * p.iter().zip(&inv_mass).map(|(pi, m)| pi * pi * m).sum::<f64>();
        let h0 = energy_x + kinetic;
        let eps = if config.jitter > 0.0 {
            config.step_size * rng.random_range(1.0 - config.jitter..1.0 + config.jitter)
        } else {
            config.step_size
        };
        xp.copy_from_slice(&x);
        gp.copy_from_slice(&grad);
        leapfrog(model, &mut xp, &mut p, &mut gp, eps, config.leapfrog_steps, &inv_mass);
        let energy_xp = model.potential(&xp);
        let h1 = energy_xp + 0.5 * p.iter().zip(&inv_mass).map(|(pi, m)| pi * pi * m).sum::<f64>();
        let delta = h1 - h0;
        let u: f64 = rng.random();
        let accept = if !delta.is_finite() || delta > DIVERGENCE_THRESHOLD {
            divergences += 1;
            false
        } else {
            delta <= 0.0 || u < (-delta).exp()
        };
        if accept {
            x.copy_from_slice(&xp);
            grad.copy_from_slice(&gp);
            energy_x = energy_xp;
        }
        if it >= config.burn_in {
            accepted += accept as usize;
            samples.extend_from_slice(&x);
        }
    }
    Ok(HmcResult {
        dim: d,
        samples,
        acceptance_rate: if config.samples == 0 {
            0.0
        } else {
            accepted as f64 / config.samples as f64
        },
        divergences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianMeanModel;

    fn gaussian() -> GaussianMeanModel {
        GaussianMeanModel::sample_standard(16, 1.0, 3).unwrap()
    }

    #[test]
    fn zero_gradient_zero_noise_is_identity() {
        let mut x = vec![1.5, -2.0];
        sgld_step(&mut x, &[0.0, 0.0], 0.3, &[0.0, 0.0]);
        assert_eq!(x, vec![1.5, -2.0]);
    }

    #[test]
    fn zero_noise_is_descent() {
        let (mut a, mut b) = (vec![0.7, 0.1], vec![0.7, 0.1]);
        sgld_step(&mut a, &[2.0, -1.0], 0.05, &[0.0, 0.0]);
        descent_step(&mut b, &[2.0, -1.0], 0.05);
        assert_eq!(a, b);
    }

    #[test]
    fn ula_fixed_point_at_mean() {
        let m = gaussian();
        let mut x = vec![m.mean()];
        let mut g = vec![0.0];
        ula_step(&m, &mut x, m.raw_step(0.4), &[0.0], &mut g);
        assert_eq!(x[0], m.mean());
    }

    #[test]
    fn empty_chain_is_initial_point() {
        let m = gaussian();
        let cfg = SamplerConfig::new(0.01, 0, Scheme::Ula, 16, 1);
        let trace = run_chain(&m, &cfg, &[0.25], &mut GradientSource::Full, &mut NoNoise).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.iterate(0), &[0.25]);
    }

    #[test]
    fn phases_reset_at_epoch_boundaries() {
        let m = gaussian();
        let mut cfg = SamplerConfig::new(m.raw_step(0.1), 24, Scheme::Rr, 4, 1);
        cfg.burn_in = 0;
        let trace = run_chain_seeded(&m, &cfg, &InitialState::Fixed(vec![0.0]), 0).unwrap();
        let phases: Vec<usize> = (0..trace.len()).map(|i| trace.phase(i)).collect();
        for (k, r) in phases.iter().enumerate() {
            assert_eq!(*r, k % 4);
        }
    }

    #[test]
    fn rr_rejects_partial_epochs() {
        let m = gaussian();
        let cfg = SamplerConfig::new(0.01, 10, Scheme::Rr, 4, 1);
        assert!(matches!(cfg.validate(m.num_terms()), Err(SamplerError::InvalidConfig(_))));
        let mut ok = cfg.clone();
        ok.iterations = 12;
        ok.burn_in = 0;
        assert!(ok.validate(m.num_terms()).is_ok());
    }

    #[test]
    fn divergence_reports_step() {
        let m = gaussian();
        let mut cfg = SamplerConfig::new(m.raw_step(5.0), 2000, Scheme::Ula, 16, 1);
        cfg.burn_in = 0;
        let err = run_chain_seeded(&m, &cfg, &InitialState::Fixed(vec![1.0]), 7).unwrap_err();
        match err {
            SamplerError::NonFinite { step, realization } => {
                assert!(step > 10 && step < 2000);
                assert_eq!(realization, 7);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn mismatched_source_is_rejected() {
        let m = gaussian();
        let cfg = SamplerConfig::new(0.01, 8, Scheme::Rm, 4, 1);
        let r = run_chain(&m, &cfg, &[0.0], &mut GradientSource::Full, &mut NoNoise);
        assert!(matches!(r, Err(SamplerError::SchemeMismatch(Scheme::Rm))));
    }

    #[test]
    fn group_ranges_cover_everything_once() {
        let rs = group_ranges(103, 10);
        assert_eq!(rs.len(), 10);
        assert_eq!(rs.first().unwrap().start, 0);
        assert_eq!(rs.last().unwrap().end, 103);
        for w in rs.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert_eq!(group_ranges(3, 10).len(), 3);
    }

    #[test]
    fn hmc_small_step_accepts_everything() {
        let m = gaussian();
        let sd = m.target_variance().sqrt();
        let mut cfg = HmcConfig::new(sd * 1e-3, 10, 200, 5);
        cfg.burn_in = 0;
        let res = hmc_run(&m, &[m.mean()], &cfg).unwrap();
        assert_eq!(res.acceptance_rate, 1.0);
        assert_eq!(res.divergences, 0);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let m = gaussian();
        let mut cfg = SamplerConfig::new(m.raw_step(0.1), 8, Scheme::Rr, 4, 1);
        cfg.burn_in = 0;
        let trace = run_chain_seeded(&m, &cfg, &InitialState::Fixed(vec![0.0]), 0).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,phase,x1\n0,0,0\n"));
        assert_eq!(text.lines().count(), 10);
        let summary = trace.phase_summary();
        assert_eq!(summary.len(), 4);
        assert_eq!(summary.iter().map(|s| s.count).sum::<u64>(), 9);
    }
}
