//! Closed forms for the Gaussian mean model and evaluators for the
//! non-asymptotic convergence bounds of SGD/SGLD under both batching policies.
//!
//! All step sizes here are in preconditioned time: the chain is
//! `x_{k+1} = (1−h) x_k + h ŷ_k + σ √(2h/N) ξ_k`. Variance errors are relative,
//! `N V[x_∞]/σ² − 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("step size {0} outside (0, 2)")]
    StepOutOfRange(f64),
    #[error("phase formula needs R >= 2, got R = {0}")]
    SingleBatch(usize),
    #[error("phase {phase} outside 0..{batches}")]
    PhaseOutOfRange { phase: usize, batches: usize },
    #[error("standard deviation must be non-negative, got {0}")]
    NegativeStd(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("{theorem}: step size {step} outside the admissible range (0, {limit})")]
    Inadmissible {
        theorem: &'static str,
        step: f64,
        limit: f64,
    },
    #[error("{theorem}: iteration count {iterations} is not a whole number of epochs of {batches}")]
    PartialEpoch {
        theorem: &'static str,
        iterations: f64,
        batches: usize,
    },
}

/// Parameters of the Gaussian model problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelProblemParams {
    /// Preconditioned step size `h ∈ (0, 2)`.
    pub step: f64,
    /// Batches per epoch `R`.
    pub batches: usize,
    /// Data set size `N`.
    pub num_terms: usize,
    /// Variance of a batch mean, `V`.
    pub batch_mean_variance: f64,
    pub sigma2: f64,
}

impl ModelProblemParams {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        check_step(self.step)?;
        if self.batches == 0 || self.num_terms == 0 {
            return Err(AnalyticsError::InvalidParameter("R and N must be positive"));
        }
        if !self.num_terms.is_multiple_of(self.batches) {
            return Err(AnalyticsError::InvalidParameter("N must be divisible by R"));
        }
        if !(self.batch_mean_variance >= 0.0) {
            return Err(AnalyticsError::InvalidParameter("V must be non-negative"));
        }
        if !(self.sigma2 > 0.0) {
            return Err(AnalyticsError::InvalidParameter("sigma^2 must be positive"));
        }
        Ok(())
    }

    pub fn with_step(self, step: f64) -> Self {
        Self { step, ..self }
    }

    /// `N V / σ²`, the normalised gradient-noise level.
    fn noise_ratio(&self) -> f64 {
        self.num_terms as f64 * self.batch_mean_variance / self.sigma2
    }
}

fn check_step(h: f64) -> Result<(), AnalyticsError> {
    if h > 0.0 && h < 2.0 {
        Ok(())
    } else {
        Err(AnalyticsError::StepOutOfRange(h))
    }
}

/// Full-gradient chain: `h / (2 − h)`.
pub fn ula_rel_var_error(h: f64) -> Result<f64, AnalyticsError> {
    check_step(h)?;
    Ok(h / (2.0 - h))
}

/// Robbins-Monro chain: `h N V / (σ² (2 − h)) + 2/(2 − h) − 1`.
pub fn rm_rel_var_error(p: &ModelProblemParams) -> Result<f64, AnalyticsError> {
    p.validate()?;
    let h = p.step;
    Ok(h * p.noise_ratio() / (2.0 - h) + 2.0 / (2.0 - h) - 1.0)
}

/// Random-reshuffling chain at phase `r` (iterate index mod `R`).
///
/// For `R = 1` every batch is the full data set and the ULA value is returned.
pub fn rr_rel_var_error_phase(p: &ModelProblemParams, phase: usize) -> Result<f64, AnalyticsError> {
    p.validate()?;
    if p.batches == 1 {
        if phase != 0 {
            return Err(AnalyticsError::PhaseOutOfRange { phase, batches: 1 });
        }
        return ula_rel_var_error(p.step);
    }
    if phase >= p.batches {
        return Err(AnalyticsError::PhaseOutOfRange {
            phase,
            batches: p.batches,
        });
    }
    let h = p.step;
    let big_r = p.batches as f64;
    let a = 1.0 - h;
    let a_r = a.powi(p.batches as i32);
    let a_phase = a.powi(phase as i32);
    let bracket = a_phase * a_phase * (1.0 - a_r).powi(2) / (1.0 - a_r * a_r) + (1.0 - a_phase).powi(2);
    Ok(p.noise_ratio() / (big_r - 1.0) * (big_r * h / (2.0 - h) - bracket) + 2.0 / (2.0 - h) - 1.0)
}

/// All `R` phase values.
pub fn rr_rel_var_error_phases(p: &ModelProblemParams) -> Result<Vec<f64>, AnalyticsError> {
    (0..p.batches).map(|r| rr_rel_var_error_phase(p, r)).collect()
}

/// Exact epoch average of [`rr_rel_var_error_phase`].
pub fn rr_rel_var_error_avg(p: &ModelProblemParams) -> Result<f64, AnalyticsError> {
    let phases = rr_rel_var_error_phases(p)?;
    Ok(phases.iter().sum::<f64>() / phases.len() as f64)
}

/// `h/2 + h²/4 + N V h² (R+1) / (4σ²)`.
pub fn rr_rel_var_error_avg_quadratic(p: &ModelProblemParams) -> Result<f64, AnalyticsError> {
    p.validate()?;
    let h = p.step;
    Ok(h / 2.0 + h * h / 4.0 + p.noise_ratio() * h * h * (p.batches as f64 + 1.0) / 4.0)
}

/// Second-order Taylor polynomial of [`rr_rel_var_error_avg`] in `h`:
/// `h/2 + h²/4 + N V h² (R+1) / (6σ²)`. The remainder is `O(h³)`.
pub fn rr_rel_var_error_avg_taylor(p: &ModelProblemParams) -> Result<f64, AnalyticsError> {
    p.validate()?;
    let h = p.step;
    Ok(h / 2.0 + h * h / 4.0 + p.noise_ratio() * h * h * (p.batches as f64 + 1.0) / 6.0)
}

/// W₂ between `N(m₁, s₁²)` and `N(m₂, s₂²)`.
pub fn w2_gaussian_1d(m1: f64, s1: f64, m2: f64, s2: f64) -> Result<f64, AnalyticsError> {
    if s1 < 0.0 {
        return Err(AnalyticsError::NegativeStd(s1));
    }
    if s2 < 0.0 {
        return Err(AnalyticsError::NegativeStd(s2));
    }
    Ok(((m1 - m2).powi(2) + (s1 - s2).powi(2)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ula,
    Rm,
    Rr,
}

/// Asymptotic W₂ to the target under a Gaussian approximation of the
/// stationary law. For RR the maximum over phases is returned.
pub fn asymptotic_w2(scheme: Scheme, p: &ModelProblemParams) -> Result<f64, AnalyticsError> {
    p.validate()?;
    let target_sd = (p.sigma2 / p.num_terms as f64).sqrt();
    let w2_for = |rel: f64| w2_gaussian_1d(0.0, target_sd * (1.0 + rel).sqrt(), 0.0, target_sd);
    match scheme {
        Scheme::Ula => Ok(target_sd * (1.0 - 1.0 / (1.0 - p.step / 2.0).sqrt()).abs()),
        Scheme::Rm => {
            let h = p.step;
            Ok(target_sd * (1.0 - ((2.0 + h * p.noise_ratio()) / (2.0 - h)).sqrt()).abs())
        }
        Scheme::Rr => {
            let mut worst = 0.0_f64;
            for rel in rr_rel_var_error_phases(p)? {
                worst = worst.max(w2_for(rel)?);
            }
            Ok(worst)
        }
    }
}

/// Which convergence guarantee to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Theorem {
    /// SGD with Robbins-Monro batches; bounds `E|x_K − X*|²`.
    SgdRm,
    /// SGD with random reshuffling over whole epochs; bounds `E|x_K − X*|²`.
    SgdRr,
    /// SGLD-RM in W₂, smooth potential.
    SgldRm,
    /// SGLD-RM in W₂, additionally with Lipschitz Hessian.
    SgldRmHessian,
    /// SGLD-RR in W₂, smooth potential.
    SgldRr,
    /// SGLD-RR in W₂, additionally with Lipschitz Hessian.
    SgldRrHessian,
}

impl Theorem {
    pub const ALL: [Theorem; 6] = [
        Theorem::SgdRm,
        Theorem::SgdRr,
        Theorem::SgldRm,
        Theorem::SgldRmHessian,
        Theorem::SgldRr,
        Theorem::SgldRrHessian,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Theorem::SgdRm => "sgd-rm",
            Theorem::SgdRr => "sgd-rr",
            Theorem::SgldRm => "sgld-rm",
            Theorem::SgldRmHessian => "sgld-rm-hessian",
            Theorem::SgldRr => "sgld-rr",
            Theorem::SgldRrHessian => "sgld-rr-hessian",
        }
    }

    /// Upper end of the admissible step-size interval `(0, limit)`.
    pub fn step_limit(self, p: &BoundParams) -> f64 {
        match self {
            Theorem::SgdRm => 1.0 / (2.0 * p.smoothness),
            Theorem::SgdRr | Theorem::SgldRr | Theorem::SgldRrHessian => 1.0 / p.smoothness,
            Theorem::SgldRm | Theorem::SgldRmHessian => 2.0 / (p.smoothness + p.strong_convexity),
        }
    }
}

/// Constants entering the convergence bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// `μ`.
    pub strong_convexity: f64,
    /// `L`.
    pub smoothness: f64,
    /// `L₁`.
    pub hessian_lipschitz: f64,
    pub dim: usize,
    pub step: f64,
    /// `R`.
    pub batches: usize,
    /// `σ*` (not squared).
    pub sigma_star: f64,
    /// `K`; may be `f64::INFINITY` for the asymptotic remainder.
    pub iterations: f64,
    /// `|x₀ − X*|` for the SGD bounds, `W₂(π̃₀, π*)` for the SGLD bounds.
    pub initial_distance: f64,
}

impl BoundParams {
    fn validate(&self) -> Result<(), AnalyticsError> {
        if !(self.strong_convexity > 0.0 && self.smoothness >= self.strong_convexity) {
            return Err(AnalyticsError::InvalidParameter("need 0 < mu <= L"));
        }
        if !(self.hessian_lipschitz >= 0.0 && self.sigma_star >= 0.0 && self.initial_distance >= 0.0) {
            return Err(AnalyticsError::InvalidParameter("L1, sigma*, initial distance must be >= 0"));
        }
        if self.batches == 0 || self.dim == 0 {
            return Err(AnalyticsError::InvalidParameter("R and d must be positive"));
        }
        if !(self.iterations >= 0.0) {
            return Err(AnalyticsError::InvalidParameter("K must be non-negative"));
        }
        Ok(())
    }
}

/// `(1 − hμ)^K · initial`, zero in the `K → ∞` limit.
fn transient(p: &BoundParams, initial: f64) -> f64 {
    if p.iterations.is_infinite() {
        0.0
    } else {
        (p.iterations * (-p.step * p.strong_convexity).ln_1p()).exp() * initial
    }
}

/// The step-size-dependent remainder of a bound (everything except the
/// transient term).
pub fn bound_remainder(theorem: Theorem, p: &BoundParams) -> f64 {
    let (mu, l, l1) = (p.strong_convexity, p.smoothness, p.hessian_lipschitz);
    let (h, d, r, s) = (p.step, p.dim as f64, p.batches as f64, p.sigma_star);
    match theorem {
        Theorem::SgdRm => 2.0 * h * s * s / mu,
        Theorem::SgdRr => h * h * l * r / (2.0 * mu) * s * s,
        Theorem::SgldRm => h.sqrt() * 1.65 * l * d.sqrt() / mu + s * (h / mu).sqrt(),
        Theorem::SgldRmHessian => {
            h * (l1 * d / (2.0 * mu) + 11.0 * l * (l * d).sqrt() / (5.0 * mu)) + s * (h / mu).sqrt()
        }
        Theorem::SgldRr => {
            240.0 * l / mu
                * (h * r.sqrt() * s + h * (l * r * (h * d).sqrt() + (l * r * d).sqrt()) + (h * d).sqrt())
        }
        Theorem::SgldRrHessian => {
            240.0 * h * l / mu
                * (r.sqrt() * s + (l * r * (h * d).sqrt() + (l * r * d).sqrt()) + ((l * d).sqrt() + l1 / l * d))
        }
    }
}

/// Full right-hand side of the selected bound.
pub fn theorem_bound(theorem: Theorem, p: &BoundParams) -> Result<f64, AnalyticsError> {
    p.validate()?;
    let limit = theorem.step_limit(p);
    if !(p.step > 0.0 && p.step < limit) {
        return Err(AnalyticsError::Inadmissible {
            theorem: theorem.label(),
            step: p.step,
            limit,
        });
    }
    if theorem == Theorem::SgdRr
        && p.iterations.is_finite()
        && (p.iterations.fract() != 0.0 || p.iterations % p.batches as f64 != 0.0)
    {
        return Err(AnalyticsError::PartialEpoch {
            theorem: theorem.label(),
            iterations: p.iterations,
            batches: p.batches,
        });
    }
    let initial = match theorem {
        Theorem::SgdRm | Theorem::SgdRr => p.initial_distance * p.initial_distance,
        _ => p.initial_distance,
    };
    Ok(transient(p, initial) + bound_remainder(theorem, p))
}

/// Cheapest `(h, K)` certifying accuracy `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepsToEpsilon {
    pub step: f64,
    /// Real-valued `K`; round up for an integer iteration count.
    pub iterations: f64,
}

/// Minimises the iteration count `K(h)` needed for the bound to reach
/// `epsilon`, over admissible `h`. `K(h)` solves
/// `(1 − hμ)^K · init = ε − remainder(h)`.
///
/// The minimisation is a log-spaced scan followed by golden-section
/// refinement in `ln h`.
pub fn steps_to_epsilon(theorem: Theorem, p: &BoundParams, epsilon: f64) -> Result<Option<StepsToEpsilon>, AnalyticsError> {
    p.validate()?;
    if !(epsilon > 0.0) {
        return Err(AnalyticsError::InvalidParameter("epsilon must be positive"));
    }
    let limit = theorem.step_limit(p);
    let initial = match theorem {
        Theorem::SgdRm | Theorem::SgdRr => p.initial_distance * p.initial_distance,
        _ => p.initial_distance,
    };
    let steps_for = |ln_h: f64| -> f64 {
        let h = ln_h.exp();
        if !(h < limit) {
            return f64::INFINITY;
        }
        let q = BoundParams { step: h, ..*p };
        let slack = epsilon - bound_remainder(theorem, &q);
        if slack <= 0.0 {
            return f64::INFINITY;
        }
        if initial <= slack {
            return 0.0;
        }
        (slack / initial).ln() / (-h * p.strong_convexity).ln_1p()
    };
    let hi = (limit * (1.0 - 1e-12)).ln();
    let lo = hi - 120.0;
    let grid = 4000;
    let mut best = (f64::INFINITY, hi);
    for i in 0..=grid {
        let ln_h = lo + (hi - lo) * i as f64 / grid as f64;
        let k = steps_for(ln_h);
        if k < best.0 {
            best = (k, ln_h);
        }
    }
    if !best.0.is_finite() {
        return Ok(None);
    }
    let cell = (hi - lo) / grid as f64;
    let (mut a, mut b) = ((best.1 - cell).max(lo), (best.1 + cell).min(hi));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if steps_for(c) <= steps_for(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let mid = 0.5 * (a + b);
    let (k, ln_h) = if steps_for(mid) < best.0 { (steps_for(mid), mid) } else { best };
    Ok(Some(StepsToEpsilon {
        step: ln_h.exp(),
        iterations: k,
    }))
}
