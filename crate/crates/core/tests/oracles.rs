//! Independent oracles for the closed forms, the batching distributions and
//! the samplers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use sgld_rr::analytics::{self, ModelProblemParams, Scheme};
use sgld_rr::batching::{BatchPolicy, BatchSchedule};
use sgld_rr::diagnostics::{self, Welford};
use sgld_rr::model::{self, FiniteSumModel, GaussianMeanModel};
use sgld_rr::samplers::{self, HmcConfig, InitialState, MomentObserver, SamplerConfig};
use sgld_rr::seeding::stream_rng;

fn params(h: f64, batches: usize, big_n: usize, v: f64) -> ModelProblemParams {
    ModelProblemParams {
        step: h,
        batches,
        num_terms: big_n,
        batch_mean_variance: v,
        sigma2: 1.3,
    }
}

/// Stationary variance of `x_r` by propagating second moments through one
/// RR epoch: batch means have variance `V` and pairwise covariance
/// `−V/(R−1)`, and are independent of the state at the epoch start.
fn rr_phase_variance_oracle(p: &ModelProblemParams) -> Vec<f64> {
    let (h, r_count) = (p.step, p.batches);
    let a = 1.0 - h;
    let noise = 2.0 * h * p.sigma2 / p.num_terms as f64;
    let cov = |i: usize, j: usize| {
        if i == j {
            p.batch_mean_variance
        } else {
            -p.batch_mean_variance / (r_count as f64 - 1.0)
        }
    };
    // Contribution of batches 0..r to x_r.
    let forced = |r: usize| -> f64 {
        let w: Vec<f64> = (0..r).map(|j| h * a.powi((r - 1 - j) as i32)).collect();
        let mut s = 0.0;
        for i in 0..r {
            for j in 0..r {
                s += w[i] * w[j] * cov(i, j);
            }
        }
        s + noise * (0..r).map(|j| a.powi(2 * j as i32)).sum::<f64>()
    };
    let v0 = forced(r_count) / (1.0 - a.powi(2 * r_count as i32));
    (0..r_count)
        .map(|r| a.powi(2 * r as i32) * v0 + forced(r))
        .map(|v| p.num_terms as f64 * v / p.sigma2 - 1.0)
        .collect()
}

/// Fixed point of `v ← (1−h)² v + h² V + 2hσ²/N`, iterated.
fn iterated_fixed_point(h: f64, v_batch: f64, big_n: usize, sigma2: f64) -> f64 {
    let mut v = 0.0;
    for _ in 0..200_000 {
        v = (1.0 - h).powi(2) * v + h * h * v_batch + 2.0 * h * sigma2 / big_n as f64;
    }
    big_n as f64 * v / sigma2 - 1.0
}

#[test]
fn ula_and_rm_match_iterated_recursion() {
    for h in [0.01, 0.1, 0.5, 1.3] {
        let p = params(h, 8, 160, 0.07);
        let ula = iterated_fixed_point(h, 0.0, 160, p.sigma2);
        let rm = iterated_fixed_point(h, 0.07, 160, p.sigma2);
        assert!((analytics::ula_rel_var_error(h).unwrap() - ula).abs() < 1e-10);
        assert!((analytics::rm_rel_var_error(&p).unwrap() - rm).abs() < 1e-10);
    }
}

#[test]
fn rr_phases_match_second_moment_propagation() {
    for (h, r) in [(0.05, 8), (0.2, 4), (0.7, 5), (1.5, 3)] {
        let p = params(h, r, 20 * r, 0.04);
        let oracle = rr_phase_variance_oracle(&p);
        for (phase, want) in oracle.iter().enumerate() {
            let got = analytics::rr_rel_var_error_phase(&p, phase).unwrap();
            assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "h={h} r={phase}: {got} vs {want}");
        }
        let avg = oracle.iter().sum::<f64>() / r as f64;
        assert!((analytics::rr_rel_var_error_avg(&p).unwrap() - avg).abs() < 1e-10);
    }
}

#[test]
fn gaussian_w2_matches_sorted_samples() {
    let mut rng = stream_rng(31, 0);
    let n = 200_000;
    let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let b: Vec<f64> = (0..n).map(|_| 0.5 + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let empirical = diagnostics::empirical_w2_1d(&a, &b).unwrap();
    let exact = analytics::w2_gaussian_1d(0.0, 1.0, 0.5, 2.0).unwrap();
    assert!((empirical - exact).abs() < 0.02, "{empirical} vs {exact}");
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let sim = model::generate_simdata(3, 50, 10).unwrap();
    let m = &sim.model;
    let d = m.dim();
    let mut rng = stream_rng(5, 0);
    let mut g = vec![0.0; d];
    for _ in 0..10 {
        let x: Vec<f64> = (0..d).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        m.gradient(&x, &mut g);
        for j in 0..d {
            let eps = 1e-6;
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += eps;
            xm[j] -= eps;
            let fd = (m.potential(&xp) - m.potential(&xm)) / (2.0 * eps);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "coordinate {j}: {fd} vs {}", g[j]);
        }
    }
}

#[test]
fn gaussian_gradient_matches_finite_differences() {
    let m = GaussianMeanModel::sample_standard(12, 0.8, 2).unwrap();
    let mut g = [0.0];
    for x in [-2.0, 0.1, 3.5] {
        m.gradient(&[x], &mut g);
        let eps = 1e-5;
        let fd = (m.potential(&[x + eps]) - m.potential(&[x - eps])) / (2.0 * eps);
        assert!((fd - g[0]).abs() < 1e-6 * g[0].abs().max(1.0));
    }
}

#[test]
fn rm_pair_frequencies_are_uniform() {
    // N = 4, n = 2: six possible batches, each with probability 1/6.
    let draws = 120_000;
    let mut schedule = BatchSchedule::new(BatchPolicy::RobbinsMonro, 4, 2, 17, 0).unwrap();
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for _ in 0..draws {
        let b = schedule.next_batch();
        let key = (b[0].min(b[1]), b[0].max(b[1]));
        *counts.entry(key).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let p = 1.0 / 6.0;
    let sd = (p * (1.0 - p) / draws as f64).sqrt();
    for (pair, c) in counts {
        let f = c as f64 / draws as f64;
        assert!((f - p).abs() < 4.0 * sd, "{pair:?}: {f}");
    }
}

#[test]
fn rr_epochs_partition_the_data() {
    let (big_n, n) = (24, 6);
    let mut schedule = BatchSchedule::new(BatchPolicy::RandomReshuffling, big_n, n, 8, 3).unwrap();
    let mut first_positions = vec![0usize; big_n];
    for epoch in 0..500 {
        let mut seen = vec![0u32; big_n];
        for r in 0..big_n / n {
            for &i in schedule.next_batch() {
                seen[i] += 1;
                if r == 0 && epoch > 0 {
                    first_positions[i] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "epoch {epoch}: {seen:?}");
    }
    // Each index lands in the first batch with probability n/N.
    let p = n as f64 / big_n as f64;
    let sd = (p * (1.0 - p) / 499.0).sqrt();
    for c in first_positions {
        assert!((c as f64 / 499.0 - p).abs() < 5.0 * sd);
    }
}

#[test]
fn hmc_recovers_gaussian_posterior() {
    let m = GaussianMeanModel::sample_standard(16, 1.0, 4).unwrap();
    let mut config = HmcConfig::new(0.08, 10, 100_000, 6);
    config.burn_in = 1_000;
    config.jitter = 0.2;
    let run = samplers::hmc_run(&m, &[0.0], &config).unwrap();
    let xs: Vec<f64> = (0..run.len()).map(|i| run.sample(i)[0]).collect();
    // Batch means absorb the autocorrelation.
    let batches: Vec<f64> = xs.chunks(2_000).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let b = Welford::from_slice(&batches);
    assert!((b.mean() - m.mean()).abs() < 4.0 * b.standard_error());
    let var_batches: Vec<f64> = xs
        .chunks(2_000)
        .map(|c| c.iter().map(|x| (x - m.mean()).powi(2)).sum::<f64>() / c.len() as f64)
        .collect();
    let v = Welford::from_slice(&var_batches);
    assert!((v.mean() - m.target_variance()).abs() < 4.0 * v.standard_error());
    assert!(run.acceptance_rate > 0.8);
}

#[test]
fn ensemble_mean_follows_the_mean_recursion() {
    // E[x_k] = (1 − (1 − h)^k) ȳ from x_0 = 0 for every batching policy.
    let m = GaussianMeanModel::sample_standard(40, 1.0, 9).unwrap();
    let h = 0.2;
    let k_max = 24;
    for scheme in [Scheme::Ula, Scheme::Rm, Scheme::Rr] {
        let mut config = SamplerConfig::new(m.raw_step(h), k_max, scheme, 5, 13);
        config.burn_in = 0;
        config.realizations = 100_000;
        let parts = samplers::run_ensemble(&m, &config, &InitialState::Fixed(vec![0.0]), 20, || {
            MomentObserver::new(k_max, 1)
        })
        .unwrap();
        let mut all = parts[0].clone();
        for p in &parts[1..] {
            all.merge(p);
        }
        for k in [1, 5, 12, 24] {
            let w = all.at(k, 0);
            let want = (1.0 - (1.0 - h).powi(k as i32)) * m.mean();
            assert!(
                (w.mean() - want).abs() < 5.0 * w.standard_error(),
                "{scheme:?} k={k}: {} vs {want}",
                w.mean()
            );
        }
    }
}
