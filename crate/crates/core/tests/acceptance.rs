//! Acceptance checks. Runs as a plain binary so every criterion prints its
//! own PASS/FAIL line; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use sgld_rr::analytics::{self, ModelProblemParams, Scheme, Theorem};
use sgld_rr::batching::{self, BatchPolicy, BatchSchedule};
use sgld_rr::diagnostics::{self, Welford};
use sgld_rr::experiment::{self, ExperimentKind, ExperimentSpec};
use sgld_rr::model::{self, FiniteSumModel, GaussianMeanModel};
use sgld_rr::samplers::{
    self, EnsembleObserver, GaussianNoise, GradientSource, InitialState, NoNoise, SamplerConfig,
};
use sgld_rr::seeding::stream_rng;

use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Result<Outcome, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let criteria: [(&str, Check); 9] = [
        ("closed form vs simulation", closed_form_vs_simulation),
        ("order of bias", order_of_bias),
        ("periodicity", periodicity),
        ("variance identities", variance_identities),
        ("contraction and increments", contraction),
        ("epoch-average expansion", epoch_average_expansion),
        ("logistic regression ordering", logistic_ordering),
        ("bound evaluators", bound_evaluators),
        ("gradient correctness", gradient_correctness),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        println!(
            "criterion {} {:<30} {} ({:.1}s) {}",
            i + 1,
            name,
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
        failed += usize::from(!result.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn model_problem_spec() -> ExperimentSpec {
    ExperimentSpec {
        kind: ExperimentKind::ModelProblem,
        num_terms: Some(160),
        ..ExperimentSpec::default()
    }
}

fn closed_form_vs_simulation() -> Result<Outcome, Box<dyn std::error::Error>> {
    let report = experiment::run_model_problem(&model_problem_spec())?;
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for run in &report.runs {
        let estimates: Vec<_> = match run.scheme {
            Scheme::Rr => run.phases.iter().collect(),
            _ => vec![&run.average],
        };
        for e in estimates {
            worst = worst.max(e.z_score());
            points += 1;
        }
    }
    Ok(outcome(
        worst <= 3.0,
        format!("{points} points, largest deviation {worst:.2} SE"),
    ))
}

fn order_of_bias() -> Result<Outcome, Box<dyn std::error::Error>> {
    let (big_n, batches, sigma2) = (160usize, 8usize, 1.0);
    let v = batches as f64 * sigma2 / big_n as f64;
    let steps = [0.025, 0.05, 0.1, 0.2];
    let (mut rm, mut rr) = (Vec::new(), Vec::new());
    for &h in &steps {
        let p = ModelProblemParams {
            step: h,
            batches,
            num_terms: big_n,
            batch_mean_variance: v,
            sigma2,
        };
        let ula = analytics::ula_rel_var_error(h)?;
        rm.push(analytics::rm_rel_var_error(&p)? - ula);
        rr.push(analytics::rr_rel_var_error_avg(&p)? - ula);
    }
    let rm_slope = diagnostics::loglog_slope(&steps, &rm)?;
    let rr_slope = diagnostics::loglog_slope(&steps, &rr)?;

    let spec = ExperimentSpec {
        steps: vec![0.1, 0.2],
        batch_mean_variance: Some(v),
        ..model_problem_spec()
    };
    let report = experiment::run_model_problem(&spec)?;
    let worst = report
        .runs
        .iter()
        .map(|r| r.average.z_score())
        .fold(0.0, f64::max);
    let pass = (rm_slope - 1.0).abs() <= 0.2 && (rr_slope - 2.0).abs() <= 0.2 && worst <= 3.0;
    Ok(outcome(
        pass,
        format!("RM slope {rm_slope:.3}, RR slope {rr_slope:.3}, simulation within {worst:.2} SE"),
    ))
}

fn periodicity() -> Result<Outcome, Box<dyn std::error::Error>> {
    let spec = model_problem_spec();
    let report = experiment::run_model_problem(&spec)?;
    let mut distinct = true;
    for &h in &spec.steps {
        let p = ModelProblemParams {
            step: h,
            batches: report.batches,
            num_terms: report.num_terms,
            batch_mean_variance: report.batch_mean_variance,
            sigma2: report.sigma2,
        };
        let mut phases = analytics::rr_rel_var_error_phases(&p)?;
        phases.sort_by(f64::total_cmp);
        distinct &= phases.len() == report.batches && phases.windows(2).all(|w| w[1] - w[0] > 1e-12 * w[1].abs());
    }
    let mut detail = Vec::new();
    let mut pass = distinct;
    for run in &report.runs {
        let c = &run.tail_periodicity;
        match run.scheme {
            Scheme::Rr => pass &= c.is_periodic(),
            Scheme::Rm => pass &= !c.is_periodic(),
            Scheme::Ula => continue,
        }
        detail.push(format!(
            "{:?} h={} peak lag {} acf {:.2}",
            run.scheme, run.step, c.peak_lag, c.at_period
        ));
    }
    Ok(outcome(
        pass,
        format!("{} distinct phases: {distinct}; {}", report.batches, detail.join(", ")),
    ))
}

fn variance_identities() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut worst_sigma: f64 = 0.0;
    let mut worst_cov: f64 = 0.0;
    let mut rng = stream_rng(4, 0);
    for big_n in 2..=10usize {
        let data: Vec<f64> = (0..big_n).map(|_| rng.sample(StandardNormal)).collect();
        let m = GaussianMeanModel::new(data.clone(), 1.0)?;
        let samples = [vec![m.mean()], vec![m.mean() + 0.7]];
        for n in (1..=big_n).filter(|n| big_n % n == 0) {
            let exact = batching::sigma_star_exact(&m, &samples, n)?;
            let enumerated = batching::sigma_star_enumerated(&m, &samples, n)?;
            worst_sigma = worst_sigma.max((exact - enumerated).abs() / exact.abs().max(1.0));
            if big_n <= 8 && n < big_n {
                let c = batching::within_epoch_covariance(&data, n, 0, &mut rng)?;
                worst_cov = worst_cov.max((c.observed - c.predicted).abs());
            }
        }
    }
    Ok(outcome(
        worst_sigma <= 1e-10 && worst_cov <= 1e-12,
        format!("sigma* deviation {worst_sigma:.1e}, covariance deviation {worst_cov:.1e}"),
    ))
}

/// Ensemble RMS of `|x_k − x_0|`.
struct Increments {
    start: Vec<f64>,
    squared: Vec<Welford>,
}

impl EnsembleObserver for Increments {
    fn observe(&mut self, k: usize, _phase: usize, states: &[Vec<f64>]) {
        if k == 0 {
            self.start = states.iter().map(|x| x[0]).collect();
        }
        for (x, x0) in states.iter().zip(&self.start) {
            self.squared[k].push((x[0] - x0).powi(2));
        }
    }
}

fn contraction() -> Result<Outcome, Box<dyn std::error::Error>> {
    // σ² = N makes μ = L = 1.
    let big_n = 160;
    let model = GaussianMeanModel::sample_standard(big_n, big_n as f64, 5)?;
    let h = 0.1;
    let mut config = SamplerConfig::new(h, 104, Scheme::Rr, big_n / 8, 11);
    config.burn_in = 0;
    config.realizations = 1000;
    let init = InitialState::Gaussian {
        mean: vec![model.mean()],
        sd: vec![3.0],
    };
    let pairs = samplers::run_coupled_pair(&model, &config, &init, &init, 20)?;
    let rms = pairs.rms();
    let mut contraction_ok = true;
    let mut ratios = Vec::new();
    for k in [10usize, 50, 100] {
        let bound = (1.0 - h).powf(k as f64 / 2.0) * rms[0];
        contraction_ok &= rms[k] <= bound + 3.0 * pairs.rms_standard_error(k);
        ratios.push(format!("k={k} {:.2e}/{:.2e}", rms[k], bound));
    }

    let mut ula = SamplerConfig::new(h, 10, Scheme::Ula, big_n, 12);
    ula.burn_in = 0;
    ula.realizations = 1000;
    let stationary = InitialState::Gaussian {
        mean: vec![model.mean()],
        sd: vec![model.target_variance().sqrt()],
    };
    let observers = samplers::run_ensemble(&model, &ula, &stationary, 20, || Increments {
        start: Vec::new(),
        squared: vec![Welford::new(); 11],
    })?;
    let mut merged = vec![Welford::new(); 11];
    for o in &observers {
        for (a, b) in merged.iter_mut().zip(&o.squared) {
            a.merge(b);
        }
    }
    let (l, d) = (model.curvature(), 1.0);
    let mut increments_ok = true;
    for k in [1usize, 5, 10] {
        let t = k as f64 * h;
        let rms = merged[k].mean().sqrt();
        let se = merged[k].standard_error() / (2.0 * rms);
        increments_ok &= rms <= t * (l * d).sqrt() + (2.0 * t * d).sqrt() + 3.0 * se;
    }
    Ok(outcome(
        contraction_ok && increments_ok,
        format!("{}; increment bound holds: {increments_ok}", ratios.join(", ")),
    ))
}

fn epoch_average_expansion() -> Result<Outcome, Box<dyn std::error::Error>> {
    let steps = [0.04, 0.02, 0.01];
    let (mut quarter, mut sixth) = (Vec::new(), Vec::new());
    for &h in &steps {
        let p = ModelProblemParams {
            step: h,
            batches: 8,
            num_terms: 160,
            batch_mean_variance: 0.05,
            sigma2: 1.0,
        };
        let exact = analytics::rr_rel_var_error_avg(&p)?;
        quarter.push((exact - analytics::rr_rel_var_error_avg_quadratic(&p)?).abs());
        sixth.push((exact - analytics::rr_rel_var_error_avg_taylor(&p)?).abs());
    }
    let slope = diagnostics::loglog_slope(&steps, &quarter)?;
    let taylor_slope = diagnostics::loglog_slope(&steps, &sixth)?;
    Ok(outcome(
        (slope - 3.0).abs() <= 0.3,
        format!("residual slope {slope:.3} (with the (R+1)/6 coefficient: {taylor_slope:.3})"),
    ))
}

fn logistic_ordering() -> Result<Outcome, Box<dyn std::error::Error>> {
    let spec = ExperimentSpec {
        kind: ExperimentKind::Logreg,
        num_terms: Some(256),
        features: 10,
        batches: 8,
        realizations: 100,
        groups: 20,
        steps: vec![0.4, 0.8],
        epochs: Some(2000),
        ..ExperimentSpec::default()
    };
    let report = experiment::run_logreg(&spec)?;
    let h = spec.steps[0];
    let err = |s: Scheme| report.run(h, s).map(|r| r.final_error).unwrap_or(f64::NAN);
    let (ula, rm, rr) = (err(Scheme::Ula), err(Scheme::Rm), err(Scheme::Rr));
    let ordered = ula <= rr && rr < rm;
    let rr_run = report.run(h, Scheme::Rr).ok_or("missing RR run")?;
    let periodic = rr_run.periodicity.is_periodic();
    Ok(outcome(
        ordered && periodic,
        format!(
            "h={h}: ULA {ula:.2e}, RR {rr:.2e}, RM {rm:.2e}; RR peak lag {} acf {:.2} band {:.2}",
            rr_run.periodicity.peak_lag, rr_run.periodicity.at_period, rr_run.periodicity.noise_band
        ),
    ))
}

fn bound_evaluators() -> Result<Outcome, Box<dyn std::error::Error>> {
    let spec = ExperimentSpec {
        kind: ExperimentKind::BoundsSweep,
        ..ExperimentSpec::default()
    };
    let report = experiment::run_bounds_sweep(&spec)?;
    let rm = report.slope(Theorem::SgldRmHessian, 8).ok_or("missing slope")?;
    let rr = report.slope(Theorem::SgldRrHessian, 8).ok_or("missing slope")?;
    Ok(outcome(
        (rm + 2.0).abs() <= 0.1 && (rr + 1.0).abs() <= 0.1,
        format!("RM {rm:.3}, RR {rr:.3}"),
    ))
}

fn gradient_correctness() -> Result<Outcome, Box<dyn std::error::Error>> {
    let sim = model::generate_simdata(21, 64, 10)?;
    let m = &sim.model;
    let d = m.dim();
    let mut rng = stream_rng(22, 0);
    let mut worst: f64 = 0.0;
    let mut g = vec![0.0; d];
    for _ in 0..20 {
        let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let i = rng.random_range(0..m.num_terms());
        m.term_gradient(i, &x, &mut g)?;
        let eps = 1e-6;
        for j in 0..d {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += eps;
            xm[j] -= eps;
            let fd = (m.term_potential(i, &xp) - m.term_potential(i, &xm)) / (2.0 * eps);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
    }

    let x0 = vec![0.3; d];
    let big_n = m.num_terms();
    let run = |scheme: Scheme, n: usize, langevin: bool, noisy: bool| -> Result<Vec<f64>, Box<dyn std::error::Error>> {
        let mut config = SamplerConfig::new(1e-3, 40, scheme, n, 3);
        config.langevin = langevin;
        let mut source = match scheme {
            Scheme::Ula => GradientSource::Full,
            _ => GradientSource::Minibatch(BatchSchedule::new(BatchPolicy::RandomReshuffling, big_n, n, 3, 0)?),
        };
        let trace = if noisy {
            samplers::run_chain(m, &config, &x0, &mut source, &mut GaussianNoise::new(9, 1))?
        } else {
            samplers::run_chain(m, &config, &x0, &mut source, &mut NoNoise)?
        };
        Ok((0..trace.len()).flat_map(|i| trace.iterate(i).to_vec()).collect())
    };
    let sgld_full = run(Scheme::Rr, big_n, true, true)?;
    let ula = run(Scheme::Ula, big_n, true, true)?;
    let sgld_silent = run(Scheme::Rr, 8, true, false)?;
    let sgd = run(Scheme::Rr, 8, false, false)?;
    let ula_silent = run(Scheme::Ula, big_n, true, false)?;
    let gd = run(Scheme::Ula, big_n, false, false)?;
    let lattice = sgld_full == ula && sgld_silent == sgd && ula_silent == gd;
    Ok(outcome(
        worst <= 1e-5 && lattice,
        format!("largest relative FD error {worst:.1e}, reduction lattice exact: {lattice}"),
    ))
}
