use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sgld_rr::analytics::Scheme;
use sgld_rr::experiment::{self, ChainStart, ExperimentKind, ExperimentSpec, Report};

#[derive(Parser)]
#[command(name = "sgld-rr", version, about = "SGLD with Robbins-Monro and random-reshuffling batches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gaussian model: simulated vs closed-form relative variance error.
    ModelProblem(Common),
    /// Bayesian logistic regression against an HMC reference.
    Logreg(Common),
    /// Tabulate the convergence bounds and steps-to-epsilon.
    Bounds(Common),
    /// Check the batching variance identities.
    VarianceCheck(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Ula,
    Rm,
    Rr,
}

impl From<Policy> for Scheme {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Ula => Scheme::Ula,
            Policy::Rm => Scheme::Rm,
            Policy::Rr => Scheme::Rr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Start {
    Zero,
    Mode,
    Reference,
}

impl From<Start> for ChainStart {
    fn from(s: Start) -> Self {
        match s {
            Start::Zero => ChainStart::Zero,
            Start::Mode => ChainStart::Mode,
            Start::Reference => ChainStart::Reference,
        }
    }
}

/// Flags override values read from `--config`.
#[derive(Args)]
struct Common {
    /// JSON experiment spec; any flag given below overrides it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Step size in units of 1/L (repeatable).
    #[arg(long = "h")]
    steps: Vec<f64>,
    /// Batches per epoch.
    #[arg(long = "R")]
    batches: Option<usize>,
    /// Batch size; sets R = N/n.
    #[arg(long = "n")]
    batch_size: Option<usize>,
    /// Data set size.
    #[arg(long = "N")]
    num_terms: Option<usize>,
    /// Batching policy (repeatable).
    #[arg(long = "policy", value_enum)]
    policies: Vec<Policy>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    burnin: Option<usize>,
    /// Fixed epoch count instead of the default rule.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Target batch-mean variance for the Gaussian data.
    #[arg(long = "V")]
    batch_mean_variance: Option<f64>,
    /// SimData feature count.
    #[arg(long)]
    features: Option<usize>,
    /// Labelled CSV data set for logistic regression.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    standardize: bool,
    /// Label column, negative counts from the end.
    #[arg(long, allow_hyphen_values = true)]
    label_column: Option<isize>,
    /// The data set has no header row.
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    hmc_samples: Option<usize>,
    /// Starting point of the logistic-regression chains.
    #[arg(long, value_enum)]
    start: Option<Start>,
    /// Target accuracy for steps-to-epsilon (repeatable).
    #[arg(long = "epsilon")]
    epsilons: Vec<f64>,
    /// Iteration counts for the bounds table (repeatable).
    #[arg(long = "K")]
    iterations: Vec<usize>,
    #[arg(long)]
    mc_draws: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn into_spec(self, kind: ExperimentKind) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_json_file(path)
                .with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentSpec::default(),
        };
        spec.kind = kind;
        if !self.steps.is_empty() {
            spec.steps = self.steps;
        }
        if !self.policies.is_empty() {
            spec.policies = self.policies.into_iter().map(Scheme::from).collect();
        }
        if !self.epsilons.is_empty() {
            spec.epsilons = self.epsilons;
        }
        if !self.iterations.is_empty() {
            spec.iterations_grid = self.iterations;
        }
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { spec.$target = v; })*
            };
        }
        set!(batches => batches, realizations => realizations, groups => groups, seed => seed,
             burnin => burn_in, max_iterations => max_iterations, sigma2 => sigma2,
             features => features, label_column => label_column, hmc_samples => hmc_samples,
             mc_draws => mc_draws);
        if self.batch_size.is_some() {
            spec.batch_size = self.batch_size;
        }
        if self.num_terms.is_some() {
            spec.num_terms = self.num_terms;
        }
        if self.epochs.is_some() {
            spec.epochs = self.epochs;
        }
        if self.batch_mean_variance.is_some() {
            spec.batch_mean_variance = self.batch_mean_variance;
        }
        if self.dataset.is_some() {
            spec.dataset = self.dataset;
        }
        if let Some(start) = self.start {
            spec.start = start.into();
        }
        if self.out.is_some() {
            spec.output = self.out;
        }
        spec.standardize |= self.standardize;
        spec.has_header &= !self.no_header;
        Ok(spec)
    }
}

fn print_report(report: &Report) {
    match report {
        Report::ModelProblem(r) => {
            println!("N = {}, R = {}, n = {}, V = {:.6}", r.num_terms, r.batches, r.batch_size, r.batch_mean_variance);
            println!("{:>8} {:>5} {:>7} {:>12} {:>10} {:>12}", "h", "policy", "K", "rel.err", "se", "closed form");
            for run in &r.runs {
                println!(
                    "{:>8} {:>5?} {:>7} {:>12.6} {:>10.6} {:>12.6}",
                    run.step, run.scheme, run.iterations, run.average.estimate, run.average.standard_error, run.average.predicted
                );
            }
        }
        Report::Logreg(r) => {
            println!(
                "N = {}, d = {}, R = {}, HMC acceptance {:.3}{}",
                r.num_terms,
                r.dim,
                r.batches,
                r.reference.acceptance_rate,
                if r.reference.acceptance_flag { " (out of range)" } else { "" }
            );
            println!("{:>8} {:>5} {:>7} {:>12} {:>10} {:>9}", "h", "policy", "K", "|dmu|/|mu|", "noise", "periodic");
            for run in &r.runs {
                println!(
                    "{:>8} {:>5?} {:>7} {:>12.3e} {:>10.2e} {:>9}",
                    run.step, run.scheme, run.iterations, run.final_error, run.final_error_noise, run.periodicity.is_periodic()
                );
            }
        }
        Report::Bounds(r) => {
            let inadmissible = r.cells.iter().filter(|c| c.bound.is_none()).count();
            println!("{} cells, {} outside the hypotheses", r.cells.len(), inadmissible);
            for (t, batches, slope) in &r.slopes {
                println!("{:<16} R = {:<4} steps-to-eps slope {:.3}", t.label(), batches, slope);
            }
        }
        Report::VarianceCheck(checks) => {
            for c in checks {
                println!(
                    "{:<24} {:>14.6e} {:>14.6e} {:<12} {}",
                    c.identity,
                    c.observed,
                    c.predicted,
                    c.method,
                    if c.pass { "pass" } else { "FAIL" }
                );
            }
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let spec = match cli.command {
        Command::ModelProblem(c) => c.into_spec(ExperimentKind::ModelProblem)?,
        Command::Logreg(c) => c.into_spec(ExperimentKind::Logreg)?,
        Command::Bounds(c) => c.into_spec(ExperimentKind::BoundsSweep)?,
        Command::VarianceCheck(c) => c.into_spec(ExperimentKind::VarianceCheck)?,
    };
    let report = experiment::run(&spec)?;
    print_report(&report);
    if let Some(dir) = &spec.output {
        log::info!("artifacts written to {}", dir.display());
    }
    Ok(())
}
