//! Command-line front end: run experiments, query the accountant and the
//! convergence bounds, and inspect datasets.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad configuration or input,
//! 3 a training run diverged.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pfl::accountant::{self, PrivacyParams, Release};
use pfl::bounds::{self, BoundInputs, EstimateOptions};
use pfl::data::{self, DatasetSpec};
use pfl::experiment;
use pfl::model::ModelKind;
use pfl::orchestrator;
use pfl::streams;
use pfl::Error;

#[derive(Parser)]
#[command(name = "pfl", version, about = "Differentially private federated learning simulator")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a TOML config and write CSV tables.
    Run(RunArgs),
    /// Per-device privacy cost of a training setup.
    Account(AccountArgs),
    /// Evaluate the convergence bounds.
    Bounds(BoundsArgs),
    /// Summarise the Adult CSV and its device partition.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Write CSVs here instead of the config's output_dir.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run only the experiment with this name.
    #[arg(long)]
    only: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReleaseArg {
    /// Only the sum of local models is visible.
    Secure,
    /// Every local model is visible.
    Individual,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    #[arg(long)]
    batch_size: usize,
    /// Training examples per device `m`.
    #[arg(long)]
    local_size: usize,
    #[arg(long)]
    local_period: usize,
    #[arg(long, default_value_t = 10)]
    devices_per_round: usize,
    #[arg(long, default_value_t = 16)]
    devices: usize,
    #[arg(long)]
    rounds: usize,
    /// Noise std; mutually exclusive with --epsilon.
    #[arg(long, conflicts_with = "epsilon", required_unless_present = "epsilon")]
    sigma: Option<f64>,
    /// Calibrate the noise std so the most-selected device ends at this ε.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    /// Seed of the device selection used for realized participation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the expected participation T·r/n for every device.
    #[arg(long)]
    expected: bool,
    #[arg(long, value_enum, default_value = "secure")]
    release: ReleaseArg,
}

#[derive(Args)]
struct BoundsArgs {
    /// Smoothness constant L.
    #[arg(long)]
    smoothness: Option<f64>,
    /// Gradient variance bound β².
    #[arg(long)]
    grad_variance: Option<f64>,
    /// f(θ⁰) − f*.
    #[arg(long)]
    f0_gap: Option<f64>,
    /// Model dimension d.
    #[arg(long)]
    dim: Option<usize>,
    /// Strong-convexity constant λ; enables the convex bound.
    #[arg(long)]
    strong_convexity: Option<f64>,
    #[arg(long)]
    stepsize: f64,
    #[arg(long)]
    rounds: usize,
    #[arg(long)]
    local_period: usize,
    #[arg(long)]
    batch_size: usize,
    /// Noise variance σ².
    #[arg(long)]
    noise_var: f64,
    #[arg(long, default_value_t = 10)]
    devices_per_round: usize,
    #[arg(long, default_value_t = 16)]
    devices: usize,
    /// Estimate missing L, β², f(θ⁰) and d on this Adult CSV.
    #[arg(long)]
    estimate_on: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "logistic")]
    model: ModelArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Logistic,
    Mlp,
}

#[derive(Args)]
struct InspectArgs {
    /// Adult CSV file.
    dataset: PathBuf,
    #[arg(long, default_value_t = DatasetSpec::DEFAULT_DEVICES)]
    devices: usize,
    #[arg(long, default_value_t = DatasetSpec::DEFAULT_PER_DEVICE)]
    per_device: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 3,
        Error::Protocol(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Account(a) => account(a),
        Command::Bounds(a) => bounds_cmd(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(a: RunArgs) -> pfl::Result<u8> {
    let mut configs = experiment::load_config(&a.config)?;
    if let Some(name) = &a.only {
        configs.retain(|c| &c.name == name);
        if configs.is_empty() {
            return Err(Error::Config(format!("no experiment named {name:?}")));
        }
    }
    let mut diverged = false;
    for mut cfg in configs {
        if let Some(out) = &a.output {
            cfg.output_dir = out.clone();
        }
        let report = experiment::run_experiment(&cfg)?;
        experiment::write_report(&cfg, &report)?;
        println!("{}: wrote {} and {}", cfg.name, cfg.rounds_path().display(), cfg.summary_path().display());
        for d in &report.divergences {
            diverged = true;
            eprintln!("{}: sweep value {} seed {} diverged at round {}", cfg.name, d.sweep_value, d.seed, d.round);
        }
    }
    Ok(if diverged { 3 } else { 0 })
}

fn account(a: AccountArgs) -> pfl::Result<u8> {
    let release = match a.release {
        ReleaseArg::Secure => Release::SecureSum,
        ReleaseArg::Individual => Release::Individual,
    };
    let mut p = PrivacyParams {
        clip_norm: a.clip_norm,
        batch_size: a.batch_size,
        local_dataset_size: a.local_size,
        local_period: a.local_period,
        devices_per_round: a.devices_per_round,
        total_devices: a.devices,
        noise_std: a.sigma.unwrap_or(1.0),
        delta: a.delta,
        stepsize: 1.0,
    };
    p.validate()?;
    let participation: Vec<f64> = if a.expected {
        vec![accountant::expected_participation(a.rounds, a.devices_per_round, a.devices)?; a.devices]
    } else {
        orchestrator::participation_counts(a.seed, a.rounds, a.devices, a.devices_per_round)?
            .into_iter()
            .map(|c| c as f64)
            .collect()
    };
    if let Some(eps) = a.epsilon {
        let c = participation.iter().copied().fold(0.0, f64::max);
        p.noise_std = accountant::calibrate_sigma_for(eps, a.delta, c, &p, release)?;
    }
    let rho_iter = accountant::iteration_rho(&p)?.rho();
    let rho_round = accountant::round_rho(&p, release)?.rho();
    println!("sigma {}", p.noise_std);
    println!("rho_iteration {rho_iter}");
    println!("rho_round {rho_round}");
    println!("device,participation,rho_total,epsilon");
    for (i, &c) in participation.iter().enumerate() {
        let g = accountant::total_epsilon_for(&p, c, release)?;
        println!("{i},{c},{},{}", rho_round * c, g.epsilon);
    }
    Ok(0)
}

fn bounds_cmd(a: BoundsArgs) -> pfl::Result<u8> {
    let estimates = match &a.estimate_on {
        Some(path) => {
            let rows = data::load_adult(path)?;
            let ds = data::partition(&rows, a.devices, DatasetSpec::DEFAULT_PER_DEVICE, a.seed)?;
            let kind = match a.model {
                ModelArg::Logistic => ModelKind::Logistic,
                ModelArg::Mlp => ModelKind::Mlp { hidden: ModelKind::DEFAULT_HIDDEN },
            };
            let theta0 = kind.init(ds.feature_dim, ds.classes, &mut streams::stream(a.seed, streams::INIT, &[]));
            let est = bounds::estimate_bound_inputs(&ds, &theta0, EstimateOptions { seed: a.seed, ..Default::default() })?;
            println!("estimated_smoothness {}", est.smoothness);
            println!("estimated_grad_variance {}", est.grad_variance);
            println!("estimated_f0 {}", est.f0);
            Some(est)
        }
        None => None,
    };
    let need = |v: Option<f64>, est: Option<f64>, flag: &str| {
        v.or(est).ok_or_else(|| Error::Config(format!("--{flag} is required without --estimate-on")))
    };
    let b = BoundInputs {
        smoothness: need(a.smoothness, estimates.map(|e| e.smoothness), "smoothness")?,
        grad_variance: need(a.grad_variance, estimates.map(|e| e.grad_variance), "grad-variance")?,
        strong_convexity: a.strong_convexity.unwrap_or(f64::NAN),
        f0_gap: need(a.f0_gap, estimates.map(|e| e.f0), "f0-gap")?,
        stepsize: a.stepsize,
        iterations: a.rounds * a.local_period,
        local_period: a.local_period,
        batch_size: a.batch_size,
        noise_var: a.noise_var,
        dim: match a.dim.or(estimates.map(|e| e.dim)) {
            Some(d) => d,
            None => return Err(Error::Config("--dim is required without --estimate-on".into())),
        },
        devices_per_round: a.devices_per_round,
        total_devices: a.devices,
    };
    let lr = bounds::lr_condition(b.stepsize, b.smoothness, b.local_period);
    println!("lr_condition {} slack {}", if lr.satisfied { "satisfied" } else { "violated" }, lr.slack);
    println!("bound_nonconvex {}", bounds::bound_nonconvex(&b)?);
    if a.strong_convexity.is_some() {
        println!("bound_convex {}", bounds::bound_convex(&b)?);
    }
    Ok(0)
}

fn inspect(a: InspectArgs) -> pfl::Result<u8> {
    let rows = data::load_adult(&a.dataset)?;
    let positives = rows.iter().filter(|r| r.label == 1).count();
    let missing = rows.iter().filter(|r| r.categorical.iter().any(|c| c == data::MISSING)).count();
    println!("rows         {}", rows.len());
    println!("positive     {positives} ({:.4})", positives as f64 / rows.len().max(1) as f64);
    println!("with_missing {missing}");
    let ds = data::partition(&rows, a.devices, a.per_device, a.seed)?;
    print!("{ds}");
    Ok(0)
}
