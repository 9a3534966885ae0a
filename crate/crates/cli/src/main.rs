use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sttm::experiments::{self, BranchMode, ExperimentConfig, ResultTable};
use sttm::maps::NormKind;
use sttm::stochastic::DkNormalization;
use sttm::Error;

/// Transfer-tensor memory analysis of a measured spin-boson model.
#[derive(Debug, Parser)]
#[command(name = "sttm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Spin trajectories with repeated measurements.
    Dynamics,
    /// Multi-step transfer-tensor quantifiers per (delta, lambda, k).
    Quantifiers,
    /// Violation of one-step composition of the conditional maps.
    Violation,
    /// Pure-dephasing divisibility counterexamples.
    DephasingDemo,
    /// Observables at d_osc and d_osc + 1 side by side.
    Convergence,
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML configuration; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Measurement spacing; repeat for several values.
    #[arg(long, global = true)]
    delta: Vec<f64>,
    /// POVM strength in [0, 1]; repeat for several values.
    #[arg(long, global = true)]
    lambda: Vec<f64>,
    /// average, all-plus or per-branch; repeat for several modes.
    #[arg(long = "branch-mode", global = true)]
    branch_mode: Vec<BranchMode>,
    /// Normalize the averaged quantifier by k-2 instead of k-1 (k >= 3).
    #[arg(long, global = true)]
    dk_paper_literal: bool,
    /// frobenius or spectral.
    #[arg(long, global = true)]
    norm: Option<NormKind>,
}

fn configure(cli: &Cli) -> sttm::Result<ExperimentConfig> {
    let o = &cli.opts;
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &o.out {
        cfg.output.dir = out.clone();
    }
    if !o.delta.is_empty() {
        match cli.command {
            Command::Violation => {
                let [d] = o.delta[..] else {
                    return Err(Error::Config("violation takes a single --delta".into()));
                };
                cfg.analysis.violation_delta = d;
            }
            Command::Convergence => cfg.convergence.deltas = o.delta.clone(),
            Command::DephasingDemo => {
                let [d] = o.delta[..] else {
                    return Err(Error::Config("dephasing-demo takes a single --delta".into()));
                };
                cfg.dephasing.delta = d;
            }
            _ => cfg.schedule.deltas = o.delta.clone(),
        }
    }
    if !o.lambda.is_empty() {
        cfg.measurement.lambdas = o.lambda.clone();
    }
    if !o.branch_mode.is_empty() {
        cfg.analysis.branch_modes = o.branch_mode.clone();
    }
    if o.dk_paper_literal {
        cfg.analysis.dk_normalization = DkNormalization::PaperLiteral;
    }
    if let Some(norm) = o.norm {
        cfg.analysis.norm = norm;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(table: &ResultTable, cfg: &ExperimentConfig, file: &str) -> sttm::Result<()> {
    let path = cfg.output.dir.join(file);
    table.write_csv(&path)?;
    println!("wrote {} ({} rows)", path.display(), table.len());
    Ok(())
}

fn run(cli: &Cli) -> sttm::Result<()> {
    let cfg = configure(cli)?;
    log::info!("config fingerprint {}", cfg.fingerprint());
    match cli.command {
        Command::Dynamics => write(&experiments::run_dynamics(&cfg)?, &cfg, experiments::DYNAMICS_FILE),
        Command::Quantifiers => write(&experiments::run_quantifiers(&cfg)?, &cfg, experiments::QUANTIFIERS_FILE),
        Command::Violation => write(&experiments::run_violation(&cfg)?, &cfg, experiments::VIOLATION_FILE),
        Command::DephasingDemo => {
            let table = experiments::run_dephasing_demo(&cfg)?;
            print!("{}", table.to_aligned_text());
            write(&table, &cfg, experiments::DEPHASING_FILE)
        }
        Command::Convergence => write(&experiments::run_convergence(&cfg)?, &cfg, experiments::CONVERGENCE_FILE),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
