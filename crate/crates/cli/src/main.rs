//! `sparseid`: fit, prune and simulate ODE models from measurement data.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparseid_core::config::RunConfig;
use sparseid_core::experiments::{Builtin, ExperimentSpec};
use sparseid_core::pipeline::{dry_run, run, simulate_file, Stage};

#[derive(Parser)]
#[command(name = "sparseid", version, about = "Sparse identification of ODE models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model on the data.
    Fit(RunArgs),
    /// Train, then remove network edges by backward elimination.
    Prune(RunArgs),
    /// Roll out a saved model with fixed-step RK4.
    Simulate(SimulateArgs),
    /// Check a config file without reading data.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the noisy measurements of a built-in example as CSV.
    Generate {
        /// lorenz-full, lorenz-partial or van-der-pol
        #[arg(long)]
        example: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Horizon override.
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Measurement CSV, overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory, overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Validate and print problem sizes without solving.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// model.json written by fit or prune.
    #[arg(long)]
    model: PathBuf,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Vec<f64>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    t0: f64,
    #[arg(long, allow_hyphen_values = true)]
    t1: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Channel names for the CSV header, comma separated.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

fn load(args: &RunArgs) -> sparseid_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(args: &RunArgs, stage: Stage) -> sparseid_core::Result<()> {
    let cfg = load(args)?;
    if args.dry_run {
        let d = dry_run(&cfg)?;
        println!("measurement times: {}", d.measurement_times);
        println!("measurement values: {}", d.measurement_values);
        println!("grid points: {}", d.grid_points);
        println!("batches: {}", d.batches);
        println!("parameters: {}", d.n_params);
        println!("decision variables: {}", d.decision_variables);
        return Ok(());
    }
    let s = run(&cfg, stage)?;
    println!("fit cost {:e} ({})", s.fit_cost, s.fit_termination);
    if stage == Stage::Prune {
        println!("pruned: {} removals accepted, final cost {:e}", s.log.accepted(), s.final_cost);
    }
    if let Some(net) = s.model.network() {
        println!("active weights {} of {}", net.active_weight_count(), net.n_weights());
    }
    println!("artifacts in {}", cfg.out.display());
    Ok(())
}

fn execute(cli: Cli) -> sparseid_core::Result<()> {
    match cli.command {
        Command::Fit(a) => run_stage(&a, Stage::Fit),
        Command::Prune(a) => run_stage(&a, Stage::Prune),
        Command::Simulate(a) => {
            let tr = simulate_file(&a.model, &a.x0, a.t0, a.t1, a.dt, &a.out, a.channels)?;
            println!("{} steps written to {}", tr.times.len() - 1, a.out.display());
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("ok: {} states, criterion {}", cfg.channels.len(), cfg.criterion);
            Ok(())
        }
        Command::Generate { example, seed, t_end, out } => {
            let mut spec = ExperimentSpec::builtin(Builtin::parse(&example)?);
            if let Some(t) = t_end {
                spec.t_end = t;
            }
            let (data, _) = spec.generate(seed)?;
            data.write_csv(&out, &sparseid_core::data::default_channel_names(spec.n_x()))?;
            println!("{} measurement times written to {}", data.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
