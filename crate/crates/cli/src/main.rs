use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedlora_core::harness::{AssignmentName, StrategyName};
use fedlora_core::{compare, parse_config, run_experiment, ConfigOverrides};

/// Federated LoRA aggregation experiments on a synthetic linear task.
#[derive(Debug, Parser)]
#[command(name = "fedlora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write config_echo.json, rounds.csv and summary.json.
    Run(Box<RunArgs>),
    /// Run several configs and write one CSV keyed by run_id.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<StrategyName>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    samples_per_client: Option<usize>,
    #[arg(long)]
    heterogeneity: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Falls back to FEDLORA_SEED, then to the config file, then to 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Required with --strategy fedex-trunc.
    #[arg(long)]
    truncation_rank: Option<usize>,
    /// Only with --strategy fedex-lora.
    #[arg(long)]
    assignment: Option<AssignmentName>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            strategy: self.strategy,
            clients: self.clients,
            rank: self.rank,
            alpha: self.alpha,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            m: self.m,
            n: self.n,
            depth: self.depth,
            samples_per_client: self.samples_per_client,
            heterogeneity: self.heterogeneity,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            truncation_rank: self.truncation_rank,
            assignment: self.assignment,
            out_dir: self.out_dir.clone(),
        }
    }
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// JSON config files, one run each; run_id is the position in this list.
    #[arg(long, num_args = 1.., required = true)]
    configs: Vec<PathBuf>,
    /// Path of the combined CSV.
    #[arg(long)]
    out: PathBuf,
    /// Allow configs that differ in more than strategy, assignment,
    /// truncation rank or local epochs.
    #[arg(long)]
    allow_mixed: bool,
}

fn run(args: &RunArgs) -> fedlora_core::Result<()> {
    let cfg = parse_config(args.config.as_deref(), &args.overrides())?;
    let outcome = run_experiment(&cfg)?;
    let s = &outcome.summary;
    println!(
        "{}: {} rounds, final mean loss {:.6e}, max exactness gap {:.3e}, params up {} down {}",
        s.strategy,
        s.rounds,
        s.final_mean_loss.unwrap_or(f64::NAN),
        s.max_exactness_gap,
        s.total_uplink_params,
        s.total_downlink_params
    );
    println!("artifacts in {}", outcome.out_dir.display());
    Ok(())
}

fn compare_runs(args: &CompareArgs) -> fedlora_core::Result<()> {
    let configs = args
        .configs
        .iter()
        .map(|p| parse_config(Some(p), &ConfigOverrides::default()))
        .collect::<fedlora_core::Result<Vec<_>>>()?;
    let runs = compare(&configs, &args.out, args.allow_mixed)?;
    for (i, (cfg, reports)) in configs.iter().zip(&runs).enumerate() {
        let last = reports.last().map_or(f64::NAN, |r| r.mean_client_loss);
        println!("run {i}: {} final mean loss {last:.6e}", cfg.aggregation_strategy());
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare_runs(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
