//! Command-line front end: runs experiment configs, merges finished runs,
//! exports landscapes, validates configs, and freezes synthetic streams.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use motalab::baselines::Strategy;
use motalab::config::ExperimentConfig;
use motalab::runner::{compare_runs, export_landscape_for, run_experiment, RunOptions};
use motalab::stream::{export_stream, make_stream, ShiftKind, StreamSpec};
use motalab::{Error, Result};

#[derive(Parser)]
#[command(name = "motalab", version, about = "Continual-learning strategy laboratory")]
struct Cli {
    /// Master seed override (for `run`) or generator seed (for `gen-stream`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; defaults to the config's out_dir (or `streams` for
    /// gen-stream).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Recompute cells even when cached reports exist.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (0 keeps the library default).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every (strategy, seed) cell of a config file.
    Run { config: PathBuf },
    /// Merge the metric tables of finished runs into one CSV.
    Compare {
        #[arg(required = true)]
        run_ids: Vec<String>,
    },
    /// Export the loss-landscape bundle for one strategy of a finished run.
    Landscape {
        run_id: String,
        #[arg(long)]
        strategy: String,
    },
    /// Parse and validate a config file without running anything.
    ValidateConfig { file: PathBuf },
    /// Generate a frozen synthetic task stream as CSV files.
    GenStream {
        #[arg(long, default_value = "task_il")]
        kind: String,
        #[arg(long, default_value_t = 5)]
        tasks: usize,
        #[arg(long, default_value_t = 2)]
        classes_per_task: usize,
        #[arg(long, default_value_t = 200)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 16)]
        input_dim: usize,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 3.0)]
        range: f64,
    },
}

fn parse_kind(s: &str) -> Result<ShiftKind> {
    match s {
        "task_il" => Ok(ShiftKind::TaskIl),
        "instance_il" => Ok(ShiftKind::InstanceIl),
        "domain_il" => Ok(ShiftKind::DomainIl),
        other => Err(Error::Config(format!(
            "kind `{other}` (expected task_il, instance_il, or domain_il)"
        ))),
    }
}

fn default_out_root(cfg: &ExperimentConfig, cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir))
}

fn cmd_run(cli: &Cli, config_path: &PathBuf) -> Result<i32> {
    let cfg = ExperimentConfig::from_file(config_path)?;
    println!("config {}", cfg.hash()?);
    for d in cfg.deviation_notes() {
        println!("deviation: {d}");
    }
    let opts = RunOptions {
        out_override: cli.out.clone(),
        master_seed_override: cli.seed,
        force: cli.force,
    };
    let (report, agg_dir) = run_experiment(&cfg, &opts)?;
    let failed: Vec<&str> = report
        .cells
        .iter()
        .filter(|c| !c.ok)
        .map(|c| c.strategy.as_str())
        .collect();
    println!(
        "{} cells in {} ms -> {}",
        report.cells.len(),
        report.total_wall_ms,
        agg_dir.display()
    );
    for row in &report.aggregates {
        println!(
            "  {}: acc {} forgetting {} drift {} ({}/{} ok)",
            row.strategy,
            row.mean_avg_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            row.mean_forgetting.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            row.mean_drift_norm.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            row.completed,
            row.completed + row.failed,
        );
    }
    if !failed.is_empty() {
        eprintln!("failed cells: {}", failed.join(", "));
    }
    Ok(report.exit_code())
}

fn cmd_gen_stream(cli: &Cli, spec: StreamSpec) -> Result<i32> {
    let seed = cli.seed.unwrap_or(3407);
    let stream = make_stream(&spec, seed)?;
    let out = cli.out.clone().unwrap_or_else(|| {
        PathBuf::from("streams").join(format!("{}_t{}_seed{}", spec.kind, spec.tasks, seed))
    });
    export_stream(&stream, &out)?;
    println!("{}", out.display());
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Run { config } => cmd_run(cli, config),
        Command::Compare { run_ids } => {
            let out_root = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            print!("{}", compare_runs(&out_root, run_ids)?);
            Ok(0)
        }
        Command::Landscape { run_id, strategy } => {
            let strategy: Strategy = strategy.parse()?;
            let out_root = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let dir = export_landscape_for(&out_root, run_id, strategy)?;
            println!("{}", dir.display());
            Ok(0)
        }
        Command::ValidateConfig { file } => {
            let cfg = ExperimentConfig::from_file(file)?;
            println!("ok {}", cfg.hash()?);
            let _ = default_out_root(&cfg, &cli.out);
            Ok(0)
        }
        Command::GenStream {
            kind,
            tasks,
            classes_per_task,
            samples_per_class,
            input_dim,
            sigma,
            range,
        } => {
            let spec = StreamSpec {
                kind: parse_kind(kind)?,
                tasks: *tasks,
                classes_per_task: *classes_per_task,
                samples_per_class: *samples_per_class,
                input_dim: *input_dim,
                cluster_sigma: *sigma,
                cluster_range: *range,
            };
            cmd_gen_stream(cli, spec)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.jobs > 0 {
        #[cfg(feature = "parallel")]
        {
            if let Err(e) =
                rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global()
            {
                log::warn!("--jobs ignored: {e}");
            }
        }
        #[cfg(not(feature = "parallel"))]
        log::warn!("--jobs ignored: built without the parallel feature");
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code.clamp(0, 255) as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(0, 255) as u8)
        }
    }
}
