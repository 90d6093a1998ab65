//! Command-line entry point: train a policy, simulate cohorts under a
//! frozen checkpoint, or aggregate simulation logs.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use pension_sim::analytics;
use pension_sim::config::RunConfig;
use pension_sim::error::{SimError, SimResult};
use pension_sim::policy::Checkpoint;
use pension_sim::population::load_tables;
use pension_sim::simulate::{simulate_parallel, CohortSpec};
use pension_sim::training::Trainer;

/// Environment variable overriding the rayon worker count.
const WORKERS_ENV: &str = "PENSION_SIM_WORKERS";

#[derive(Parser)]
#[command(name = "pension-sim", about = "Multi-agent pension life-cycle simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from scratch and write checkpoints plus metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Roll out cohorts under a frozen checkpoint and write per-cohort logs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate simulation logs into a JSON report.
    Analyze {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_workers() {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run_train(config_path: &PathBuf) -> SimResult<()> {
    let config = RunConfig::load(config_path)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| SimError::Io {
        path: config.output_dir.display().to_string(),
        source: e,
    })?;
    eprintln!("resolved configuration:\n{}", config.resolved_json());
    let tables = Arc::new(load_tables(&config.data_dir)?);
    let mut trainer = Trainer::new(
        tables,
        config.population.clone(),
        config.graph,
        config.market,
        config.environment,
        config.trainer.clone(),
        config.seed,
    )?;
    let metrics = trainer.run(Some(&config.output_dir))?;

    let metrics_path = config.output_dir.join("metrics.csv");
    let file = std::fs::File::create(&metrics_path).map_err(|e| SimError::Io {
        path: metrics_path.display().to_string(),
        source: e,
    })?;
    let mut writer = csv::Writer::from_writer(file);
    for m in &metrics {
        writer.serialize(m).map_err(|e| SimError::Csv {
            path: metrics_path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| SimError::Io {
        path: metrics_path.display().to_string(),
        source: e,
    })?;
    if let Some(last) = metrics.last() {
        eprintln!(
            "finished {} updates, {} env steps, mean reward {:.3}",
            last.update, last.env_steps, last.mean_reward
        );
    }
    eprintln!("checkpoint written to {}", config.output_dir.join("checkpoint.json").display());
    Ok(())
}

fn run_simulate(config_path: &PathBuf, checkpoint_path: &PathBuf) -> SimResult<()> {
    let config = RunConfig::load(config_path)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| SimError::Io {
        path: config.output_dir.display().to_string(),
        source: e,
    })?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let tables = Arc::new(load_tables(&config.data_dir)?);
    let spec = CohortSpec {
        tables,
        population: config.population.clone(),
        graph: config.graph,
        market: config.market,
        environment: config.environment,
        ticks: config.simulation.ticks,
        seed: config.seed,
    };
    let runs = simulate_parallel(&checkpoint, &spec, config.simulation.cohorts)?;
    for (env_id, rows) in runs.iter().enumerate() {
        let path = config.output_dir.join(format!("cohort_{env_id:03}.csv"));
        analytics::write_log(&path, rows)?;
        eprintln!("cohort {env_id}: {} rows -> {}", rows.len(), path.display());
    }
    Ok(())
}

fn run_analyze(logs: &PathBuf, out: &PathBuf) -> SimResult<()> {
    let rows = analytics::read_log_dir(logs)?;
    if rows.is_empty() {
        return Err(SimError::Config(format!("no log rows found under {}", logs.display())));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| SimError::Io { path: out.display().to_string(), source: e })?;
    let agg = analytics::aggregate(&rows);
    let report_path = out.join("report.json");
    analytics::write_report(&report_path, &agg)?;
    eprintln!(
        "aggregated {} rows ({} zero-income ticks excluded) -> {}",
        agg.rows_total,
        agg.zero_income_ticks,
        report_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    init_workers();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => run_train(config),
        Command::Simulate { config, checkpoint } => run_simulate(config, checkpoint),
        Command::Analyze { logs, out } => run_analyze(logs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (SimError::Config(_) | SimError::Io { .. } | SimError::Csv { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
