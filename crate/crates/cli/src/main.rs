use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kamoe::experiment::{cmd_eval, cmd_inspect, cmd_sweep, cmd_train, workers_from_env, ExperimentConfig, AVG_DIFF_LABEL};
use kamoe::io::write_atomic;
use kamoe::Error;

#[derive(Parser)]
#[command(name = "kamoe", version, about = "Mixture-of-experts regression and forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and save it with its test metrics
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every grid cell over several seeds and write comparison tables
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-sample gate weights of a saved mixture model
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model on a CSV that includes the target
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::DegenerateColumn { .. } | Error::DegenerateSeries(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> kamoe::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_overrides(seed, out);
    Ok(cfg)
}

fn run(cli: Cli) -> kamoe::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let m = cmd_train(&cfg)?;
            println!(
                "r2={:.6} rmse={:.6} mse={:.6} params={} epochs={} seconds={:.2}",
                m.r2, m.rmse, m.mse, m.parameter_count, m.epochs_run, m.train_seconds
            );
            println!("wrote {}", cfg.out_dir().display());
        }
        Command::Sweep { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let result = cmd_sweep(&cfg, workers_from_env()?, true)?;
            print!("{}", result.tables["r2_mean.csv"].replace(&format!("\"{AVG_DIFF_LABEL}\""), AVG_DIFF_LABEL));
            let failed: usize = result.cells.iter().map(|c| c.failures.len()).sum();
            if failed > 0 {
                eprintln!("{failed} run(s) failed; see cells.json");
            }
            println!("wrote {}", cfg.out_dir().display());
        }
        Command::Inspect { model, input, out } => {
            let report = cmd_inspect(&model, &input)?;
            let means: Vec<String> = report.mean_per_expert.iter().map(|v| format!("{v:.6}")).collect();
            println!("mean gate weight per expert: {}", means.join(" "));
            match out {
                Some(path) => write_atomic(&path, report.to_csv().as_bytes())?,
                None => print!("{}", report.to_csv()),
            }
        }
        Command::Eval { model, data, out } => {
            let m = cmd_eval(&model, &data)?;
            let json = serde_json::to_string_pretty(&m)?;
            if let Some(path) = out {
                write_atomic(&path, json.as_bytes())?;
            }
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
