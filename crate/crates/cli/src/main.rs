use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rankguard::error::Error;
use rankguard::pipeline::{self, RunConfig};

#[derive(Parser)]
#[command(name = "rankguard", version, about = "Uncertainty-aware deployment of cross-sectional ranking signals")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Deployment horizon in trading days.
    #[arg(long, global = true, value_parser = ["20", "60", "90"])]
    horizon: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the input panel to CSV.
    Generate,
    /// Run the full pipeline and write the report bundle.
    Run,
    /// Evaluate the regime gate against date-level baselines.
    EvalGate,
    /// Compute conformal intervals and coverage.
    Conformal,
    /// Print tables from an existing run directory.
    Report,
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(h) = &cli.horizon {
        cfg.deploy_horizon = h.parse().expect("validated by clap");
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Generate => {
            pipeline::cmd_generate(&cfg)?;
            println!("panel written to {}", cfg.out_dir.join("panel.csv").display());
        }
        Command::Run => {
            pipeline::cmd_run(&cfg)?;
            print!("{}", pipeline::render_report(&cfg.out_dir)?);
        }
        Command::EvalGate => {
            let report = pipeline::cmd_eval_gate(&cfg)?;
            for row in &report.rows {
                let auroc = row.evaluation.as_ref().map(|e| format!("{:.3}", e.auroc));
                println!("{:>6} {:>20} auroc {}", row.period, row.predictor, auroc.as_deref().unwrap_or("-"));
            }
        }
        Command::Conformal => {
            let cov = pipeline::cmd_conformal(&cfg)?;
            for (norm, rows) in &cov {
                for r in rows {
                    if let Some(c) = &r.report {
                        println!(
                            "{norm:>12} {:>6} marginal {:.3} spread {:.3} width {:.3}",
                            r.period, c.marginal, c.spread, c.mean_width
                        );
                    }
                }
            }
        }
        Command::Report => print!("{}", pipeline::render_report(&cfg.out_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
