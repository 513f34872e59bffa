use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lab_cli::commands::{self, THEORY_SCENARIOS};
use lab_cli::config::ExperimentConfig;
use lab_cli::error::Result;

#[derive(Parser)]
#[command(name = "lab", version, about = "One-shot visual adaptation experiments at toy scale")]
struct Cli {
    /// TOML experiment configuration, applied on top of --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named configuration (toy, reference, smoke); for `sweep`, the
    /// cell matrix (libero-v-toy, orbit-30).
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "lab-out")]
    out: PathBuf,
    /// Record zero wall time so outputs are byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Behavior-clone a base model on the source domain.
    Pretrain,
    /// Adapt a base checkpoint on a single demonstration.
    Adapt {
        #[arg(long)]
        base: PathBuf,
        /// Demonstration JSON; recorded from the scripted expert if absent.
        #[arg(long)]
        demo: Option<PathBuf>,
        /// Perturbation for recording and scoring, e.g. orbit:30, noise:fog:6.
        #[arg(long)]
        perturb: Option<String>,
        /// Overrides [adapter].kind, e.g. ftm, fla-r16, prompt-8.
        #[arg(long)]
        adapter: Option<String>,
    },
    /// Evaluate a matrix of adapters × perturbations.
    Sweep {
        #[arg(long)]
        base: PathBuf,
    },
    /// Emit theory-check reports.
    Theory {
        /// Comma-separated scenario names; all by default.
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<String>,
    },
    /// Summarize a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

fn experiment(cli: &Cli, preset_is_matrix: bool) -> Result<ExperimentConfig> {
    let base = match &cli.preset {
        Some(p) if !preset_is_matrix => ExperimentConfig::preset(p)?,
        _ => ExperimentConfig::toy(),
    };
    match &cli.config {
        Some(path) => ExperimentConfig::load(path, &base),
        None => Ok(base),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain => {
            commands::cmd_pretrain(&experiment(&cli, false)?, cli.seed, &cli.out)?;
        }
        Command::Adapt {
            base,
            demo,
            perturb,
            adapter,
        } => {
            let mut cfg = experiment(&cli, false)?;
            if let Some(a) = adapter {
                cfg.adapter.kind = a.parse()?;
            }
            commands::cmd_adapt(&cfg, base, demo.as_deref(), perturb.as_deref(), cli.seed, &cli.out)?;
        }
        Command::Sweep { base } => {
            let cfg = experiment(&cli, true)?;
            let matrix = cli.preset.as_deref().unwrap_or("libero-v-toy");
            commands::cmd_sweep(&cfg, base, matrix, cli.seed, &cli.out, cli.deterministic)?;
        }
        Command::Theory { scenarios } => {
            let names: Vec<String> = if scenarios.is_empty() {
                THEORY_SCENARIOS.iter().map(|s| s.to_string()).collect()
            } else {
                scenarios.clone()
            };
            commands::cmd_theory(&names, cli.seed, &cli.out)?;
        }
        Command::Report { results } => {
            commands::cmd_report(results, &cli.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

