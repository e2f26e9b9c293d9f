use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use fleetfuse::model::Variant;
use fleetfuse_cli::{
    ablation_summary, render_results, run_ablate, run_eval, run_selftest, run_sweep, run_train,
    CliError, EmitFormat, ExperimentConfig,
};

/// Uncertainty-gated multi-agent perception experiments.
#[derive(Parser)]
#[command(name = "fleetfuse", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the trained variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(variant) = self.variant {
            config.train.model.variant = variant;
        }
        if let Some(epochs) = self.epochs {
            config.train.epochs = epochs;
            config.train.validate().map_err(|e| CliError::Config(anyhow!(e)))?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant/seed cell; writes a checkpoint and one row.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run seed (weight init, shuffling, gating noise).
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Re-score a saved checkpoint on the test corpus.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Cross variants × seeds × corruption levels into one results file.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        seeds: Vec<u64>,
        /// Comma-separated corruption probabilities.
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        p: Vec<f64>,
        /// Comma-separated variant tags (defaults to the config's variant).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        /// Worker threads for grid cells (0 = one per core).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Fixed four-variant ablation grid at the config's corruption level.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the fast invariant suite; nonzero exit on any failure.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version arrive here too; they exit cleanly.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, seed } => {
            let config = config.load()?;
            let row = run_train(&config, seed)?;
            print!("{}", render_results(std::slice::from_ref(&row), EmitFormat::Csv));
            Ok(())
        }
        Command::Eval { config, seed } => {
            let config = config.load()?;
            let row = run_eval(&config, seed)?;
            print!("{}", render_results(std::slice::from_ref(&row), EmitFormat::Csv));
            Ok(())
        }
        Command::Sweep {
            config,
            seeds,
            p,
            variants,
            jobs,
        } => {
            let config = config.load()?;
            let variants = variants.unwrap_or_else(|| vec![config.train.model.variant]);
            let outcome = run_sweep(&config, &variants, &seeds, &p, jobs)?;
            print!("{}", render_results(&outcome.rows, EmitFormat::Csv));
            finish_grid(outcome.failures)
        }
        Command::Ablate {
            config,
            seeds,
            jobs,
        } => {
            let config = config.load()?;
            let outcome = run_ablate(&config, &seeds, jobs)?;
            print!("{}", render_results(&outcome.rows, EmitFormat::Csv));
            print!("{}", ablation_summary(&outcome.rows));
            finish_grid(outcome.failures)
        }
        Command::Selftest => run_selftest(),
    }
}

fn finish_grid(failures: Vec<(Variant, u64, f64, String)>) -> Result<(), CliError> {
    if failures.is_empty() {
        return Ok(());
    }
    let detail = failures
        .iter()
        .map(|(v, s, p, m)| format!("{} seed {s} p {p}: {m}", v.tag()))
        .collect::<Vec<_>>()
        .join("; ");
    Err(CliError::Runtime(anyhow!(
        "{} grid cell(s) failed: {detail}",
        failures.len()
    )))
}
