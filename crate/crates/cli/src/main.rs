mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use edgedis::eval::ValueSource;

#[derive(Parser)]
#[command(name = "edgedis", version, about = "Edge-disentangling GNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Values {
    Weights,
    Probabilities,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-relation synthetic dataset.
    Generate {
        /// SynthSpec JSON; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint, history and manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TrainConfig JSON, overridden by any `--key value` flags.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reuse the configuration recorded in a previous run's manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Test-mask metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Channel correlation and, for synthetic data, disentanglement AUC.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Quantity correlated across channels.
        #[arg(long, value_enum, default_value_t = Values::Weights)]
        values: Values,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every cell of a lambda grid.
    Grid {
        #[arg(long)]
        data: PathBuf,
        /// JSON object with optional `lambda1`, `lambda2`, `lambda3` lists.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => run::generate(spec.as_deref(), &out, seed),
        Command::Train {
            data,
            out,
            config,
            manifest,
            overrides,
        } => run::train_cmd(&data, &out, config.as_deref(), manifest.as_deref(), &overrides),
        Command::Eval { checkpoint, data, out } => run::eval_cmd(&checkpoint, &data, out.as_deref()),
        Command::Analyze {
            checkpoint,
            data,
            layer,
            values,
            out,
        } => {
            let source = match values {
                Values::Weights => ValueSource::Weights,
                Values::Probabilities => ValueSource::Probabilities,
            };
            run::analyze_cmd(&checkpoint, &data, layer, source, &out)
        }
        Command::Grid {
            data,
            grid,
            out,
            config,
            parallel,
            overrides,
        } => run::grid_cmd(&data, &grid, &out, config.as_deref(), parallel, &overrides),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
