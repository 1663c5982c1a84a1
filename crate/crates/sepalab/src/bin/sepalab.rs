use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sepalab::cli::{render_report, run_command, Format, RunConfig};

/// Finite-precision attention and recurrent constructions verified
/// against brute-force oracles, with exact communication accounting.
#[derive(Parser)]
#[command(name = "sepalab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Sequence lengths to sweep, comma separated.
    #[arg(long = "n", value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64])]
    n: Vec<usize>,
    /// Random cases per length (exhaustive sweeps ignore this).
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    /// Sweep seed.
    #[arg(long, env = "SEPALAB_SEED", default_value_t = 42)]
    seed: u64,
    /// Grid exponent: one tick is N^-kc.
    #[arg(long, default_value_t = 2)]
    kc: u32,
    /// Retrieval margin override for the nearest-neighbor model.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a construction and sweep it against its oracle.
    Verify {
        /// index-lookup | equality | partition-equality | threshold-ksparse | nearest-neighbor
        construction: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run a two-party simulation against direct evaluation, or check
    /// the fooling set.
    Protocol {
        /// one-layer | rnn-prefix | fooling
        protocol: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print the closed-form width floors.
    Bounds {
        /// Register precision the floors are evaluated at.
        #[arg(long, default_value_t = 20)]
        p: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Emit labelled task instances as JSONL.
    Gen {
        /// index-lookup | dyck22 | eq-random | eq-one | eq-ncp | nn | mqar
        task: String,
        #[command(flatten)]
        common: Common,
    },
}

fn to_config(command: &Command) -> RunConfig {
    let (name, target, common, p) = match command {
        Command::Verify { construction, common } => ("verify", construction.clone(), common, 20),
        Command::Protocol { protocol, common } => ("protocol", protocol.clone(), common, 20),
        Command::Bounds { p, common } => ("bounds", String::new(), common, *p),
        Command::Gen { task, common } => ("gen", task.clone(), common, 20),
    };
    let mut config = RunConfig::new(name, &target);
    config.n = common.n.clone();
    config.trials = common.trials;
    config.seed = common.seed;
    config.kc = common.kc;
    config.gamma = common.gamma;
    config.p = p;
    config.format = common.format;
    config.out = common.out.as_ref().map(|p| p.display().to_string());
    config
}

fn run(cli: &Cli) -> Result<bool, String> {
    let config = to_config(&cli.command);
    let result = run_command(&config).map_err(|e| e.to_string())?;
    let bytes = render_report(&config, &result).map_err(|e| e.to_string())?;
    match &config.out {
        Some(path) => std::fs::write(path, &bytes).map_err(|e| format!("write {path}: {e}"))?,
        None => std::io::stdout().write_all(&bytes).map_err(|e| e.to_string())?,
    }
    Ok(result.pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
