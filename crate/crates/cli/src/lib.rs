//! The `snaremap` command line: simulate or ingest patrol data, train the
//! effort-aware ensemble, build risk maps, plan patrols and evaluate.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::error::CliError;

const OVERRIDE_HELP: &str = "Any configuration key can be overridden as --section.key=value \
(for example --planner.k=3 or --ensemble.trees.num_trees=20); --seed=N and --out_dir=DIR set \
the top-level keys. Values are read as TOML literals, falling back to plain strings.";

#[derive(Debug, Parser)]
#[command(name = "snaremap", version, about = "Poaching risk prediction and robust patrol planning", after_help = OVERRIDE_HELP)]
struct Cli {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic park and its patrol records.
    Simulate,
    /// Build dataset.csv from cells, windows, waypoints and observations.
    Ingest,
    /// Train the ensemble on all but the held-out windows and score them.
    Train,
    /// Sweep the trained model over effort levels and pick field-test blocks.
    Riskmap,
    /// Plan patrols from the risk map.
    Plan {
        /// Also tabulate the improvement ratio over planner.betas.
        #[arg(long)]
        beta_sweep: bool,
    },
    /// Score the trained model on chosen windows.
    Evaluate,
    /// Chi-squared test of a field-test table.
    Fieldtest,
}

const TOP_LEVEL_KEYS: &[&str] = &["seed", "out_dir"];

/// Splits `--key=value` configuration overrides from the arguments clap sees.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let parsed = a.to_str().and_then(|s| s.strip_prefix("--")).and_then(|s| s.split_once('='));
        match parsed {
            Some((k, v)) if k.contains('.') || TOP_LEVEL_KEYS.contains(&k) => {
                overrides.push((k.to_string(), v.to_string()));
            }
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (rest, overrides) = split_overrides(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli, &overrides) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli, overrides: &[(String, String)]) -> Result<Vec<String>, CliError> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Ingest => commands::ingest(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Riskmap => commands::riskmap(&cfg),
        Command::Plan { beta_sweep } => commands::plan(&cfg, beta_sweep),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Fieldtest => commands::fieldtest(&cfg),
    }
}
