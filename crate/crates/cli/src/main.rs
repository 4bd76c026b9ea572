use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use xpt_sim::error::ConfigError;
use xpt_sim::experiments::{parse_pairs, run_experiment, ExperimentConfig, ExperimentError, ExperimentKind};

/// Runs one prefetcher experiment and writes its CSV artifacts and summary.
///
/// Settings are applied in this order, later ones winning: the config file,
/// then `--experiment`, `--seed` and `--out`, then each `--set`.
#[derive(Debug, Parser)]
#[command(name = "xpt-sim", version)]
struct Cli {
    /// Experiment to run (see --list).
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the experiment catalog and exit.
    #[arg(long)]
    list: bool,
}

fn catalog() -> String {
    ExperimentKind::ALL
        .iter()
        .map(|k| format!("{:<20} {}\n", k.name(), k.description()))
        .collect()
}

fn collect_pairs(cli: &Cli) -> Result<Vec<(String, String)>, ExperimentError> {
    let mut pairs = Vec::new();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        pairs = parse_pairs(&text)?;
    }
    if let Some(e) = &cli.experiment {
        pairs.push(("experiment".into(), e.clone()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        pairs.push(("out".into(), out.display().to_string()));
    }
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::invalid("--set", format!("expected KEY=VALUE, found `{item}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::from_pairs(&collect_pairs(cli)?)?;
    let written = run_experiment(&cfg)?;
    if let Some(summary) = written.iter().find(|p| p.ends_with("summary.txt")) {
        if let Ok(text) = fs::read_to_string(summary) {
            print!("{text}");
        }
    }
    for path in &written {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.list {
        print!("{}", catalog());
        return ExitCode::SUCCESS;
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
