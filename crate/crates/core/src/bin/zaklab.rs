use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use zaklab::harness::{exit_code, parse_config, run_experiment, Experiment, HarnessError};

/// Run one experiment on the coupled field-crystal model.
#[derive(Debug, Parser)]
#[command(name = "zaklab", version)]
struct Cli {
    experiment: Experiment,
    /// TOML experiment description.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: &Cli) -> Result<i32, HarnessError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| HarnessError::Run(zaklab::Error::Config(format!("--threads: {e}"))))?;
    }
    let text = std::fs::read_to_string(&cli.config).map_err(|e| HarnessError::Io(cli.config.clone(), e))?;
    let mut config = parse_config(&text, Some(cli.experiment)).map_err(HarnessError::Config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    let summary = run_experiment(&config)?;
    for a in &summary.assertions {
        println!(
            "{} {}: measured {:.6e}, threshold {:.6e}",
            if a.pass { "PASS" } else { "FAIL" },
            a.name,
            a.measured,
            a.threshold
        );
    }
    println!(
        "{}: {} ({})",
        summary.experiment,
        if summary.passed { "passed" } else { "failed" },
        zaklab::harness::artifact_dir(&config).display()
    );
    Ok(exit_code(&summary))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
