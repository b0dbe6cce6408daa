//! Command-line front end for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use streamfilter::harness::{
    run_degradation, run_pups, run_steps, run_timing, write_tables, CostModel, ExperimentKind,
    ExperimentSpec, Table,
};

#[derive(Parser, Debug)]
#[command(name = "streamfilter", about = "Streaming posterior sampling studies")]
struct Cli {
    /// Which study to run: degradation, steps, timing, or pups
    experiment: String,

    /// Flat key=value config file
    #[arg(long)]
    config: PathBuf,

    /// Output directory for result tables (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,

    /// Shrink the run to the quick one-cell profile
    #[arg(long)]
    smoke: bool,
}

fn run(cli: &Cli) -> streamfilter::Result<Vec<Table>> {
    let kind = ExperimentKind::parse(&cli.experiment)?;
    let text = std::fs::read_to_string(&cli.config)?;
    let mut spec = ExperimentSpec::parse(&text)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if cli.smoke {
        spec.apply_smoke();
    }
    let tables = match kind {
        ExperimentKind::Degradation => run_degradation(&spec)?,
        ExperimentKind::Steps => run_steps(&spec)?,
        ExperimentKind::Timing => run_timing(&spec, &CostModel::unit())?,
        ExperimentKind::Pups => run_pups(&spec)?,
    };
    if let Some(dir) = &cli.out {
        write_tables(&tables, dir, kind)?;
        eprintln!(
            "wrote {} table(s) to {} (seed {})",
            tables.len(),
            dir.display(),
            spec.seed
        );
    } else {
        for table in &tables {
            println!("## {}", table.name);
            print!("{}", table.to_string_lossy());
        }
    }
    Ok(tables)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
