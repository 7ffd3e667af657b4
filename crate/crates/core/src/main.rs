use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ergokit::cli::{run_from_file, Overrides};
use ergokit::config::Experiment;

/// Monte Carlo checks of coupling-based ergodicity criteria.
#[derive(Debug, Parser)]
#[command(name = "ergokit", version)]
struct Args {
    /// simulate, couple, tv-decay, drift-check, rank-check, orey-check or invariant-check
    #[arg(value_parser = parse_experiment)]
    experiment: Experiment,
    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory
    #[arg(long)]
    out: Option<String>,
    /// Also write SVG figures
    #[arg(long)]
    plot: bool,
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown experiment '{s}'"))
}

fn main() -> ExitCode {
    // usage errors are execution errors; 2 is reserved for failed verdicts
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("ERGOKIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let overrides = Overrides { experiment: Some(args.experiment), seed: args.seed, output: args.out, plot: args.plot };
    let report = run_from_file(&args.config, &overrides);
    match (&report.failed_stage, &report.error) {
        (Some(stage), Some(err)) => eprintln!("ergokit: {stage}: {err}"),
        _ => {
            for v in &report.verdicts {
                println!("{:<24} {}", v.check, if v.passed { "pass" } else { "FAIL" });
            }
        }
    }
    ExitCode::from(report.exit_code() as u8)
}
