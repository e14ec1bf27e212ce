use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfg_cli::config;
use mfg_cli::run::{run, RunError};
use mfg_cli::verify::{verify, VerifyError};

/// Stationary mean field game solver.
#[derive(Parser)]
#[command(name = "mfg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the problem described by a JSON configuration.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Results directory; defaults to the configuration's "output".
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        emit_heatmaps: bool,
        /// Write the residual history to iterations.csv.
        #[arg(long)]
        diagnostics: bool,
        /// Seed for randomized probes.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-certify a results directory against its stored report.
    Verify { dir: PathBuf },
    /// Run the convex-analysis and discretization property suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NOT_CERTIFIED: u8 = 3;

fn configure_threads() {
    if let Some(n) = std::env::var("MFG_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            // Fails only if the pool was already built.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    match Cli::parse().command {
        Command::Solve { config, out, emit_heatmaps, diagnostics, seed } => {
            solve(config, out, emit_heatmaps, diagnostics, seed)
        }
        Command::Verify { dir } => match verify(&dir) {
            Ok(mismatches) if mismatches.is_empty() => {
                println!("ok: {} matches its stored report", dir.display());
                ExitCode::SUCCESS
            }
            Ok(mismatches) => {
                for m in &mismatches {
                    println!("mismatch {}: stored {} recomputed {}", m.field, m.stored, m.recomputed);
                }
                ExitCode::from(EXIT_FAILURE)
            }
            Err(VerifyError::Malformed(msg)) => {
                eprintln!("error: malformed results: {msg}");
                ExitCode::from(EXIT_CONFIG)
            }
            Err(VerifyError::Runtime(e)) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_FAILURE)
            }
        },
        Command::Selftest { seed, json } => selftest(seed, json),
    }
}

fn solve(path: PathBuf, out: Option<PathBuf>, heatmaps: bool, diagnostics: bool, seed: Option<u64>) -> ExitCode {
    let mut cfg = match config::load(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    cfg.emit_heatmaps |= heatmaps;
    cfg.diagnostics |= diagnostics;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let Some(out) = out.or_else(|| cfg.output.clone()) else {
        eprintln!("error: {}: no output directory (pass --out or set \"output\")", path.display());
        return ExitCode::from(EXIT_CONFIG);
    };
    match run(&cfg, &out) {
        Ok(meta) => {
            println!(
                "{:?}: {} iterations, {:.2} s, lambda {:?}, objective {:.10e}",
                meta.problem, meta.iterations, meta.wall_time_seconds, meta.lambda, meta.objective
            );
            for c in meta.certificate.iter().filter(|c| !c.pass) {
                println!("  failed {}: {:?} ({:?} {:e})", c.name, c.value, c.limit, c.threshold);
            }
            if meta.certified {
                println!("certified; results in {}", out.display());
                ExitCode::SUCCESS
            } else {
                let why = if meta.converged { "converged but not certified" } else { "not converged" };
                println!("{why}; results in {}", out.display());
                ExitCode::from(EXIT_NOT_CERTIFIED)
            }
        }
        Err(RunError::Config(msg)) => {
            eprintln!("error: {}: {msg}", path.display());
            ExitCode::from(EXIT_CONFIG)
        }
        Err(RunError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn selftest(seed: u64, json: bool) -> ExitCode {
    let start = std::time::Instant::now();
    let cases = mfg_core::fpcheck::run_all(seed);
    let elapsed = start.elapsed().as_secs_f64();
    let all = cases.iter().all(|c| c.pass);
    if json {
        let report = serde_json::json!({ "seed": seed, "seconds": elapsed, "pass": all, "cases": cases });
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for c in &cases {
            println!(
                "{} {:<42} worst {:>12.4e}  {:?} {:e}  ({} samples)",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.worst,
                c.bound,
                c.tolerance,
                c.samples
            );
        }
        let passed = cases.iter().filter(|c| c.pass).count();
        println!("{passed}/{} cases passed in {elapsed:.2} s (seed {seed})", cases.len());
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    }
}
