use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use chemostat::cli::{
    self, builtin_names, certificate_report, check_lines, equilibrium_report, load_scenario,
    CliError, Scenario,
};
use chemostat::equilibrium::{certify_assumption1, default_lambda_grid};

#[derive(Parser)]
#[command(name = "chemostat", version, about = "Age-structured chemostat stabilization runs")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios (built-in names, file paths, or `all`).
    Run {
        #[arg(required = true)]
        scenarios: Vec<String>,
        /// Output directory (overrides outputs.dir; default `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit nonzero if any check fails.
        #[arg(long)]
        strict: bool,
        /// Override the number of age cells.
        #[arg(long)]
        grid: Option<usize>,
        /// Parallel jobs (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the equilibrium and kernel certificate of a scenario.
    Equilibrium {
        scenario: String,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Print only the kernel certificate.
    Certify {
        scenario: String,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// List built-in scenarios.
    List,
}

fn load(arg: &str, grid: Option<usize>) -> Result<Scenario, CliError> {
    let s = load_scenario(arg)?;
    Ok(match grid {
        Some(n) => s.with_grid(n),
        None => s,
    })
}

fn run_one(s: &Scenario, out: &Option<PathBuf>) -> Result<(bool, String), CliError> {
    let prepared = cli::prepare(s)?;
    for w in &prepared.warnings {
        eprintln!("warning: {}: {w}", s.name);
    }
    let outcome = cli::execute(prepared)?;
    let dir = out
        .clone()
        .or_else(|| s.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let files = cli::write_outputs(&outcome, &dir)?;
    let sm = &outcome.summary;
    let mut text = format!(
        "{} ({}, n = {}, {:.2} s): {}\n",
        sm.scenario,
        sm.controller,
        sm.cells,
        sm.elapsed_s,
        if sm.passed() { "all checks pass" } else { "CHECKS FAILED" }
    );
    text.push_str(&check_lines(sm));
    for f in files {
        text.push_str(&format!("  wrote {}\n", f.display()));
    }
    Ok((sm.passed(), text))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::List => {
            for n in builtin_names() {
                println!("{n}");
            }
            ExitCode::SUCCESS
        }
        Command::Equilibrium { scenario, grid } => match load(&scenario, grid).and_then(|s| cli::equilibrium_for(&s)) {
            Ok(eq) => {
                let cert = certify_assumption1(&eq, &default_lambda_grid());
                print!("{}", equilibrium_report(&eq, &cert));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::Certify { scenario, grid } => match load(&scenario, grid).and_then(|s| cli::equilibrium_for(&s)) {
            Ok(eq) => {
                let cert = certify_assumption1(&eq, &default_lambda_grid());
                print!("{}", certificate_report(&cert));
                if cert.is_ok() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::Run {
            scenarios,
            out,
            strict,
            grid,
            jobs,
        } => {
            let names: Vec<String> = scenarios
                .iter()
                .flat_map(|s| {
                    if s == "all" {
                        builtin_names().into_iter().map(String::from).collect()
                    } else {
                        vec![s.clone()]
                    }
                })
                .collect();
            let loaded: Result<Vec<Scenario>, CliError> = names.iter().map(|n| load(n, grid)).collect();
            let loaded = match loaded {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .expect("thread pool");
            let results: Vec<_> = pool.install(|| loaded.par_iter().map(|s| run_one(s, &out)).collect());
            let mut ok = true;
            for r in results {
                match r {
                    Ok((passed, text)) => {
                        print!("{text}");
                        ok &= passed || !strict;
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        ok = false;
                    }
                }
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
