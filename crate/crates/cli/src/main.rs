use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use hugbell::config::RunConfig;
use hugbell::experiment::{run_experiment, runs_root};
use hugbell::lhv::{deterministic_bound_check_with, run_lhv_with, strategy_by_name};
use hugbell::lockbox::{run_lock, write_trace_csv};
use hugbell::oracle::run_check;
use hugbell::qmodel::{PhaseConvention, SettingsQuad};
use hugbell::report::report;
use hugbell::topology::Geometry;
use hugbell::{Error, Execution};

/// Energy-time Bell test simulator for the Franson and hug geometries.
#[derive(Parser)]
#[command(name = "hugbell", version)]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and analyze a configured experiment into a run directory.
    Run {
        config: PathBuf,
        /// Run directory; defaults to `$HUGBELL_RUNS/<name>-<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 3 unless S exceeds 2 by this many standard
        /// errors.
        #[arg(long, value_name = "SIGMAS")]
        expect_violation: Option<f64>,
    },
    /// Summarize a run directory and write its CSV exports.
    Report { dir: PathBuf },
    /// Monte Carlo of a local hidden-variable strategy.
    Lhv {
        /// faking, coin, constant, random:<seed> or random-adaptive:<seed>.
        strategy: String,
        geometry: Geometry,
        n: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_parser = parse_convention, default_value = "difference")]
        convention: PhaseConvention,
        /// Also search all deterministic strategies for the largest S.
        #[arg(long)]
        bound: bool,
    },
    /// Run the phase-lock loop from a config's `[lock]` section.
    LockDemo {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the residual phase trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a reference self-check (or `all`).
    Oracle { check: String },
}

fn parse_convention(s: &str) -> Result<PhaseConvention, String> {
    match s {
        "difference" => Ok(PhaseConvention::Difference),
        "sum" => Ok(PhaseConvention::Sum),
        _ => Err(format!("`{s}` is not difference or sum")),
    }
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Run { config, out, expect_violation } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| runs_root().join(format!("{}-{}", cfg.name, cfg.seed)));
            let results = run_experiment(&cfg, &dir, exec)?;
            let b = results.chsh.bell;
            println!("run directory: {}", dir.display());
            println!("S = {:.4} ± {:.4} ({:.3} σ above 2, raw)", b.s_hat, b.std_err, b.sigmas_above_2);
            if let Some(f) = results.chsh.bell_full {
                println!("S without discarding = {:.4} ± {:.4}", f.s_hat, f.std_err);
            }
            if let Some(k) = expect_violation {
                if !(b.sigmas_above_2 > k) {
                    println!("[FAIL] violation below {k} σ");
                    return Ok(ExitCode::from(3));
                }
                println!("[PASS] violation above {k} σ");
            }
        }
        Command::Report { dir } => print!("{}", report(&dir)?),
        Command::Lhv { strategy, geometry, n, seed, convention, bound } => {
            let s = strategy_by_name(&strategy, convention)?;
            let quad = SettingsQuad::canonical(convention);
            let r = run_lhv_with(geometry, &s, &quad, n, seed, exec)?;
            println!("strategy {} in {} geometry, {} pairs", r.strategy, r.geometry, r.n_pairs);
            println!("selection rate {:.5}", r.selection_rate);
            let (p, f) = (r.s_postselected, r.s_full);
            println!("S post-selected = {:.4} ± {:.4} ({:.3} σ above 2)", p.s_hat, p.std_err, p.sigmas_above_2);
            println!("S full sample   = {:.4} ± {:.4} ({:.3} σ above 2)", f.s_hat, f.std_err, f.sigmas_above_2);
            if bound {
                let b = deterministic_bound_check_with(geometry, exec);
                println!(
                    "deterministic search: max S = {:.6} over {} patterns and {} mixtures",
                    b.max_s, b.cell_patterns, b.mixtures_evaluated
                );
            }
        }
        Command::LockDemo { config, seed, trace } => {
            let cfg = RunConfig::load(&config)?;
            let settings = cfg.lock.settings()?;
            let (r, tr) = run_lock(&settings, seed.unwrap_or(cfg.seed))?;
            println!("locked: {}", r.locked);
            println!("residual rms: {:.5} rad (free drift {:.3} rad)", r.residual_rms, r.unlocked_rms);
            match r.lock_acquisition_time {
                Some(t) => println!("acquired after {:.3} ms", t * 1e3),
                None => println!("never acquired"),
            }
            println!("actuator saturated on {:.2}% of samples", 100.0 * r.saturated_fraction);
            if let Some(d) = r.diagnostic {
                println!("diagnostic: {d}");
            }
            if let Some(path) = trace {
                write_trace_csv(&path, &tr).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Oracle { check } => {
            let outcomes = run_check(&check, exec)?;
            let mut ok = true;
            for o in &outcomes {
                println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                ok &= o.passed;
            }
            if !ok {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(err) if err.is_validation() => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
