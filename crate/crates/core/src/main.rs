use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvs_core::runner::{self, RunConfig};

#[derive(Parser)]
#[command(name = "cvs-mhd", version, about = "Current-vortex sheet laboratory")]
struct Cli {
    /// Flat `key = value` configuration; defaults to the perturbed-2d scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in scenario used when no config file is given.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Output directory (overrides `output.directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `perturbation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Algebraic, structural and bookkeeping invariants.
    Check,
    /// Manufactured-solution refinement and energy studies.
    Linear,
    /// Full smoothed Newton iteration.
    Iterate,
    /// Fit exponents from existing metrics files.
    Report {
        /// metrics.csv files; defaults to `<out>/metrics.csv`.
        inputs: Vec<PathBuf>,
    },
}

fn load(cli: &Cli) -> cvs_core::Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.scenario) {
        (Some(p), _) => RunConfig::from_file(p)?,
        (None, Some(s)) => RunConfig::scenario(s)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.perturbation.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> cvs_core::Result<bool> {
    let cfg = load(cli)?;
    let out = cfg.output.directory.clone();
    match &cli.command {
        Command::Check => {
            let checks = runner::cmd_check(&cfg, false)?;
            for c in checks.iter().filter(|c| !c.passed) {
                eprintln!("failed: {} ({})", c.name, c.id);
            }
            Ok(runner::all_passed(&checks))
        }
        Command::Linear => {
            let r = runner::cmd_linear(&cfg, Some(&out), false)?;
            if !cli.quiet {
                for f in &r.files {
                    eprintln!("wrote {}", f.display());
                }
            }
            Ok(runner::all_passed(&r.checks))
        }
        Command::Iterate => {
            let r = runner::cmd_iterate(&cfg, Some(&out), cli.quiet)?;
            let rep = &r.run.report;
            println!(
                "steps {}  residual ratio {:.3e}  converged {}  increment slope {}  ({:.1}s)",
                r.records.len(),
                rep.residual_ratio,
                rep.converged,
                rep.increment_fit
                    .as_ref()
                    .map_or("n/a".to_string(), |f| format!("{:.3}", f.slope)),
                r.seconds
            );
            if let Some(why) = &rep.aborted {
                println!("aborted: {why}");
            }
            if !cli.quiet {
                for f in &r.files {
                    eprintln!("wrote {}", f.display());
                }
            }
            Ok(rep.converged)
        }
        Command::Report { inputs } => {
            let inputs = if inputs.is_empty() {
                vec![out.join("metrics.csv")]
            } else {
                inputs.clone()
            };
            let fits = runner::cmd_report(&inputs, &cfg, Some(&out))?;
            for (p, rows) in fits {
                println!("{}", p.display());
                for f in rows {
                    println!(
                        "  {:<18} s={:<2} slope {:>9.4}  reference {:>6.2}  ({} pts)",
                        f.quantity, f.s, f.slope, f.reference, f.points
                    );
                }
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("CVS_MHD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
