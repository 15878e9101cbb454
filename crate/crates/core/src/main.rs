use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use secest::config::{load_config, Overrides};
use secest::harness::{calibrate, emit_plots, run_scenario};
use secest::Error;

#[derive(Parser)]
#[command(name = "secest", version, about = "Multi-observer secure state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write trajectory, frame and isolation files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        /// Output directory. Falls back to the config, then SECEST_OUT_DIR, then ./out/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "SECEST_OUT_DIR", hide_env_values = true)]
        default_out: Option<PathBuf>,
    },
    /// Fit ISS gains by Monte-Carlo and write a new bundle.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        horizon: usize,
        /// Destination; defaults to <config stem>.calibrated.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load a config and report every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Turn run artifacts into plot-ready columns.
    Plots {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run {
            config,
            seed,
            horizon,
            window,
            out,
            default_out,
        } => {
            let cfg = load_config(&config)?.with_overrides(&Overrides {
                seed,
                horizon,
                window,
                out: out.as_ref().map(|p| p.display().to_string()),
            })?;
            let dir = cfg
                .doc
                .output
                .dir
                .as_ref()
                .map(PathBuf::from)
                .or(default_out)
                .unwrap_or_else(|| PathBuf::from("out").join(cfg.name()));
            let art = run_scenario(&cfg, &dir)?;
            let o = &art.outcome;
            let last = o.frames.last().expect("horizon >= 1");
            println!(
                "{}: {} steps, final |e| = {:.3e}, sigma = {}",
                cfg.name(),
                o.frames.len(),
                last.error.unwrap_or(f64::NAN),
                last.sigma
            );
            if let Some(rep) = &o.isolation {
                for w in &rep.windows {
                    let set = if w.isolated.is_empty() { "none".to_string() } else { w.isolated.to_string() };
                    println!(
                        "window {:>3} [{}, {}]: isolated {}{}",
                        w.index,
                        w.k_start,
                        w.k_end,
                        set,
                        if w.no_quorum { " (no quorum)" } else { "" }
                    );
                }
            }
            println!("artifacts in {}", art.dir.display());
            Ok(())
        }
        Command::Calibrate {
            config,
            trials,
            horizon,
            out,
        } => {
            let cfg = load_config(&config)?;
            let path = calibrate(&cfg, trials, horizon, out.as_deref())?;
            println!("calibrated bundle written to {}", path.display());
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!(
                "{}: n={}, p={}, q={}, {} observers",
                cfg.name(),
                cfg.plant.n,
                cfg.plant.p,
                cfg.bank.q,
                cfg.bank.observer_count()
            );
            for (key, c) in cfg.certificates()? {
                println!(
                    "  {key}: spectral radius {:.4} {}",
                    c.spectral_radius,
                    if c.passed { "ok" } else { "FAILED" }
                );
            }
            if let Some(s) = cfg.slope_certificate()? {
                println!("  slope condition: {}", if s.passed { "ok" } else { "FAILED" });
            }
            let missing = cfg.missing_iss();
            if cfg.doc.isolation.enabled && !missing.is_empty() {
                println!(
                    "  warning: isolation enabled but ISS gains missing for {} subsets; run calibrate",
                    missing.len()
                );
            }
            Ok(())
        }
        Command::Plots { input } => {
            for p in emit_plots(&input)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}
