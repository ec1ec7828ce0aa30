use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use collapse_lab::app::{self, Profile};
use collapse_lab::bounds::DEFAULT_BURN_IN;
use collapse_lab::recursion::RunConfig;
use collapse_lab::LabError;

#[derive(Parser)]
#[command(name = "collapse-lab", version, about = "Recursive diffusion self-training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Args)]
struct Common {
    /// JSON file overriding the profile's settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
}

#[derive(Subcommand)]
enum Command {
    /// Run the recursion and write the ledger, sample stores and manifest.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip writing sample stores.
        #[arg(long)]
        no_stores: bool,
    },
    /// Check every bound against a ledger; exits 1 if any row fails.
    Verify {
        /// Ledger CSV; defaults to `<out>/ledger.csv`.
        ledger: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BURN_IN)]
        burn_in: usize,
    },
    /// Ablation heatmaps of generation contributions.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Horizon; defaults to the config's `heatmap_horizon`.
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Observability of injected perturbation classes.
    Probe {
        #[command(flatten)]
        common: Common,
    },
    /// Plots and a summary for the ledger in `--out`.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BURN_IN)]
        burn_in: usize,
    },
}

fn setup(c: &Common) -> Result<RunConfig, LabError> {
    let profile = match c.profile {
        ProfileArg::Paper => Profile::Paper,
        ProfileArg::Desk => Profile::Desk,
    };
    let cfg = app::load_config(c.config.as_deref(), profile, c.seed)?;
    let env = std::env::var(app::THREADS_ENV).ok();
    let n = app::thread_count(&cfg, env.as_deref())?;
    // Fails only if a pool already exists, which cannot happen here.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, LabError> {
    match cli.command {
        Command::Run { common, no_stores } => {
            let cfg = setup(&common)?;
            let a = app::cmd_run(&cfg, &common.out, !no_stores)?;
            println!("{} ledger rows -> {}", a.rows.len(), a.ledger.display());
            Ok(true)
        }
        Command::Verify { ledger, out, burn_in } => {
            let ledger = ledger.unwrap_or_else(|| out.join(app::LEDGER_FILE));
            let v = app::cmd_verify(&ledger, &out, burn_in)?;
            for r in &v.reports {
                println!("{:<13} pass {:>4}  fail {:>4}", r.name, r.summary.n_pass, r.summary.n_fail);
                for row in r.failing() {
                    println!(
                        "  FAIL {} seed {} gen {}: lhs {:.5} (se {:.5}) vs rhs {:.5} (se {:.5})",
                        row.bound, row.seed, row.generation, row.lhs, row.lhs_se, row.rhs, row.rhs_se
                    );
                }
                if let Some(f) = r.fit {
                    println!("  descriptive fit: slope {:.4} intercept {:.4} R2 {:.3}", f.slope, f.intercept, f.r_squared);
                }
            }
            Ok(v.passed)
        }
        Command::Heatmap { common, generations } => {
            let cfg = setup(&common)?;
            let horizon = generations.unwrap_or(cfg.heatmap_horizon);
            let h = app::cmd_heatmap(&cfg, &common.out, horizon)?;
            if let Some((l1, l3)) = h.lag1_over_lag3 {
                println!("mean |contrib| lag 1 {l1:.4e}, lag 3 {l3:.4e}");
            }
            if let Some(s) = h.decay_slope {
                println!("decay slope {s:.3} (reference {:.3})", 2.0 * (1.0 - cfg.alpha).ln());
            }
            Ok(true)
        }
        Command::Probe { common } => {
            let cfg = setup(&common)?;
            let rows = app::cmd_probe(&cfg, &common.out)?;
            for (class, eta, se) in app::probe_means(&rows) {
                println!("{class:<13} eta {eta:.4} (se {se:.4})");
            }
            Ok(true)
        }
        Command::Report { out, burn_in } => {
            let p = app::cmd_report(&out, burn_in)?;
            println!("{}", p.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(app::exit_code(&e) as u8)
        }
    }
}
