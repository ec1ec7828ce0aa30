//! A short recursive self-training run on a small mixture, one ledger row per
//! generation.

use collapse_lab::ledger::{write_ledger, LedgerRow};
use collapse_lab::recursion::{run_recursion, RunConfig};
use collapse_lab::DiffusionSchedule;

fn main() -> collapse_lab::Result<()> {
    let cfg = small_config(0.5);
    let runs = run_recursion(&cfg)?;
    let rows: Vec<LedgerRow> = runs.iter().flat_map(|r| r.records.iter().map(LedgerRow::from)).collect();
    println!("gen  eps*^2   eps^^2    eta     I_kl    D_chi2");
    for r in &rows {
        println!(
            "{:>3} {:>7.4} {:>8.4} {:>6.3} {:>8.4} {:>9.4}",
            r.generation, r.eps_star_sq, r.eps_hat_sq, r.eta, r.i_kl, r.d_chi2
        );
    }
    write_ledger(std::io::stdout().lock(), &rows)
}

fn small_config(alpha: f64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.alpha = alpha;
    cfg.n_train = 1000;
    cfg.n_generations = 4;
    cfg.n_seeds = 1;
    cfg.n_energy = 500;
    cfg.schedule = DiffusionSchedule {
        n_steps: 100,
        ..DiffusionSchedule::default()
    };
    cfg
}
