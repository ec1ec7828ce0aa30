//! Runs a short recursion and checks every divergence bound against its ledger.

use collapse_lab::bounds::{discounted_sum, verify_all, DEFAULT_BURN_IN};
use collapse_lab::ledger::LedgerRow;
use collapse_lab::recursion::{run_recursion, RunConfig};
use collapse_lab::DiffusionSchedule;

fn main() -> collapse_lab::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.alpha = 0.5;
    cfg.n_train = 1000;
    cfg.n_generations = 6;
    cfg.n_seeds = 1;
    cfg.n_energy = 500;
    cfg.schedule = DiffusionSchedule {
        n_steps: 100,
        ..DiffusionSchedule::default()
    };
    let rows: Vec<LedgerRow> = run_recursion(&cfg)?
        .iter()
        .flat_map(|r| r.records.iter().map(LedgerRow::from))
        .collect();

    for report in verify_all(&rows, DEFAULT_BURN_IN) {
        println!("{:<13} pass {:>3} fail {:>3}", report.name, report.summary.n_pass, report.summary.n_fail);
        for row in report.failing() {
            println!("    {} gen {}: {:.4} vs {:.4} (tol {:.4})", row.bound, row.generation, row.lhs, row.rhs, row.tolerance);
        }
        if let Some(f) = report.fit {
            println!("    fit slope {:.3} intercept {:.3} R2 {:.3}", f.slope, f.intercept, f.r_squared);
        }
    }

    let eps: Vec<f64> = rows.iter().map(|r| r.eps_star_sq).collect();
    println!("discounted sums S_N: {:.3?}", discounted_sum(&eps, cfg.alpha));
    Ok(())
}
