//! How much of an injected score error is visible in the terminal samples, per
//! perturbation class, at matched error energy.

use collapse_lab::observability::{probe_suite, EtaConfig, ProbeSuite};
use collapse_lab::score::ScoreField;
use collapse_lab::sde::IntegratorConfig;
use collapse_lab::{DiffusionSchedule, GaussianMixture};

fn main() -> collapse_lab::Result<()> {
    let base = ScoreField::analytic(GaussianMixture::five_cluster(10)?);
    let integ = IntegratorConfig::from_schedule(&DiffusionSchedule {
        n_steps: 100,
        ..DiffusionSchedule::default()
    });
    let suite = ProbeSuite {
        n_paths: 2000,
        ..ProbeSuite::default()
    };
    println!("class          eps*^2     eta     se   R2");
    for seed in 0..2 {
        for r in probe_suite(&base, &suite, &EtaConfig::default(), &integ, seed)? {
            println!(
                "{:<13} {:>7.4} {:>7.4} {:>6.4} {:>5.2}",
                r.class, r.eps_star_sq.value, r.eta.eta, r.eta.se, r.eta.r_squared
            );
        }
    }
    Ok(())
}
