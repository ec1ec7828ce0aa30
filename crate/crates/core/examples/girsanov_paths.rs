//! Paired ideal/learned paths under an injected score error: the Ito isometry
//! `Var(M) = E<M>` and the Girsanov normalisation `E[exp(M - <M>/2)] = 1`.

use collapse_lab::score::{ErrorField, Perturbation, ScoreField};
use collapse_lab::sde::{paired_girsanov_run, IntegratorConfig};
use collapse_lab::{DiffusionSchedule, GaussianMixture, Stream};

fn main() -> collapse_lab::Result<()> {
    let gmm = GaussianMixture::five_cluster(10)?;
    let integ = IntegratorConfig::from_schedule(&DiffusionSchedule {
        n_steps: 200,
        ..DiffusionSchedule::default()
    });
    let stream = Stream::new(3);
    let w = Perturbation::random_linear(gmm.dim(), 0.1, &mut stream.child("w").rng());
    let err = ErrorField::injected(ScoreField::analytic(gmm), w)?;
    let batch = paired_girsanov_run(&err, &integ, 5000, &stream.child("paths"))?;

    let var_m = batch.martingale_variance();
    let qv = batch.quad_var_estimate();
    let z = batch.girsanov_normalization();
    println!("Var(M)            {:.5} +- {:.5}", var_m.value, var_m.se);
    println!("mean <M>          {:.5} +- {:.5}", qv.value, qv.se);
    println!("relative gap      {:.3}", (var_m.value - qv.value).abs() / qv.value);
    println!("E[exp(Z_T)]       {:.5} +- {:.5}", z.value, z.se);
    println!("energy eps*^2     {:.5}", batch.energy_estimate().value);
    Ok(())
}
