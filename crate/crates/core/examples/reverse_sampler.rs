//! Reverse-time Euler-Maruyama sampling with the exact mixture score, compared
//! with direct draws from the mixture.

use collapse_lab::sde::{reverse_sample, IntegratorConfig};
use collapse_lab::score::ScoreField;
use collapse_lab::{DiffusionSchedule, GaussianMixture, Stream};

fn main() -> collapse_lab::Result<()> {
    let gmm = GaussianMixture::five_cluster(10)?;
    let integ = IntegratorConfig::from_schedule(&DiffusionSchedule {
        n_steps: 200,
        ..DiffusionSchedule::default()
    });
    let field = ScoreField::analytic(gmm.clone());
    let batch = reverse_sample(&field, &integ, 4000, &Stream::new(1))?;
    let direct = gmm.sample(4000, &mut Stream::new(2).rng());

    let mut counts = vec![[0usize; 2]; gmm.n_components()];
    for x in batch.states.rows() {
        counts[gmm.nearest_component(x)][0] += 1;
    }
    for x in direct.rows() {
        counts[gmm.nearest_component(x)][1] += 1;
    }
    println!("component  sampler  direct");
    for (c, [a, b]) in counts.iter().enumerate() {
        println!("{c:>9}  {a:>7}  {b:>6}");
    }
    let var = |s: &collapse_lab::Samples| {
        let d = s.dim();
        (0..d).map(|j| s.covariance()[j * d + j]).sum::<f64>() / d as f64
    };
    println!("mean per-axis variance: sampler {:.4}, direct {:.4}", var(&batch.states), var(&direct));
    Ok(())
}
