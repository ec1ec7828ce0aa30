//! Density and score of the five-cluster mixture under forward noising,
//! with a central-difference check of the score.

use collapse_lab::{GaussianMixture, Stream};

fn main() -> collapse_lab::Result<()> {
    let gmm = GaussianMixture::five_cluster(10)?;
    println!("{} components in d = {}, sigma = {}", gmm.n_components(), gmm.dim(), gmm.sigma());

    let mut rng = Stream::new(7).rng();
    let xs = gmm.sample(5, &mut rng);
    for t in [0.02, 0.5, 2.0] {
        for x in xs.rows() {
            let s = gmm.analytic_score(x, t)?;
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for j in 0..x.len() {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[j] += h;
                dn[j] -= h;
                let fd = (gmm.log_density_at(&up, t) - gmm.log_density_at(&dn, t)) / (2.0 * h);
                worst = worst.max((fd - s[j]).abs() / s[j].abs().max(1.0));
            }
            println!("t = {t:<4} log q_t = {:>9.4}  max rel fd error {worst:.2e}", gmm.log_density_at(x, t));
        }
    }
    Ok(())
}
