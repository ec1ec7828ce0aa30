//! Divergence estimators on two shifted Gaussians, where chi-square and KL are
//! known in closed form.

use collapse_lab::divergence::{
    chi2_exact_ratio, classifier_divergences, gaussian_chi2_shift, gaussian_kl_shift, kl_exact_ratio, ClassifierConfig,
};
use collapse_lab::{GaussianMixture, Stream};

fn main() -> collapse_lab::Result<()> {
    let d = 4;
    let s = 1.0;
    let m1 = vec![0.4, 0.0, 0.0, 0.0];
    let m2 = vec![0.0; d];
    let p = GaussianMixture::uniform(vec![m1.clone()], s)?;
    let q = GaussianMixture::uniform(vec![m2.clone()], s)?;
    let stream = Stream::new(3);
    let xp = p.sample(20_000, &mut stream.child("p").rng());
    let xq = q.sample(20_000, &mut stream.child("q").rng());

    let lp = |x: &[f64]| p.log_density_at(x, 0.0);
    let lq = |x: &[f64]| q.log_density_at(x, 0.0);
    let chi = chi2_exact_ratio(lp, lq, &xq)?;
    let kl = kl_exact_ratio(lp, lq, &xp)?;
    let clf = classifier_divergences(&xp.head(4000), &xq.head(4000), &ClassifierConfig::default(), &stream.child("clf"))?;

    println!("              closed form   exact ratio        classifier");
    println!(
        "chi2(p||q)    {:>11.4}   {:.4} +- {:.4}   {:.4} +- {:.4}",
        gaussian_chi2_shift(&m1, &m2, s * s),
        chi.value,
        chi.std_error,
        clf.chi2.value,
        clf.chi2.std_error
    );
    println!(
        "KL(p||q)      {:>11.4}   {:.4} +- {:.4}   {:.4} +- {:.4}",
        gaussian_kl_shift(&m1, &m2, s * s),
        kl.value,
        kl.std_error,
        clf.kl.value,
        clf.kl.std_error
    );
    println!("classifier held-out log-loss {:.4} (ln 2 = {:.4})", clf.heldout_log_loss, 2f64.ln());
    Ok(())
}
