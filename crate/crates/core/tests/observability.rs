//! `eta` against a linear-Gaussian reference and under rescaling.

use collapse_lab::observability::{estimate_eta_from, probe_suite, EtaConfig, ProbeSuite};
use collapse_lab::score::ScoreField;
use collapse_lab::sde::IntegratorConfig;
use collapse_lab::{DiffusionSchedule, GaussianMixture, Samples, Stream};
use rand_distr::{Distribution, StandardNormal};

/// `M = a.X + sigma Z` with `X ~ N(0, I)`: `eta = |a|^2 / (|a|^2 + sigma^2)`.
fn linear_gaussian(a: &[f64], sigma: f64, n: usize, seed: u64) -> (Samples, Vec<f64>) {
    let mut rng = Stream::new(seed).rng();
    let d = a.len();
    let mut x = Vec::with_capacity(n * d);
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        let mut dot = 0.0;
        for aj in a {
            let v: f64 = StandardNormal.sample(&mut rng);
            dot += aj * v;
            x.push(v);
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        m.push(dot + sigma * z);
    }
    (Samples::new(d, x).unwrap(), m)
}

#[test]
fn linear_gaussian_eta_is_recovered() {
    for (a, sigma) in [(vec![1.0, 0.0], 1.0), (vec![0.6, -0.8, 0.0], 0.5), (vec![0.3, 0.3], 1.5)] {
        let norm: f64 = a.iter().map(|v| v * v).sum();
        let truth = norm / (norm + sigma * sigma);
        let (x, m) = linear_gaussian(&a, sigma, 4000, 5);
        let e = estimate_eta_from(&x, &m, &EtaConfig::default(), &Stream::new(6)).unwrap();
        assert!(
            (e.eta - truth).abs() <= 0.05 + 3.0 * e.se,
            "a {a:?} sigma {sigma}: eta {} +- {} vs {truth}",
            e.eta,
            e.se
        );
    }
}

#[test]
fn pure_noise_has_small_eta() {
    let (x, m) = linear_gaussian(&[0.0, 0.0, 0.0], 1.0, 3000, 9);
    let e = estimate_eta_from(&x, &m, &EtaConfig::default(), &Stream::new(1)).unwrap();
    assert!(e.eta <= 0.02, "eta {}", e.eta);
}

#[test]
fn eta_is_invariant_to_rescaling_the_martingale() {
    let (x, m) = linear_gaussian(&[0.5, 0.5], 1.0, 2000, 2);
    let cfg = EtaConfig::default();
    let base = estimate_eta_from(&x, &m, &cfg, &Stream::new(3)).unwrap();
    for c in [1e-3, 0.5, 7.0, -2.0] {
        let scaled: Vec<f64> = m.iter().map(|v| c * v).collect();
        let e = estimate_eta_from(&x, &scaled, &cfg, &Stream::new(3)).unwrap();
        assert!((e.raw - base.raw).abs() <= 1e-9, "c {c}: {} vs {}", e.raw, base.raw);
        assert_eq!(e.bandwidth_scale, base.bandwidth_scale);
        assert_eq!(e.ridge, base.ridge);
    }
}

#[test]
fn constant_martingale_gives_exact_zero() {
    let (x, _) = linear_gaussian(&[1.0], 1.0, 500, 4);
    let e = estimate_eta_from(&x, &vec![0.25; 500], &EtaConfig::default(), &Stream::new(0)).unwrap();
    assert_eq!(e.eta, 0.0);
    assert_eq!(e.se, 0.0);
}

#[test]
fn probe_classes_are_observable_and_the_control_is_not() {
    let base = ScoreField::analytic(GaussianMixture::five_cluster(3).unwrap());
    let integ = IntegratorConfig::from_schedule(&DiffusionSchedule {
        n_steps: 40,
        ..DiffusionSchedule::default()
    });
    let suite = ProbeSuite {
        n_paths: 1500,
        ..ProbeSuite::default()
    };
    let rows = probe_suite(&base, &suite, &EtaConfig::default(), &integ, 12).unwrap();
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.eta.eta), "{} eta {}", r.class, r.eta.eta);
        match r.class.as_str() {
            "zero_control" => {
                assert_eq!(r.eta.eta, 0.0);
                assert_eq!(r.eps_star_sq.value, 0.0);
            }
            _ => {
                let target = suite.target_energy.unwrap();
                assert!((r.eps_star_sq.value - target).abs() <= suite.energy_tolerance * target);
            }
        }
        if r.class == "random" {
            assert!(r.eta.eta > 3.0 * r.eta.se, "W != 0 should be visible: {} +- {}", r.eta.eta, r.eta.se);
        }
    }
}
