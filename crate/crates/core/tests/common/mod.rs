#![allow(dead_code)]

use collapse_lab::divergence::{ClassifierConfig, ClassifierGrid};
use collapse_lab::observability::{EtaConfig, ProbeSuite};
use collapse_lab::recursion::RunConfig;
use collapse_lab::{DiffusionSchedule, GaussianMixture};

/// Seconds-scale 2-d configuration.
pub fn tiny(alpha: f64) -> RunConfig {
    RunConfig {
        mixture: GaussianMixture::five_cluster(2).unwrap(),
        alpha,
        n_train: 300,
        n_generations: 3,
        n_seeds: 1,
        n_energy: 150,
        schedule: DiffusionSchedule {
            n_steps: 20,
            ..DiffusionSchedule::default()
        },
        classifier: ClassifierConfig {
            feature_dim: 32,
            ..ClassifierConfig::default()
        },
        classifier_grid: Some(ClassifierGrid {
            bandwidth_scales: vec![1.0, 0.5],
            ridges: vec![1e-3],
        }),
        eta: EtaConfig {
            feature_dim: 32,
            ..EtaConfig::default()
        },
        heatmap_horizon: 3,
        probe: ProbeSuite {
            n_paths: 300,
            ..ProbeSuite::default()
        },
        ..RunConfig::desk()
    }
}

/// `tiny` as a JSON override file for the binary.
pub fn tiny_json(alpha: f64) -> String {
    let cfg = tiny(alpha);
    serde_json::json!({
        "mixture": cfg.mixture,
        "alpha": alpha,
        "n_train": cfg.n_train,
        "n_generations": cfg.n_generations,
        "n_seeds": cfg.n_seeds,
        "n_energy": cfg.n_energy,
        "schedule": cfg.schedule,
        "classifier": cfg.classifier,
        "classifier_grid": cfg.classifier_grid,
        "eta": cfg.eta,
        "heatmap_horizon": cfg.heatmap_horizon,
        "probe": cfg.probe,
    })
    .to_string()
}
