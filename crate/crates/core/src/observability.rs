//! Observability of score errors: how much of the martingale `M` the terminal
//! state explains, `eta = Var(E[M | Y_t0]) / Var(M)`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::features::{ridge_path, FourierFeatures};
use crate::rng::Stream;
use crate::samples::Samples;
use crate::score::{ErrorField, Perturbation, ScoreField};
use crate::sde::{paired_girsanov_run, IntegratorConfig, TrajectoryBatch};
use crate::stats::{mean, Estimate};

/// `Var(M)` below this is treated as zero error.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// The regressor's bandwidth multiple and ridge are picked from the grids by
/// out-of-fold squared error; singleton grids fix them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaConfig {
    pub feature_dim: usize,
    pub ridges: Vec<f64>,
    pub folds: usize,
    /// Kernel bandwidths as multiples of the median pairwise distance.
    pub bandwidth_scales: Vec<f64>,
}

impl Default for EtaConfig {
    fn default() -> Self {
        EtaConfig {
            feature_dim: 512,
            ridges: vec![1e-3, 1e-4, 1e-5],
            folds: 5,
            bandwidth_scales: vec![1.0, 0.5, 0.25],
        }
    }
}

impl EtaConfig {
    /// No selection: one bandwidth multiple, one ridge.
    pub fn fixed(bandwidth_scale: f64, ridge: f64) -> Self {
        EtaConfig {
            ridges: vec![ridge],
            bandwidth_scales: vec![bandwidth_scale],
            ..EtaConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(LabError::config("eta.feature_dim", "must be >= 1"));
        }
        if self.ridges.is_empty() || self.ridges.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(LabError::config("eta.ridges", "must be a non-empty list of positive values"));
        }
        if self.folds < 2 {
            return Err(LabError::config("eta.folds", "must be >= 2"));
        }
        if self.bandwidth_scales.is_empty() || self.bandwidth_scales.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(LabError::config("eta.bandwidth_scales", "must be a non-empty list of positive values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaEstimate {
    /// Clamped to `[0, 1]`.
    pub eta: f64,
    pub se: f64,
    /// Ratio before clamping.
    pub raw: f64,
    pub var_m: f64,
    pub var_prediction: f64,
    /// Out-of-fold `1 - MSE / Var(M)` of the selected regressor.
    pub r_squared: f64,
    pub feature_dim: usize,
    pub bandwidth_scale: f64,
    pub ridge: f64,
    pub n_paths: usize,
}

impl EtaEstimate {
    pub fn zero(n_paths: usize, cfg: &EtaConfig) -> Self {
        EtaEstimate {
            eta: 0.0,
            se: 0.0,
            raw: 0.0,
            var_m: 0.0,
            var_prediction: 0.0,
            r_squared: 0.0,
            feature_dim: cfg.feature_dim,
            bandwidth_scale: cfg.bandwidth_scales[0],
            ridge: cfg.ridges[0],
            n_paths,
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.eta, self.se)
    }
}

/// Cross-fitted ridge regression of `m` on Fourier features of `states`;
/// returns `Var(out-of-fold predictions) / Var(m)` for the grid point with
/// the smallest out-of-fold error.
pub fn estimate_eta_from(states: &Samples, m: &[f64], cfg: &EtaConfig, stream: &Stream) -> Result<EtaEstimate> {
    cfg.validate()?;
    let n = m.len();
    if states.len() != n {
        return Err(LabError::DimensionMismatch {
            expected: n,
            got: states.len(),
        });
    }
    if n < 100 {
        return Err(LabError::config("n_paths", format!("eta needs at least 100 paths, got {n}")));
    }
    let m_bar = mean(m);
    let var_m = m.iter().map(|v| (v - m_bar).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var_m < ZERO_VARIANCE {
        return Ok(EtaEstimate::zero(n, cfg));
    }
    let fold: Vec<usize> = {
        use rand::seq::SliceRandom;
        let mut f: Vec<usize> = (0..n).map(|i| i % cfg.folds).collect();
        f.shuffle(&mut stream.child("folds").rng());
        f
    };
    // (mse, bandwidth scale, ridge, predictions)
    let mut best: Option<(f64, f64, f64, Vec<f64>)> = None;
    for &scale in &cfg.bandwidth_scales {
        // Same random directions for every multiple; only the length scale changes.
        let features = FourierFeatures::fit(states, cfg.feature_dim, scale, &stream.child("features"))?;
        let x = features.design(states, false);
        let mut preds = vec![vec![0.0; n]; cfg.ridges.len()];
        for k in 0..cfg.folds {
            let train: Vec<usize> = (0..n).filter(|i| fold[*i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|i| fold[*i] == k).collect();
            let mt: Vec<f64> = train.iter().map(|i| m[*i]).collect();
            let (betas, col_mean, y_mean) = ridge_path(&x.select_rows(&train), &mt, &cfg.ridges)?;
            let xh = x.select_rows(&test);
            for (pred, beta) in preds.iter_mut().zip(&betas) {
                let offset = y_mean - col_mean.dot(beta);
                let p = &xh * beta;
                for (i, pi) in test.iter().zip(p.iter()) {
                    pred[*i] = offset + pi;
                }
            }
        }
        for (pred, &ridge) in preds.into_iter().zip(&cfg.ridges) {
            let mse = pred.iter().zip(m).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n as f64;
            if best.as_ref().is_none_or(|(b, ..)| mse < *b) {
                best = Some((mse, scale, ridge, pred));
            }
        }
    }
    let (mse, bandwidth_scale, ridge, pred) = best.expect("grids are non-empty");
    let p_bar = mean(&pred);
    let var_p = pred.iter().map(|v| (v - p_bar).powi(2)).sum::<f64>() / (n - 1) as f64;
    let raw = var_p / var_m;
    // Influence function of a ratio of variances.
    let psi: Vec<f64> = pred
        .iter()
        .zip(m)
        .map(|(p, mi)| ((p - p_bar).powi(2) - raw * (mi - m_bar).powi(2)) / var_m)
        .collect();
    let psi_bar = mean(&psi);
    let se = (psi.iter().map(|v| (v - psi_bar).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
    Ok(EtaEstimate {
        eta: raw.clamp(0.0, 1.0),
        se,
        raw,
        var_m,
        var_prediction: var_p,
        r_squared: 1.0 - mse / var_m,
        feature_dim: cfg.feature_dim,
        bandwidth_scale,
        ridge,
        n_paths: n,
    })
}

/// `eta` from the tracked paths of a batch.
pub fn estimate_eta(batch: &TrajectoryBatch, cfg: &EtaConfig, stream: &Stream) -> Result<EtaEstimate> {
    if batch.martingale.is_empty() {
        return Err(LabError::Empty("batch carries no martingale"));
    }
    estimate_eta_from(&batch.tracked_states(), &batch.martingale, cfg, stream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_paths: usize,
    /// Common `eps*^2` every class is scaled to; `None` keeps the given magnitudes.
    pub target_energy: Option<f64>,
    /// Allowed relative mismatch of the matched energies.
    pub energy_tolerance: f64,
    pub eta: EtaConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_paths: 4000,
            target_energy: Some(0.25),
            energy_tolerance: 0.05,
            eta: EtaConfig::default(),
        }
    }
}

/// The perturbation classes a probe run compares, before energy matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSuite {
    pub n_paths: usize,
    pub target_energy: Option<f64>,
    pub energy_tolerance: f64,
    pub aligned_scale: f64,
    /// Operator-norm scale of the random linear map.
    pub random_scale: f64,
    pub time_amplitude: f64,
    pub time_frequency: f64,
    /// Adds a zero-magnitude class whose `eta` must be exactly 0.
    pub zero_control: bool,
}

impl Default for ProbeSuite {
    fn default() -> Self {
        ProbeSuite {
            n_paths: 4000,
            target_energy: Some(0.25),
            energy_tolerance: 0.05,
            aligned_scale: 0.1,
            random_scale: 0.1,
            time_amplitude: 0.1,
            time_frequency: 2.0,
            zero_control: true,
        }
    }
}

impl ProbeSuite {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 100 {
            return Err(LabError::config("probe.n_paths", "must be >= 100"));
        }
        if let Some(t) = self.target_energy {
            if !(t > 0.0 && t.is_finite()) {
                return Err(LabError::config("probe.target_energy", "must be positive"));
            }
        }
        if self.energy_tolerance.is_nan() || self.energy_tolerance <= 0.0 {
            return Err(LabError::config("probe.energy_tolerance", "must be positive"));
        }
        Ok(())
    }

    /// Aligned, random linear and time-only classes; the random map is drawn from `stream`.
    pub fn classes(&self, dim: usize, stream: &Stream) -> Vec<Perturbation> {
        vec![
            Perturbation::AlignedLinear {
                scale: self.aligned_scale,
            },
            Perturbation::random_linear(dim, self.random_scale, &mut stream.rng()),
            Perturbation::TimeOnly {
                amplitude: self.time_amplitude,
                frequency: self.time_frequency,
            },
        ]
    }

    pub fn probe_config(&self, eta: &EtaConfig) -> ProbeConfig {
        ProbeConfig {
            n_paths: self.n_paths,
            target_energy: self.target_energy,
            energy_tolerance: self.energy_tolerance,
            eta: eta.clone(),
        }
    }
}

/// Probe rows for one seed: every class of `suite`, then the zero control if enabled.
pub fn probe_suite(base: &ScoreField, suite: &ProbeSuite, eta: &EtaConfig, integ: &IntegratorConfig, seed: u64) -> Result<Vec<ProbeRow>> {
    suite.validate()?;
    let classes = suite.classes(base.dim(), &Stream::new(seed).child("probe_classes"));
    let cfg = suite.probe_config(eta);
    let mut rows = perturbation_probe(base, &classes, integ, &cfg, seed)?;
    if suite.zero_control {
        let zero = ProbeConfig {
            target_energy: None,
            ..cfg
        };
        let mut z = perturbation_probe(base, &[Perturbation::AlignedLinear { scale: 0.0 }], integ, &zero, seed)?;
        z[0].class = "zero_control".into();
        rows.append(&mut z);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub class: String,
    /// Multiplier applied to the given perturbation.
    pub scale: f64,
    pub eps_star_sq: Estimate,
    pub eta: EtaEstimate,
    pub seed: u64,
}

/// Runs each perturbation class along the `base` drift and estimates its `eta`.
///
/// Along the target drift the paths do not depend on the perturbation, so with
/// common noise `eps*^2` is exactly quadratic in the class magnitude. A pilot
/// run at the given magnitude fixes the factor that hits the target energy;
/// the rescaled run is checked against the tolerance.
pub fn perturbation_probe(
    base: &ScoreField,
    classes: &[Perturbation],
    integ: &IntegratorConfig,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    if classes.is_empty() {
        return Err(LabError::Empty("probe classes"));
    }
    let root = Stream::new(seed).child("probe");
    let mut rows = Vec::with_capacity(classes.len());
    for (c, class) in classes.iter().enumerate() {
        let paths = root.child("paths");
        let err = ErrorField::injected(base.clone(), class.clone())?;
        let mut batch = paired_girsanov_run(&err, integ, cfg.n_paths, &paths)?;
        let mut scale = 1.0;
        let pilot = batch.energy_estimate().value;
        if let Some(target) = cfg.target_energy {
            if pilot > 0.0 {
                scale = (target / pilot).sqrt();
                let err = ErrorField::injected(base.clone(), class.scaled(scale))?;
                batch = paired_girsanov_run(&err, integ, cfg.n_paths, &paths)?;
                let got = batch.energy_estimate().value;
                if (got - target).abs() > cfg.energy_tolerance * target {
                    return Err(LabError::config(
                        "probe.target_energy",
                        format!("class {} reached {got}, wanted {target}", class.class_name()),
                    ));
                }
            }
        }
        let eta = estimate_eta(&batch, &cfg.eta, &root.index(c as u64))?;
        rows.push(ProbeRow {
            class: class.class_name().to_string(),
            scale,
            eps_star_sq: batch.energy_estimate(),
            eta,
            seed,
        });
    }
    Ok(rows)
}
