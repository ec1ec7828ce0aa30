//! Isotropic Gaussian mixtures and their Ornstein-Uhlenbeck marginals.
//!
//! The forward process is the variance-preserving OU diffusion
//! `dX = -X/2 dt + dB`, so a point mass at `x` becomes `N(a_t x, (1 - a_t^2) I)`
//! with `a_t = exp(-t/2)`. A mixture with shared isotropic scale therefore stays
//! a mixture with shared isotropic scale at every time.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::samples::Samples;

/// `a_t = exp(-t/2)`.
#[inline]
pub fn decay(t: f64) -> f64 {
    (-0.5 * t).exp()
}

/// Variance at time `t` of an isotropic component whose time-0 variance is `var0`.
#[inline]
pub fn diffused_variance(var0: f64, t: f64) -> f64 {
    let a2 = (-t).exp();
    a2 * var0 + (1.0 - a2)
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(LabError::InvalidTime(t))
    }
}

/// Numerically stable `log(sum(exp(v)))`; `-inf` for an empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Time horizon, truncation and grid of the reverse sampler, plus the KDE bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_max: f64,
    pub t_min: f64,
    pub n_steps: usize,
    pub bandwidth: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            t_max: 4.0,
            t_min: 0.02,
            n_steps: 500,
            bandwidth: 0.6,
        }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(LabError::InvalidSchedule(format!(
                "need 0 < t_min < t_max, got t_min={} t_max={}",
                self.t_min, self.t_max
            )));
        }
        if self.n_steps == 0 {
            return Err(LabError::InvalidSchedule("n_steps must be >= 1".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(LabError::InvalidSchedule(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    pub fn decay(&self, t: f64) -> f64 {
        decay(t)
    }

    /// Kernel variance `a_t^2 h^2 + 1 - a_t^2` of the smoothed estimator at time `t`.
    pub fn smooth_var(&self, t: f64) -> f64 {
        diffused_variance(self.bandwidth * self.bandwidth, t)
    }

    pub fn step(&self) -> f64 {
        (self.t_max - self.t_min) / self.n_steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sigma: f64,
    dim: usize,
    #[serde(skip)]
    log_weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sigma: f64,
    /// Defaults to the longest mean; shorter means are zero-padded.
    dim: Option<usize>,
}

impl<'de> Deserialize<'de> for GaussianMixture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMixture::deserialize(d)?;
        let dim = raw.dim.unwrap_or_else(|| raw.means.iter().map(Vec::len).max().unwrap_or(0));
        GaussianMixture::new(raw.weights, raw.means, raw.sigma, dim)
            .map_err(serde::de::Error::custom)
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sigma: f64, dim: usize) -> Result<Self> {
        if weights.is_empty() {
            return Err(LabError::InvalidMixture("no components".into()));
        }
        if weights.len() != means.len() {
            return Err(LabError::InvalidMixture(format!(
                "{} weights for {} means",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LabError::InvalidMixture("weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidMixture(format!("weights sum to {total}")));
        }
        if dim == 0 {
            return Err(LabError::InvalidMixture("dim must be >= 1".into()));
        }
        if let Some(m) = means.iter().find(|m| m.len() != dim) {
            return Err(LabError::DimensionMismatch {
                expected: dim,
                got: m.len(),
            });
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidMixture("non-finite mean".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(LabError::InvalidMixture(format!("sigma must be > 0, got {sigma}")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(GaussianMixture {
            weights,
            means,
            sigma,
            dim,
            log_weights,
        })
    }

    /// Equal-weight mixture with the given means.
    pub fn uniform(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let k = means.len();
        let dim = means.first().map(Vec::len).unwrap_or(0);
        GaussianMixture::new(vec![1.0 / k as f64; k], means, sigma, dim)
    }

    /// Five clusters at the origin and `(+-4, +-4)` in the first two
    /// coordinates, zero-padded to `dim`, with `sigma = 0.6`.
    pub fn five_cluster(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(LabError::InvalidMixture("five_cluster needs dim >= 2".into()));
        }
        let corners = [(0.0, 0.0), (-4.0, -4.0), (-4.0, 4.0), (4.0, -4.0), (4.0, 4.0)];
        let means = corners
            .iter()
            .map(|&(a, b)| {
                let mut m = vec![0.0; dim];
                m[0] = a;
                m[1] = b;
                m
            })
            .collect();
        GaussianMixture::uniform(means, 0.6)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// Mixture mean `sum_k w_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Forward marginal at time `t`: means scaled by `a_t`, variance `a_t^2 sigma^2 + 1 - a_t^2`.
    pub fn diffused(&self, t: f64) -> Result<GaussianMixture> {
        check_time(t)?;
        if t == 0.0 {
            return Ok(self.clone());
        }
        let a = decay(t);
        let means = self
            .means
            .iter()
            .map(|m| m.iter().map(|v| a * v).collect())
            .collect();
        let sigma = diffused_variance(self.variance(), t).sqrt();
        Ok(GaussianMixture {
            weights: self.weights.clone(),
            means,
            sigma,
            dim: self.dim,
            log_weights: self.log_weights.clone(),
        })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(LabError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Unnormalized per-component log terms at time `t` (decay `a`, variance `v`).
    fn component_logits(&self, x: &[f64], a: f64, v: f64, out: &mut Vec<f64>) {
        out.clear();
        for (lw, mu) in self.log_weights.iter().zip(&self.means) {
            let d2: f64 = x.iter().zip(mu).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
            out.push(lw - 0.5 * d2 / v);
        }
    }

    fn log_norm(&self, v: f64) -> f64 {
        -0.5 * self.dim as f64 * (2.0 * PI * v).ln()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.log_density_at(x, 0.0))
    }

    /// Log density of the time-`t` forward marginal, without argument checks.
    pub fn log_density_at(&self, x: &[f64], t: f64) -> f64 {
        let a = decay(t);
        let v = diffused_variance(self.variance(), t);
        let mut logits = Vec::with_capacity(self.n_components());
        self.component_logits(x, a, v, &mut logits);
        log_sum_exp(&logits) + self.log_norm(v)
    }

    /// Posterior responsibilities `pi_k(x)` of the time-`t` marginal.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        check_time(t)?;
        let a = decay(t);
        let v = diffused_variance(self.variance(), t);
        let mut logits = Vec::with_capacity(self.n_components());
        self.component_logits(x, a, v, &mut logits);
        let lse = log_sum_exp(&logits);
        Ok(logits.iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn analytic_score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        check_time(t)?;
        let mut out = vec![0.0; self.dim];
        self.log_density_and_score(x, t, &mut out);
        Ok(out)
    }

    /// Writes `grad log p_t(x)` into `score` and returns `log p_t(x)`.
    pub fn log_density_and_score(&self, x: &[f64], t: f64, score: &mut [f64]) -> f64 {
        let a = decay(t);
        let v = diffused_variance(self.variance(), t);
        let k = self.n_components();
        // Small fixed-size buffer avoids allocation for the usual handful of components.
        let mut buf = [0.0f64; 16];
        let mut heap;
        let logits: &mut [f64] = if k <= 16 {
            &mut buf[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        for ((l, lw), mu) in logits.iter_mut().zip(&self.log_weights).zip(&self.means) {
            let d2: f64 = x.iter().zip(mu).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
            *l = lw - 0.5 * d2 / v;
        }
        let lse = log_sum_exp(logits);
        score.iter_mut().for_each(|s| *s = 0.0);
        for ((l, lw), mu) in logits.iter().zip(&self.log_weights).zip(&self.means) {
            // Squared distances overflowed: fall back to the prior weights.
            let w = if lse.is_finite() { (l - lse).exp() } else { lw.exp() };
            if w == 0.0 {
                continue;
            }
            for ((s, xi), mi) in score.iter_mut().zip(x).zip(mu) {
                *s += w * (a * mi - xi);
            }
        }
        score.iter_mut().for_each(|s| *s /= v);
        lse + self.log_norm(v)
    }

    /// Draws `n` points at time `t`: categorical component, then isotropic noise.
    pub fn sample_at<R: Rng + ?Sized>(&self, n: usize, t: f64, rng: &mut R) -> Samples {
        let a = decay(t);
        let s = diffused_variance(self.variance(), t).sqrt();
        let mut cdf = Vec::with_capacity(self.n_components());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let mut out = Samples::zeros(n, self.dim);
        for i in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.iter().position(|&c| u < c).unwrap_or(self.n_components() - 1);
            let mu = &self.means[k];
            for (o, m) in out.row_mut(i).iter_mut().zip(mu) {
                let z: f64 = StandardNormal.sample(rng);
                *o = a * m + s * z;
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Samples {
        self.sample_at(n, 0.0, rng)
    }

    /// Index of the nearest mean (Euclidean), used for mode assignment.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, mu) in self.means.iter().enumerate() {
            let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        best.0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
