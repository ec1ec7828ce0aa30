//! Chi-square and KL estimators between sample sets and densities.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::features::{spd_solve, FourierFeatures};
use crate::gmm::GaussianMixture;
use crate::kernels::{KernelSet, Scratch};
use crate::rng::Stream;
use crate::samples::Samples;
use crate::stats::{mean_se, Estimate};

/// Log-ratios above this are winsorized in exact-ratio estimators.
pub const LOG_RATIO_CAP: f64 = 18.420_680_743_952_367; // ln 1e8
/// Classifier log-ratios are clipped to `[-CLASSIFIER_CAP, CLASSIFIER_CAP]`.
pub const CLASSIFIER_CAP: f64 = 13.815_510_557_964_274; // ln 1e6
/// Fraction of capped evaluations above which an estimate is flagged.
pub const CAP_FLAG_RATE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactRatio,
    KdeRatio,
    ClassifierRatio,
    /// Chi-square after convolving both sides with a Gaussian kernel.
    SmoothedRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: Method,
    pub n_eval: usize,
    /// Evaluations whose log-ratio hit the cap.
    pub capped: usize,
    /// Raised when capping exceeded [`CAP_FLAG_RATE`] or the classes separated perfectly.
    pub flagged: bool,
}

impl DivergenceEstimate {
    pub fn exact_zero(method: Method) -> Self {
        DivergenceEstimate {
            value: 0.0,
            std_error: 0.0,
            method,
            n_eval: 0,
            capped: 0,
            flagged: false,
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.std_error)
    }

    /// Value clamped at zero for reporting.
    pub fn reported(&self) -> f64 {
        self.value.max(0.0)
    }

    fn from_terms(terms: &[f64], method: Method, capped: usize) -> Self {
        let e = mean_se(terms);
        DivergenceEstimate {
            value: e.value,
            std_error: e.se,
            method,
            n_eval: terms.len(),
            capped,
            flagged: capped as f64 > CAP_FLAG_RATE * terms.len() as f64,
        }
    }
}

fn log_ratios<N, D>(num: &N, den: &D, at: &Samples) -> (Vec<f64>, usize)
where
    N: Fn(&[f64]) -> f64 + Sync,
    D: Fn(&[f64]) -> f64 + Sync,
{
    let raw: Vec<f64> = at.as_slice().par_chunks(at.dim()).map(|x| num(x) - den(x)).collect();
    let mut capped = 0;
    let r = raw
        .into_iter()
        .map(|r| {
            if r > LOG_RATIO_CAP || r.is_nan() {
                capped += 1;
                LOG_RATIO_CAP
            } else {
                r
            }
        })
        .collect();
    (r, capped)
}

/// `chi2(num || den) = E_den[(num/den - 1)^2]` from samples of the denominator.
pub fn chi2_exact_ratio<N, D>(num: N, den: D, den_samples: &Samples) -> Result<DivergenceEstimate>
where
    N: Fn(&[f64]) -> f64 + Sync,
    D: Fn(&[f64]) -> f64 + Sync,
{
    if den_samples.is_empty() {
        return Err(LabError::Empty("denominator samples"));
    }
    let (r, capped) = log_ratios(&num, &den, den_samples);
    let terms: Vec<f64> = r.iter().map(|r| r.exp_m1().powi(2)).collect();
    Ok(DivergenceEstimate::from_terms(&terms, Method::ExactRatio, capped))
}

/// `KL(num || den) = E_num[log num - log den]` from samples of the numerator.
pub fn kl_exact_ratio<N, D>(num: N, den: D, num_samples: &Samples) -> Result<DivergenceEstimate>
where
    N: Fn(&[f64]) -> f64 + Sync,
    D: Fn(&[f64]) -> f64 + Sync,
{
    if num_samples.is_empty() {
        return Err(LabError::Empty("numerator samples"));
    }
    let (r, capped) = log_ratios(&num, &den, num_samples);
    Ok(DivergenceEstimate::from_terms(&r, Method::ExactRatio, capped))
}

/// Gaussian KDE `(1/n) sum_j N(x; x_j, h^2 I)` as a log-density.
#[derive(Debug, Clone)]
pub struct KdeDensity {
    kernels: KernelSet,
    bandwidth: f64,
}

impl KdeDensity {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        self.kernels.log_density(x, 1.0, h2, None, &mut Scratch::default())
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

pub fn density_from_samples(samples: &Samples, h: f64) -> Result<KdeDensity> {
    if samples.is_empty() {
        return Err(LabError::Empty("density samples"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(LabError::config("bandwidth", format!("must be positive, got {h}")));
    }
    Ok(KdeDensity {
        kernels: KernelSet::new(samples),
        bandwidth: h,
    })
}

/// `chi2(P K || p K)` where `P` is the empirical law of `samples`, `p` is `reference`
/// and `K` is convolution with `N(0, b^2 I)`.
///
/// Uses the U-statistic `mean_{j != k} K(x_j - y_k) / pK(x_j)` with `x_j = y_j + b z_j`,
/// which is unbiased for `chi2 + 1` when the `y` are i.i.d. Jackknife standard error.
pub fn smoothed_chi2(samples: &Samples, reference: &GaussianMixture, b: f64, stream: &Stream) -> Result<DivergenceEstimate> {
    let n = samples.len();
    if n < 3 {
        return Err(LabError::Empty("smoothed chi-square needs three samples"));
    }
    if samples.dim() != reference.dim() {
        return Err(LabError::DimensionMismatch {
            expected: reference.dim(),
            got: samples.dim(),
        });
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(LabError::config("smoothing_bandwidth", format!("must be positive, got {b}")));
    }
    let d = samples.dim();
    let smooth_ref = GaussianMixture::new(
        reference.weights().to_vec(),
        reference.means().to_vec(),
        (reference.variance() + b * b).sqrt(),
        d,
    )?;
    let mut rng = stream.rng();
    let mut x = samples.clone();
    let mut self_log_k = Vec::with_capacity(n);
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * b * b).ln();
    for i in 0..n {
        let mut z2 = 0.0;
        for v in x.row_mut(i) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += b * z;
            z2 += z * z;
        }
        self_log_k.push(log_norm - 0.5 * z2);
    }
    let log_p: Vec<f64> = x
        .as_slice()
        .par_chunks(d)
        .map(|xi| smooth_ref.log_density_at(xi, 0.0))
        .collect();
    let v = b * b;
    let ln_n = (n as f64).ln();
    let ys = KernelSet::new(samples);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let ld = ys.log_density(x.row(j), 1.0, v, None, &mut Scratch::default());
            ((ld + ln_n - log_p[j]).exp() - (self_log_k[j] - log_p[j]).exp()).max(0.0)
        })
        .collect();
    let neg_lp: Vec<f64> = log_p.iter().map(|l| -l).collect();
    let xs = KernelSet::weighted(&x, &neg_lp);
    let cols: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| {
            let ld = xs.log_density(samples.row(k), 1.0, v, None, &mut Scratch::default());
            ((ld + ln_n).exp() - (self_log_k[k] - log_p[k]).exp()).max(0.0)
        })
        .collect();
    let total: f64 = rows.iter().sum();
    let nf = n as f64;
    let u = total / (nf * (nf - 1.0));
    let loo: Vec<f64> = rows
        .iter()
        .zip(&cols)
        .map(|(r, c)| (total - r - c) / ((nf - 1.0) * (nf - 2.0)))
        .collect();
    let loo_mean = loo.iter().sum::<f64>() / nf;
    let se = ((nf - 1.0) / nf * loo.iter().map(|l| (l - loo_mean).powi(2)).sum::<f64>()).sqrt();
    Ok(DivergenceEstimate {
        value: u - 1.0,
        std_error: se,
        method: Method::SmoothedRatio,
        n_eval: n,
        capped: 0,
        flagged: !u.is_finite(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub feature_dim: usize,
    /// Kernel bandwidth as a multiple of the median pairwise distance.
    pub bandwidth_scale: f64,
    /// Penalty on the feature weights (intercept unpenalized).
    pub ridge: f64,
    /// Cross-fitting folds; log-ratios are always evaluated on held-out points.
    pub folds: usize,
    pub max_iter: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            feature_dim: 512,
            bandwidth_scale: 1.0,
            ridge: 1e-3,
            folds: 2,
            max_iter: 30,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(LabError::config("classifier.feature_dim", "must be >= 1"));
        }
        if !(self.bandwidth_scale > 0.0 && self.bandwidth_scale.is_finite()) {
            return Err(LabError::config("classifier.bandwidth_scale", "must be positive"));
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(LabError::config("classifier.ridge", "must be positive"));
        }
        if self.folds < 2 {
            return Err(LabError::config("classifier.folds", "must be >= 2"));
        }
        if self.max_iter == 0 {
            return Err(LabError::config("classifier.max_iter", "must be >= 1"));
        }
        Ok(())
    }
}

/// Logistic regression on Fourier features; `log_ratio(x)` estimates `log p(x)/q(x)`.
#[derive(Debug, Clone)]
pub struct RatioModel {
    features: FourierFeatures,
    beta: DVector<f64>,
    /// Largest |training margin| hit the cap or training accuracy was perfect.
    pub separable: bool,
}

impl RatioModel {
    pub fn log_ratio(&self, x: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.features.n_features()];
        self.features.transform_into(x, &mut phi);
        let r = self.beta[0] + phi.iter().zip(self.beta.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>();
        r.clamp(-CLASSIFIER_CAP, CLASSIFIER_CAP)
    }

    fn log_ratios(&self, design: &DMatrix<f64>) -> Vec<f64> {
        (design * &self.beta)
            .iter()
            .map(|r| r.clamp(-CLASSIFIER_CAP, CLASSIFIER_CAP))
            .collect()
    }
}

/// Class-balanced, ridge-penalised logistic regression by damped Newton steps.
/// Rows of `x` labelled `true` are the `p` class.
fn fit_logistic(x: &DMatrix<f64>, label: &[bool], ridge: f64, max_iter: usize) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    let n_pos = label.iter().filter(|l| **l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(LabError::Empty("classifier needs both classes"));
    }
    // Each class carries total weight 1/2.
    let cw: Vec<f64> = label
        .iter()
        .map(|l| if *l { 0.5 / n_pos as f64 } else { 0.5 / n_neg as f64 })
        .collect();
    let y: Vec<f64> = label.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
    let mut beta = DVector::zeros(p);
    let objective = |beta: &DVector<f64>| -> f64 {
        let f = x * beta;
        let mut loss = 0.0;
        for i in 0..n {
            // log(1 + e^f) - y f, stably
            let fi = f[i];
            let sp = if fi > 0.0 { fi + (-fi).exp().ln_1p() } else { fi.exp().ln_1p() };
            loss += cw[i] * (sp - y[i] * fi);
        }
        loss + 0.5 * ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
    };
    let mut obj = objective(&beta);
    for _ in 0..max_iter {
        let f = x * &beta;
        let mut resid = DVector::zeros(n);
        let mut wx = x.clone();
        for i in 0..n {
            let mu = 1.0 / (1.0 + (-f[i]).exp());
            resid[i] = cw[i] * (mu - y[i]);
            let w = cw[i] * mu * (1.0 - mu);
            wx.row_mut(i).scale_mut(w);
        }
        let mut grad = x.tr_mul(&resid);
        let mut hess = x.tr_mul(&wx);
        for k in 1..p {
            grad[k] += ridge * beta[k];
            hess[(k, k)] += ridge;
        }
        hess[(0, 0)] += 1e-10;
        let step = spd_solve(hess, &grad)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta - t * &step;
            let o = objective(&cand);
            if o <= obj {
                beta = cand;
                let gain = obj - o;
                obj = o;
                accepted = true;
                if gain < 1e-12 * (1.0 + obj.abs()) {
                    return Ok(beta);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.amax() < 1e-10 {
            break;
        }
    }
    Ok(beta)
}

/// Fits `log p/q` on all of both sets.
pub fn classifier_ratio(samples_p: &Samples, samples_q: &Samples, cfg: &ClassifierConfig, stream: &Stream) -> Result<RatioModel> {
    cfg.validate()?;
    if samples_p.is_empty() || samples_q.is_empty() {
        return Err(LabError::Empty("classifier samples"));
    }
    let both = samples_p.concat(samples_q)?;
    let features = FourierFeatures::fit(&both, cfg.feature_dim, cfg.bandwidth_scale, &stream.child("features"))?;
    let x = features.design(&both, true);
    let label: Vec<bool> = (0..both.len()).map(|i| i < samples_p.len()).collect();
    let beta = fit_logistic(&x, &label, cfg.ridge, cfg.max_iter)?;
    let model = RatioModel {
        features,
        beta,
        separable: false,
    };
    let r = model.log_ratios(&x);
    let perfect = r.iter().zip(&label).all(|(r, l)| (*r > 0.0) == *l);
    let capped = r.iter().any(|r| r.abs() >= CLASSIFIER_CAP);
    Ok(RatioModel {
        separable: perfect || capped,
        ..model
    })
}

/// Cross-fitted classifier divergences between `p` and `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierDivergences {
    /// `E_q[(e^r - 1)^2]` over held-out `q` points.
    pub chi2: DivergenceEstimate,
    /// `E_p[r]` over held-out `p` points.
    pub kl: DivergenceEstimate,
    pub feature_bandwidth: f64,
    /// Class-balanced held-out logistic loss (ln 2 for a useless classifier).
    pub heldout_log_loss: f64,
}

fn fold_of(n: usize, folds: usize, stream: &Stream) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut f: Vec<usize> = (0..n).map(|i| i % folds).collect();
    f.shuffle(&mut stream.rng());
    f
}

/// Fits on `folds - 1` folds of each set and evaluates on the remaining one.
/// Feature bandwidth and frequencies are shared by every fold.
pub fn classifier_divergences(
    samples_p: &Samples,
    samples_q: &Samples,
    cfg: &ClassifierConfig,
    stream: &Stream,
) -> Result<ClassifierDivergences> {
    cfg.validate()?;
    if samples_p.len() < cfg.folds || samples_q.len() < cfg.folds {
        return Err(LabError::Empty("classifier needs at least one point per fold"));
    }
    let both = samples_p.concat(samples_q)?;
    let features = FourierFeatures::fit(&both, cfg.feature_dim, cfg.bandwidth_scale, &stream.child("features"))?;
    let x = features.design(&both, true);
    let np = samples_p.len();
    let fp = fold_of(np, cfg.folds, &stream.child("folds_p"));
    let fq = fold_of(samples_q.len(), cfg.folds, &stream.child("folds_q"));
    let fold: Vec<usize> = fp.into_iter().chain(fq).collect();
    let mut r_out = vec![0.0; both.len()];
    let mut separable = true;
    for k in 0..cfg.folds {
        let train: Vec<usize> = (0..both.len()).filter(|i| fold[*i] != k).collect();
        let test: Vec<usize> = (0..both.len()).filter(|i| fold[*i] == k).collect();
        let xt = x.select_rows(&train);
        let lt: Vec<bool> = train.iter().map(|i| *i < np).collect();
        let beta = fit_logistic(&xt, &lt, cfg.ridge, cfg.max_iter)?;
        let xh = x.select_rows(&test);
        let r = xh * beta;
        for (i, ri) in test.iter().zip(r.iter()) {
            r_out[*i] = *ri;
            separable &= (*ri > 0.0) == (*i < np);
        }
    }
    let mut capped = 0;
    for r in r_out.iter_mut() {
        if r.abs() >= CLASSIFIER_CAP {
            capped += 1;
            *r = r.clamp(-CLASSIFIER_CAP, CLASSIFIER_CAP);
        }
    }
    let loss = |r: f64, pos: bool| {
        let f = if pos { -r } else { r };
        if f > 0.0 {
            f + (-f).exp().ln_1p()
        } else {
            f.exp().ln_1p()
        }
    };
    let lp = r_out[..np].iter().map(|r| loss(*r, true)).sum::<f64>() / np as f64;
    let lq = r_out[np..].iter().map(|r| loss(*r, false)).sum::<f64>() / (both.len() - np) as f64;
    let chi_terms: Vec<f64> = r_out[np..].iter().map(|r| r.exp_m1().powi(2)).collect();
    let mut chi2 = DivergenceEstimate::from_terms(&chi_terms, Method::ClassifierRatio, capped);
    let mut kl = DivergenceEstimate::from_terms(&r_out[..np], Method::ClassifierRatio, capped);
    chi2.flagged |= separable;
    kl.flagged |= separable;
    Ok(ClassifierDivergences {
        chi2,
        kl,
        feature_bandwidth: features.bandwidth(),
        heldout_log_loss: 0.5 * (lp + lq),
    })
}

/// Candidate bandwidth multiples and ridges for [`tune_classifier`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierGrid {
    pub bandwidth_scales: Vec<f64>,
    pub ridges: Vec<f64>,
}

impl Default for ClassifierGrid {
    fn default() -> Self {
        ClassifierGrid {
            bandwidth_scales: vec![1.0, 0.5, 0.35, 0.25],
            ridges: vec![1e-3, 1e-4],
        }
    }
}

impl ClassifierGrid {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !ok(&self.bandwidth_scales) || !ok(&self.ridges) {
            return Err(LabError::config("classifier_grid", "needs non-empty lists of positive values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub bandwidth_scale: f64,
    pub ridge: f64,
    pub heldout_log_loss: f64,
}

/// Picks the grid point with the smallest held-out log-loss on `p` versus `q`.
pub fn tune_classifier(
    samples_p: &Samples,
    samples_q: &Samples,
    base: &ClassifierConfig,
    grid: &ClassifierGrid,
    stream: &Stream,
) -> Result<(ClassifierConfig, Vec<GridPoint>)> {
    grid.validate()?;
    let mut table = Vec::new();
    let mut best: Option<(f64, ClassifierConfig)> = None;
    for &bandwidth_scale in &grid.bandwidth_scales {
        for &ridge in &grid.ridges {
            let cfg = ClassifierConfig {
                bandwidth_scale,
                ridge,
                ..*base
            };
            let loss = classifier_divergences(samples_p, samples_q, &cfg, stream)?.heldout_log_loss;
            table.push(GridPoint {
                bandwidth_scale,
                ridge,
                heldout_log_loss: loss,
            });
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, cfg));
            }
        }
    }
    Ok((best.expect("grid is non-empty").1, table))
}

/// Closed-form `chi2(N(m1, s^2 I) || N(m2, s^2 I))`.
pub fn gaussian_chi2_shift(m1: &[f64], m2: &[f64], s2: f64) -> f64 {
    let d2: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    (d2 / s2).exp_m1()
}

/// Closed-form `KL(N(m1, s^2 I) || N(m2, s^2 I))`.
pub fn gaussian_kl_shift(m1: &[f64], m2: &[f64], s2: f64) -> f64 {
    let d2: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * d2 / s2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal(mean: f64, n: usize, seed: u64) -> Samples {
        let g = GaussianMixture::uniform(vec![vec![mean]], 1.0).unwrap();
        g.sample(n, &mut Stream::new(seed).rng())
    }

    #[test]
    fn exact_chi2_gaussian_shift() {
        let p = GaussianMixture::uniform(vec![vec![0.0]], 1.0).unwrap();
        let q = GaussianMixture::uniform(vec![vec![0.5]], 1.0).unwrap();
        let xs = q.sample(100_000, &mut Stream::new(1).rng());
        let e = chi2_exact_ratio(|x| p.log_density_at(x, 0.0), |x| q.log_density_at(x, 0.0), &xs).unwrap();
        let exact = gaussian_chi2_shift(&[0.0], &[0.5], 1.0);
        assert!((exact - 0.284_025_416_687_741_5).abs() < 1e-12);
        assert!((e.value - exact).abs() < 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn exact_kl_gaussian_shift() {
        let p = GaussianMixture::uniform(vec![vec![0.0]], 1.0).unwrap();
        let q = GaussianMixture::uniform(vec![vec![0.5]], 1.0).unwrap();
        let xs = p.sample(100_000, &mut Stream::new(2).rng());
        let e = kl_exact_ratio(|x| p.log_density_at(x, 0.0), |x| q.log_density_at(x, 0.0), &xs).unwrap();
        assert!((e.value - 0.125).abs() < 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn identical_densities_give_zero() {
        let p = GaussianMixture::five_cluster(3).unwrap();
        let xs = p.sample(500, &mut Stream::new(3).rng());
        let f = |x: &[f64]| p.log_density_at(x, 0.0);
        let c = chi2_exact_ratio(f, f, &xs).unwrap();
        assert_eq!((c.value, c.std_error), (0.0, 0.0));
        assert_eq!(kl_exact_ratio(f, f, &xs).unwrap().value, 0.0);
    }

    #[test]
    fn overflowing_ratios_are_capped() {
        let xs = Samples::new(1, vec![0.0; 10]).unwrap();
        let e = chi2_exact_ratio(|_| 100.0, |_| 0.0, &xs).unwrap();
        assert_eq!(e.capped, 10);
        assert!(e.flagged);
        assert!(e.value.is_finite());
    }

    #[test]
    fn kde_density_single_point() {
        let s = Samples::new(2, vec![0.0, 0.0]).unwrap();
        let k = density_from_samples(&s, 1.0).unwrap();
        assert!((k.log_density(&[0.0, 0.0]) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn smoothed_chi2_of_gaussian_matches_closed_form() {
        // P = N(0.5, 1), p = N(0, 1), b = 1: PK = N(0.5, 2), pK = N(0, 2).
        let p = GaussianMixture::uniform(vec![vec![0.0]], 1.0).unwrap();
        let y = normal(0.5, 4000, 4);
        let e = smoothed_chi2(&y, &p, 1.0, &Stream::new(5)).unwrap();
        let exact = gaussian_chi2_shift(&[0.5], &[0.0], 2.0);
        assert!((e.value - exact).abs() < 3.0 * e.std_error, "{e:?} vs {exact}");
        assert!(e.std_error < 0.05);
    }

    #[test]
    fn smoothed_chi2_null_is_centred() {
        let p = GaussianMixture::five_cluster(2).unwrap();
        let y = p.sample(3000, &mut Stream::new(6).rng());
        let e = smoothed_chi2(&y, &p, 0.8, &Stream::new(7)).unwrap();
        assert!(e.value.abs() < 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn classifier_null_is_small() {
        let a = normal(0.0, 4000, 8);
        let b = normal(0.0, 4000, 9);
        let d = classifier_divergences(&a, &b, &ClassifierConfig::default(), &Stream::new(10)).unwrap();
        assert!(d.chi2.value < 0.05, "{:?}", d.chi2);
        assert!(!d.chi2.flagged);
    }

    #[test]
    fn classifier_flags_separable_sets() {
        let a = normal(0.0, 200, 11);
        let b = normal(60.0, 200, 12);
        let d = classifier_divergences(&a, &b, &ClassifierConfig::default(), &Stream::new(13)).unwrap();
        assert!(d.chi2.flagged);
    }
}
