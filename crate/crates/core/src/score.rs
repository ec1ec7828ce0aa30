//! Score fields `s(x, t)` and error fields `e = s_learned - s_target`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gmm::{decay, diffused_variance, GaussianMixture};
use crate::kernels::{KernelSet, Scratch};
use crate::samples::Samples;

/// Soft kernel score over a training set.
///
/// At time `t` each training point `y_j` contributes a Gaussian kernel with
/// mean `a_s y_j` and variance `a_s^2 h^2 + 1 - a_s^2`, where `s = t + offset`.
/// A zero offset is the estimator fitted on the training set; a positive
/// offset describes the marginal of samples drawn from that estimator by a
/// sampler stopped at time `offset`.
#[derive(Debug, Clone)]
pub struct KernelScore {
    kernels: Arc<KernelSet>,
    bandwidth: f64,
    time_offset: f64,
}

impl KernelScore {
    pub fn new(training: &Samples, bandwidth: f64) -> Result<Self> {
        Self::with_offset(training, bandwidth, 0.0)
    }

    pub fn with_offset(training: &Samples, bandwidth: f64, time_offset: f64) -> Result<Self> {
        if training.is_empty() {
            return Err(LabError::Empty("kernel training set"));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(LabError::config("bandwidth", format!("must be positive, got {bandwidth}")));
        }
        if !(time_offset >= 0.0 && time_offset.is_finite()) {
            return Err(LabError::InvalidTime(time_offset));
        }
        Ok(KernelScore {
            kernels: Arc::new(KernelSet::new(training)),
            bandwidth,
            time_offset,
        })
    }

    /// Same kernels, different time offset.
    pub fn shifted(&self, time_offset: f64) -> KernelScore {
        KernelScore {
            kernels: Arc::clone(&self.kernels),
            bandwidth: self.bandwidth,
            time_offset,
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn time_offset(&self) -> f64 {
        self.time_offset
    }

    pub fn kernels(&self) -> &KernelSet {
        &self.kernels
    }

    /// `(a, v)` of the kernels at time `t`.
    pub fn kernel_params(&self, t: f64) -> (f64, f64) {
        let s = t + self.time_offset;
        (decay(s), diffused_variance(self.bandwidth * self.bandwidth, s))
    }

    pub fn log_density(&self, x: &[f64], t: f64, score: Option<&mut [f64]>, scratch: &mut Scratch) -> f64 {
        let (a, v) = self.kernel_params(t);
        self.kernels.log_density(x, a, v, score, scratch)
    }

    /// Draws from the time-`t` marginal: a uniformly chosen kernel plus noise.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, t: f64, rng: &mut R) -> Samples {
        let (a, v) = self.kernel_params(t);
        let sd = v.sqrt();
        let d = self.kernels.dim();
        let mut out = Samples::zeros(n, d);
        for i in 0..n {
            let j = rng.random_range(0..self.kernels.len());
            let y = self.kernels.point(j);
            for (o, yk) in out.row_mut(i).iter_mut().zip(&y) {
                let z: f64 = StandardNormal.sample(rng);
                *o = a * yk + sd * z;
            }
        }
        out
    }
}

/// Score of `q = alpha p_data + (1 - alpha) p_synth`, weighted in log space.
#[derive(Debug)]
pub struct MixtureTarget {
    alpha: f64,
    data: ScoreField,
    synth: ScoreField,
    fallbacks: AtomicU64,
}

impl MixtureTarget {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn data(&self) -> &ScoreField {
        &self.data
    }

    pub fn synth(&self) -> &ScoreField {
        &self.synth
    }

    /// Evaluations where both log densities were non-finite and `lambda = alpha` was used.
    pub fn fallback_count(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Posterior weight of the data component given component log densities.
    pub fn responsibility(&self, log_data: f64, log_synth: f64) -> (f64, bool) {
        if self.alpha >= 1.0 {
            return (1.0, false);
        }
        let la = self.alpha.ln() + log_data;
        let lb = (1.0 - self.alpha).ln() + log_synth;
        if !(la.is_finite() || lb.is_finite()) || la.is_nan() || lb.is_nan() {
            return (self.alpha, true);
        }
        let lam = if la >= lb {
            1.0 / (1.0 + (lb - la).exp())
        } else {
            let r = (la - lb).exp();
            r / (1.0 + r)
        };
        (lam, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// `e = scale * s_base(x, t)`.
    AlignedLinear { scale: f64 },
    /// `e = W x`, `W` row-major `d x d`.
    RandomLinear { matrix: Vec<f64>, dim: usize },
    /// `e = amplitude * sin(frequency * t) * (1, ..., 1)`.
    TimeOnly { amplitude: f64, frequency: f64 },
}

impl Perturbation {
    /// Random linear map with i.i.d. `N(0, scale^2 / d)` entries.
    pub fn random_linear<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Self {
        let sd = scale / (dim as f64).sqrt();
        let matrix = (0..dim * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            })
            .collect();
        Perturbation::RandomLinear { matrix, dim }
    }

    /// The same perturbation with its magnitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            Perturbation::AlignedLinear { scale } => Perturbation::AlignedLinear {
                scale: scale * factor,
            },
            Perturbation::RandomLinear { matrix, dim } => Perturbation::RandomLinear {
                matrix: matrix.iter().map(|w| w * factor).collect(),
                dim: *dim,
            },
            Perturbation::TimeOnly {
                amplitude,
                frequency,
            } => Perturbation::TimeOnly {
                amplitude: amplitude * factor,
                frequency: *frequency,
            },
        }
    }

    pub fn class_name(&self) -> &'static str {
        match self {
            Perturbation::AlignedLinear { .. } => "aligned",
            Perturbation::RandomLinear { .. } => "random",
            Perturbation::TimeOnly { .. } => "time_only",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let finite = match self {
            Perturbation::AlignedLinear { scale } => scale.is_finite(),
            Perturbation::RandomLinear { matrix, dim: d } => {
                if *d != dim || matrix.len() != dim * dim {
                    return Err(LabError::DimensionMismatch {
                        expected: dim * dim,
                        got: matrix.len(),
                    });
                }
                matrix.iter().all(|w| w.is_finite())
            }
            Perturbation::TimeOnly {
                amplitude,
                frequency,
            } => amplitude.is_finite() && frequency.is_finite(),
        };
        if finite {
            Ok(())
        } else {
            Err(LabError::config("perturbation", "parameters must be finite"))
        }
    }

    /// Writes `e(x, t)` given the base score at `(x, t)`.
    pub fn apply(&self, x: &[f64], t: f64, base: &[f64], out: &mut [f64]) {
        match self {
            Perturbation::AlignedLinear { scale } => {
                for (o, b) in out.iter_mut().zip(base) {
                    *o = scale * b;
                }
            }
            Perturbation::RandomLinear { matrix, dim } => {
                for (o, row) in out.iter_mut().zip(matrix.chunks_exact(*dim)) {
                    *o = row.iter().zip(x).map(|(w, xi)| w * xi).sum();
                }
            }
            Perturbation::TimeOnly {
                amplitude,
                frequency,
            } => {
                let v = amplitude * (frequency * t).sin();
                out.iter_mut().for_each(|o| *o = v);
            }
        }
    }
}

/// Per-thread working memory for field evaluation.
#[derive(Debug, Default, Clone)]
pub struct FieldScratch {
    kernels: Scratch,
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum ScoreField {
    Zero { dim: usize },
    Analytic(Arc<GaussianMixture>),
    Kde(KernelScore),
    MixtureTarget(Arc<MixtureTarget>),
    Perturbed {
        base: Box<ScoreField>,
        perturbation: Arc<Perturbation>,
    },
}

impl ScoreField {
    pub fn analytic(gmm: GaussianMixture) -> Self {
        ScoreField::Analytic(Arc::new(gmm))
    }

    pub fn kde(training: &Samples, bandwidth: f64) -> Result<Self> {
        Ok(ScoreField::Kde(KernelScore::new(training, bandwidth)?))
    }

    pub fn mixture_target(alpha: f64, data: ScoreField, synth: ScoreField) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(LabError::config("alpha", format!("must lie in (0, 1], got {alpha}")));
        }
        if data.dim() != synth.dim() {
            return Err(LabError::DimensionMismatch {
                expected: data.dim(),
                got: synth.dim(),
            });
        }
        if alpha < 1.0 && !(data.has_density() && synth.has_density()) {
            return Err(LabError::config(
                "mixture_target",
                "both components need evaluable densities",
            ));
        }
        Ok(ScoreField::MixtureTarget(Arc::new(MixtureTarget {
            alpha,
            data,
            synth,
            fallbacks: AtomicU64::new(0),
        })))
    }

    pub fn perturbed(base: ScoreField, perturbation: Perturbation) -> Result<Self> {
        perturbation.validate(base.dim())?;
        Ok(ScoreField::Perturbed {
            base: Box::new(base),
            perturbation: Arc::new(perturbation),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ScoreField::Zero { dim } => *dim,
            ScoreField::Analytic(g) => g.dim(),
            ScoreField::Kde(k) => k.kernels().dim(),
            ScoreField::MixtureTarget(m) => m.data.dim(),
            ScoreField::Perturbed { base, .. } => base.dim(),
        }
    }

    pub fn has_density(&self) -> bool {
        match self {
            ScoreField::Analytic(_) | ScoreField::Kde(_) => true,
            ScoreField::MixtureTarget(m) => {
                m.data.has_density() && (m.alpha >= 1.0 || m.synth.has_density())
            }
            ScoreField::Zero { .. } | ScoreField::Perturbed { .. } => false,
        }
    }

    /// Identity of the underlying model, used to recognise `Perturbed(base)` against `base`.
    pub fn same_model(&self, other: &ScoreField) -> bool {
        match (self, other) {
            (ScoreField::Zero { dim: a }, ScoreField::Zero { dim: b }) => a == b,
            (ScoreField::Analytic(a), ScoreField::Analytic(b)) => Arc::ptr_eq(a, b) || a == b,
            (ScoreField::Kde(a), ScoreField::Kde(b)) => {
                Arc::ptr_eq(&a.kernels, &b.kernels)
                    && a.bandwidth == b.bandwidth
                    && a.time_offset == b.time_offset
            }
            (ScoreField::MixtureTarget(a), ScoreField::MixtureTarget(b)) => Arc::ptr_eq(a, b),
            (
                ScoreField::Perturbed {
                    base: a,
                    perturbation: p,
                },
                ScoreField::Perturbed {
                    base: b,
                    perturbation: q,
                },
            ) => (Arc::ptr_eq(p, q) || p == q) && a.same_model(b),
            _ => false,
        }
    }

    /// Mixture-target fallback evaluations accumulated so far (0 for other kinds).
    pub fn fallback_count(&self) -> u64 {
        match self {
            ScoreField::MixtureTarget(m) => m.fallback_count(),
            ScoreField::Perturbed { base, .. } => base.fallback_count(),
            _ => 0,
        }
    }

    /// Writes `s(x, t)` into `out`. Returns the log density when the field has one, NaN otherwise.
    pub fn eval(&self, x: &[f64], t: f64, out: &mut [f64], scratch: &mut FieldScratch) -> f64 {
        match self {
            ScoreField::Zero { .. } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                f64::NAN
            }
            ScoreField::Analytic(g) => g.log_density_and_score(x, t, out),
            ScoreField::Kde(k) => k.log_density(x, t, Some(out), &mut scratch.kernels),
            ScoreField::MixtureTarget(m) => {
                if m.alpha >= 1.0 {
                    return m.data.eval(x, t, out, scratch);
                }
                let d = x.len();
                let mut synth = std::mem::take(&mut scratch.b);
                synth.resize(d, 0.0);
                let lq = m.synth.eval(x, t, &mut synth, scratch);
                let lp = m.data.eval(x, t, out, scratch);
                let (lam, flagged) = m.responsibility(lp, lq);
                if flagged {
                    m.fallbacks.fetch_add(1, Ordering::Relaxed);
                }
                for (o, s) in out.iter_mut().zip(&synth) {
                    *o = s + lam * (*o - s);
                }
                scratch.b = synth;
                let la = m.alpha.ln() + lp;
                let lb = (1.0 - m.alpha).ln() + lq;
                log_add_exp(la, lb)
            }
            ScoreField::Perturbed { base, perturbation } => {
                base.eval(x, t, out, scratch);
                let d = x.len();
                let mut e = std::mem::take(&mut scratch.a);
                e.resize(d, 0.0);
                perturbation.apply(x, t, out, &mut e);
                for (o, ei) in out.iter_mut().zip(&e) {
                    *o += ei;
                }
                scratch.a = e;
                f64::NAN
            }
        }
    }

    /// Convenience wrapper allocating its own output and scratch.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(LabError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        crate::gmm::check_time(t)?;
        let mut out = vec![0.0; self.dim()];
        self.eval(x, t, &mut out, &mut FieldScratch::default());
        Ok(out)
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        if !self.has_density() {
            return Err(LabError::config("log_density", "field has no density"));
        }
        let mut out = vec![0.0; self.dim()];
        Ok(self.eval(x, t, &mut out, &mut FieldScratch::default()))
    }
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Which drift a path follows while the error is accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Along {
    Target,
    Learned,
}

/// `e(x, t) = s_learned(x, t) - s_target(x, t)`.
#[derive(Debug, Clone)]
pub enum ErrorField {
    /// Learned equals target.
    Zero(ScoreField),
    Difference {
        learned: ScoreField,
        target: ScoreField,
    },
    /// Learned is `target + perturbation`; the error is the perturbation itself.
    Injected {
        target: ScoreField,
        perturbation: Arc<Perturbation>,
    },
}

impl ErrorField {
    pub fn between(learned: &ScoreField, target: &ScoreField) -> Result<Self> {
        if learned.dim() != target.dim() {
            return Err(LabError::DimensionMismatch {
                expected: target.dim(),
                got: learned.dim(),
            });
        }
        if learned.same_model(target) {
            return Ok(ErrorField::Zero(target.clone()));
        }
        if let ScoreField::Perturbed { base, perturbation } = learned {
            if base.same_model(target) {
                return Ok(ErrorField::Injected {
                    target: target.clone(),
                    perturbation: Arc::clone(perturbation),
                });
            }
        }
        Ok(ErrorField::Difference {
            learned: learned.clone(),
            target: target.clone(),
        })
    }

    pub fn injected(target: ScoreField, perturbation: Perturbation) -> Result<Self> {
        perturbation.validate(target.dim())?;
        Ok(ErrorField::Injected {
            target,
            perturbation: Arc::new(perturbation),
        })
    }

    pub fn dim(&self) -> usize {
        self.target().dim()
    }

    pub fn target(&self) -> &ScoreField {
        match self {
            ErrorField::Zero(t) => t,
            ErrorField::Difference { target, .. } => target,
            ErrorField::Injected { target, .. } => target,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ErrorField::Zero(_))
    }

    /// Writes the drift score of the followed process into `drift` and the error into `err`.
    pub fn eval(
        &self,
        x: &[f64],
        t: f64,
        along: Along,
        drift: &mut [f64],
        err: &mut [f64],
        scratch: &mut FieldScratch,
    ) {
        match self {
            ErrorField::Zero(target) => {
                target.eval(x, t, drift, scratch);
                err.iter_mut().for_each(|e| *e = 0.0);
            }
            ErrorField::Difference { learned, target } => {
                let (first, second) = match along {
                    Along::Target => (target, learned),
                    Along::Learned => (learned, target),
                };
                second.eval(x, t, err, scratch);
                first.eval(x, t, drift, scratch);
                // err currently holds the other field.
                for (e, s) in err.iter_mut().zip(drift.iter()) {
                    *e = match along {
                        Along::Target => *e - s,
                        Along::Learned => s - *e,
                    };
                }
            }
            ErrorField::Injected {
                target,
                perturbation,
            } => {
                target.eval(x, t, drift, scratch);
                perturbation.apply(x, t, drift, err);
                if along == Along::Learned {
                    for (s, e) in drift.iter_mut().zip(err.iter()) {
                        *s += e;
                    }
                }
            }
        }
    }

    /// Writes only the drift score of the followed process.
    pub fn eval_drift(&self, x: &[f64], t: f64, along: Along, out: &mut [f64], scratch: &mut FieldScratch) {
        match (self, along) {
            (ErrorField::Zero(target), _) => {
                target.eval(x, t, out, scratch);
            }
            (ErrorField::Difference { target, .. }, Along::Target) => {
                target.eval(x, t, out, scratch);
            }
            (ErrorField::Difference { learned, .. }, Along::Learned) => {
                learned.eval(x, t, out, scratch);
            }
            (ErrorField::Injected { target, .. }, Along::Target) => {
                target.eval(x, t, out, scratch);
            }
            (
                ErrorField::Injected {
                    target,
                    perturbation,
                },
                Along::Learned,
            ) => {
                target.eval(x, t, out, scratch);
                let mut e = std::mem::take(&mut scratch.a);
                e.resize(x.len(), 0.0);
                perturbation.apply(x, t, out, &mut e);
                for (o, ei) in out.iter_mut().zip(&e) {
                    *o += ei;
                }
                scratch.a = e;
            }
        }
    }

    /// `e(x, t)` alone.
    pub fn error(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim();
        let mut drift = vec![0.0; d];
        let mut err = vec![0.0; d];
        let mut s = FieldScratch::default();
        self.eval(x, t, Along::Target, &mut drift, &mut err, &mut s);
        err
    }
}

/// Convenience: soft-KDE score of a training set at a single point.
pub fn kde_score(training: &Samples, bandwidth: f64, x: &[f64], t: f64) -> Result<Vec<f64>> {
    ScoreField::kde(training, bandwidth)?.score(x, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    #[test]
    fn single_kernel_score() {
        let y = Samples::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let x = [0.4, 0.3];
        let t = 0.7;
        let s = kde_score(&y, 0.6, &x, t).unwrap();
        let a = decay(t);
        let v = a * a * 0.36 + 1.0 - a * a;
        assert!((s[0] - (a * 1.0 - 0.4) / v).abs() < 1e-14);
        assert!((s[1] - (a * -2.0 - 0.3) / v).abs() < 1e-14);
    }

    #[test]
    fn kde_tends_to_standard_normal_score() {
        let g = GaussianMixture::five_cluster(3).unwrap();
        let y = g.sample(50, &mut Stream::new(1).rng());
        let x = [0.5, -1.0, 2.0];
        let s = kde_score(&y, 0.6, &x, 60.0).unwrap();
        for k in 0..3 {
            assert!((s[k] + x[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn kde_matches_finite_differences() {
        let g = GaussianMixture::five_cluster(4).unwrap();
        let mut rng = Stream::new(2).rng();
        let y = g.sample(100, &mut rng);
        let f = ScoreField::kde(&y, 0.6).unwrap();
        let t = 0.3;
        for _ in 0..10 {
            let x = g.sample_at(1, t, &mut rng).into_vec();
            let s = f.score(&x, t).unwrap();
            let fd = fd_gradient(|z| f.log_density(z, t).unwrap(), &x, 1e-5);
            assert!(rel_err(&s, &fd) < 1e-5, "{s:?} vs {fd:?}");
        }
    }

    #[test]
    fn alpha_one_target_is_data_score() {
        let g = GaussianMixture::five_cluster(2).unwrap();
        let y = g.sample(30, &mut Stream::new(3).rng());
        let data = ScoreField::analytic(g);
        let tgt = ScoreField::mixture_target(1.0, data.clone(), ScoreField::kde(&y, 0.6).unwrap()).unwrap();
        let x = [1.0, -0.5];
        assert_eq!(tgt.score(&x, 0.4).unwrap(), data.score(&x, 0.4).unwrap());
    }

    #[test]
    fn identical_components_fixed_point() {
        let g = GaussianMixture::five_cluster(2).unwrap();
        let f = ScoreField::analytic(g);
        let tgt = ScoreField::mixture_target(0.3, f.clone(), f.clone()).unwrap();
        let x = [2.0, 1.0];
        assert_eq!(tgt.score(&x, 0.2).unwrap(), f.score(&x, 0.2).unwrap());
    }

    #[test]
    fn mixture_target_matches_pooled_mixture() {
        let p = GaussianMixture::uniform(vec![vec![-2.0, 0.0], vec![2.0, 1.0]], 0.7).unwrap();
        let q = GaussianMixture::uniform(vec![vec![0.0, 3.0], vec![1.0, -2.0]], 0.7).unwrap();
        let mut means = p.means().to_vec();
        means.extend_from_slice(q.means());
        let pooled = GaussianMixture::uniform(means, 0.7).unwrap();
        let tgt = ScoreField::mixture_target(0.5, ScoreField::analytic(p), ScoreField::analytic(q)).unwrap();
        let mut rng = Stream::new(4).rng();
        for _ in 0..20 {
            let x = pooled.sample_at(1, 0.5, &mut rng).into_vec();
            let s = tgt.score(&x, 0.5).unwrap();
            let r = pooled.analytic_score(&x, 0.5).unwrap();
            assert!(rel_err(&s, &r) < 1e-10);
        }
    }

    #[test]
    fn double_underflow_falls_back_to_alpha() {
        let p = GaussianMixture::uniform(vec![vec![0.0]], 0.01).unwrap();
        let q = GaussianMixture::uniform(vec![vec![1.0]], 0.01).unwrap();
        let tgt = ScoreField::mixture_target(0.25, ScoreField::analytic(p.clone()), ScoreField::analytic(q.clone()))
            .unwrap();
        let x = [1e200];
        let s = tgt.score(&x, 0.0).unwrap();
        let sp = p.analytic_score(&x, 0.0).unwrap()[0];
        let sq = q.analytic_score(&x, 0.0).unwrap()[0];
        assert!((s[0] - (0.25 * sp + 0.75 * sq)).abs() <= 1e-9 * s[0].abs());
        assert_eq!(tgt.fallback_count(), 1);
    }

    #[test]
    fn perturbation_cancels_exactly() {
        let g = GaussianMixture::five_cluster(3).unwrap();
        let base = ScoreField::analytic(g);
        let p = Perturbation::random_linear(3, 0.3, &mut Stream::new(5).rng());
        let learned = ScoreField::perturbed(base.clone(), p.clone()).unwrap();
        let err = ErrorField::between(&learned, &base).unwrap();
        let x = [0.2, -1.0, 3.0];
        let mut expect = vec![0.0; 3];
        p.apply(&x, 1.0, &base.score(&x, 1.0).unwrap(), &mut expect);
        assert_eq!(err.error(&x, 1.0), expect);
        assert!(ErrorField::between(&base, &base).unwrap().is_zero());
    }

    #[test]
    fn zero_scale_perturbation_is_identity() {
        let g = GaussianMixture::five_cluster(2).unwrap();
        let base = ScoreField::analytic(g);
        let p = ScoreField::perturbed(base.clone(), Perturbation::AlignedLinear { scale: 0.0 }).unwrap();
        let x = [0.3, 0.9];
        assert_eq!(p.score(&x, 0.5).unwrap(), base.score(&x, 0.5).unwrap());
    }

    #[test]
    fn time_only_is_state_independent() {
        let p = Perturbation::TimeOnly {
            amplitude: 0.7,
            frequency: 2.0,
        };
        let mut a = vec![0.0; 2];
        let mut b = vec![0.0; 2];
        p.apply(&[1.0, 2.0], 0.3, &[5.0, 5.0], &mut a);
        p.apply(&[-9.0, 0.0], 0.3, &[-1.0, 0.0], &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn difference_matches_recomputation() {
        let g = GaussianMixture::five_cluster(10).unwrap();
        let mut rng = Stream::new(6).rng();
        let y = g.sample(200, &mut rng);
        let learned = ScoreField::kde(&y, 0.6).unwrap();
        let target = ScoreField::analytic(g.clone());
        let err = ErrorField::between(&learned, &target).unwrap();
        for i in 0..20 {
            let t = 0.02 + 0.2 * i as f64;
            let x = g.sample_at(1, t, &mut rng).into_vec();
            let e = err.error(&x, t);
            let l = kde_score(&y, 0.6, &x, t).unwrap();
            let a = g.analytic_score(&x, t).unwrap();
            for k in 0..10 {
                assert_eq!(e[k], l[k] - a[k]);
            }
        }
    }
}
