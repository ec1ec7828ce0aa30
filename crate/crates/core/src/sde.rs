//! Reverse-time Euler-Maruyama integration with Girsanov accumulators.
//!
//! Paths start from `Y_T ~ N(0, I)` and step backwards on a uniform grid
//! `t_k = T - k dt` with
//!
//! `Y_{k+1} = Y_k + (Y_k / 2 + s(Y_k, t_k)) dt + sqrt(dt) z_k`,
//!
//! the reversal of `dX = -X/2 dt + dB`. When an error field is attached the
//! path also accumulates `M = sum e_k . z_k sqrt(dt)`, the left-point quadratic
//! variation `<M> = sum |e_k|^2 dt`, and a trapezoid estimate of
//! `int |e|^2 ds` that includes the terminal point.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gmm::DiffusionSchedule;
use crate::rng::{LabRng, Stream};
use crate::samples::Samples;
use crate::score::{Along, ErrorField, FieldScratch, ScoreField};
use crate::stats::{mean_se, variance_se, Estimate};

/// Paths handled per parallel work item; fixed so results never depend on the pool size.
pub const PATH_CHUNK: usize = 16;

/// Largest tolerated fraction of aborted paths.
pub const MAX_ABORT_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub n_steps: usize,
    pub t_max: f64,
    pub t_min: f64,
    /// `false` zeroes every Brownian increment (deterministic test runs).
    pub noise: bool,
}

impl IntegratorConfig {
    pub fn from_schedule(s: &DiffusionSchedule) -> Self {
        IntegratorConfig {
            n_steps: s.n_steps,
            t_max: s.t_max,
            t_min: s.t_min,
            noise: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(LabError::InvalidSchedule("n_steps must be >= 1".into()));
        }
        if !(self.t_min >= 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(LabError::InvalidSchedule(format!(
                "need 0 <= t_min < t_max, got {} and {}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.t_max - self.t_min) / self.n_steps as f64
    }

    /// Time of grid point `k`, `k = 0..=n_steps`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_min
        } else {
            self.t_max - k as f64 * self.step()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abort {
    pub path: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    /// Terminal states of the surviving paths, in path order.
    pub states: Samples,
    /// Original index of each surviving path.
    pub path_index: Vec<usize>,
    /// Error accumulators; empty when no error was tracked.
    pub martingale: Vec<f64>,
    pub quad_var: Vec<f64>,
    pub energy: Vec<f64>,
    pub log_z: Vec<f64>,
    pub aborted: Vec<Abort>,
    pub n_requested: usize,
    pub noise_key: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n_paths: usize,
    pub n_aborted: usize,
    pub state_mean: Vec<f64>,
    pub var_martingale: Option<Estimate>,
    pub mean_quad_var: Option<Estimate>,
    pub mean_energy: Option<Estimate>,
    pub noise_key: u64,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn tracked(&self) -> usize {
        self.martingale.len()
    }

    /// Terminal states of the paths that carried error accumulators.
    pub fn tracked_states(&self) -> Samples {
        self.states.head(self.tracked())
    }

    /// Trapezoid estimate of `E int |e|^2 ds` with its standard error.
    pub fn energy_estimate(&self) -> Estimate {
        mean_se(&self.energy)
    }

    pub fn quad_var_estimate(&self) -> Estimate {
        mean_se(&self.quad_var)
    }

    pub fn martingale_variance(&self) -> Estimate {
        variance_se(&self.martingale)
    }

    /// Mean of `exp(M - <M>/2)`; equals 1 for a true martingale.
    pub fn girsanov_normalization(&self) -> Estimate {
        let w: Vec<f64> = self.log_z.iter().map(|z| z.exp()).collect();
        mean_se(&w)
    }

    pub fn summary(&self) -> BatchSummary {
        let tracked = !self.martingale.is_empty();
        BatchSummary {
            n_paths: self.len(),
            n_aborted: self.aborted.len(),
            state_mean: self.states.mean(),
            var_martingale: tracked.then(|| self.martingale_variance()),
            mean_quad_var: tracked.then(|| self.quad_var_estimate()),
            mean_energy: tracked.then(|| self.energy_estimate()),
            noise_key: self.noise_key,
        }
    }
}

/// What drives the paths and which of them carry error accumulators.
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    Plain(&'a ScoreField),
    /// Follow `along`; the first `tracked` paths also accumulate the error.
    Tracked {
        error: &'a ErrorField,
        along: Along,
        tracked: usize,
    },
}

impl Dynamics<'_> {
    fn dim(&self) -> usize {
        match self {
            Dynamics::Plain(f) => f.dim(),
            Dynamics::Tracked { error, .. } => error.dim(),
        }
    }

    fn tracked(&self) -> usize {
        match self {
            Dynamics::Plain(_) => 0,
            Dynamics::Tracked { tracked, .. } => *tracked,
        }
    }
}

/// The `N(0, I)` starting point of a path; the first draws of its stream.
pub fn initial_state(rng: &mut LabRng, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    for o in out.iter_mut() {
        *o = StandardNormal.sample(rng);
    }
}

/// One backward Euler-Maruyama step in place.
#[inline]
pub fn em_step(y: &mut [f64], score: &[f64], dt: f64, noise: &[f64]) {
    let sq = dt.sqrt();
    for ((yi, si), zi) in y.iter_mut().zip(score).zip(noise) {
        *yi += (0.5 * *yi + si) * dt + sq * zi;
    }
}

struct PathOut {
    state: Vec<f64>,
    acc: Option<[f64; 3]>,
    abort: Option<Abort>,
}

fn run_path(dyn_: &Dynamics<'_>, cfg: &IntegratorConfig, stream: &Stream, path: usize, scratch: &mut FieldScratch) -> PathOut {
    let d = dyn_.dim();
    let mut rng = stream.path_rng(path);
    let mut y = vec![0.0; d];
    initial_state(&mut rng, d, &mut y);
    let mut drift = vec![0.0; d];
    let mut err = vec![0.0; d];
    let mut z = vec![0.0; d];
    let dt = cfg.step();
    let sq = dt.sqrt();
    let track = path < dyn_.tracked();
    let (mut m, mut qv, mut en) = (0.0, 0.0, 0.0);
    for k in 0..cfg.n_steps {
        let t = cfg.time(k);
        match dyn_ {
            Dynamics::Plain(f) => {
                f.eval(&y, t, &mut drift, scratch);
            }
            Dynamics::Tracked { error, along, .. } => {
                if track {
                    error.eval(&y, t, *along, &mut drift, &mut err, scratch);
                } else {
                    error.eval_drift(&y, t, *along, &mut drift, scratch);
                }
            }
        }
        for zi in z.iter_mut() {
            *zi = if cfg.noise {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
        }
        if track {
            let e2: f64 = err.iter().map(|e| e * e).sum();
            let ez: f64 = err.iter().zip(&z).map(|(e, zi)| e * zi).sum();
            m += ez * sq;
            qv += e2 * dt;
            en += if k == 0 { 0.5 * e2 * dt } else { e2 * dt };
        }
        em_step(&mut y, &drift, dt, &z);
        if !(y.iter().all(|v| v.is_finite()) && m.is_finite() && qv.is_finite()) {
            return PathOut {
                state: y,
                acc: None,
                abort: Some(Abort { path, step: k }),
            };
        }
    }
    if track {
        if let Dynamics::Tracked { error, along, .. } = dyn_ {
            error.eval(&y, cfg.t_min, *along, &mut drift, &mut err, scratch);
            let e2: f64 = err.iter().map(|e| e * e).sum();
            en += 0.5 * e2 * dt;
        }
    }
    PathOut {
        state: y,
        acc: track.then_some([m, qv, en]),
        abort: None,
    }
}

/// Simulates `n` reverse paths. Path `i` draws all its randomness from
/// `stream.path_rng(i)`, so results are identical for any thread count.
pub fn simulate(dynamics: Dynamics<'_>, cfg: &IntegratorConfig, n: usize, stream: &Stream) -> Result<TrajectoryBatch> {
    cfg.validate()?;
    if n == 0 {
        return Err(LabError::Empty("path count"));
    }
    let d = dynamics.dim();
    let n_chunks = n.div_ceil(PATH_CHUNK);
    let chunks: Vec<Vec<PathOut>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut scratch = FieldScratch::default();
            (c * PATH_CHUNK..((c + 1) * PATH_CHUNK).min(n))
                .map(|p| run_path(&dynamics, cfg, stream, p, &mut scratch))
                .collect()
        })
        .collect();
    let mut states = Vec::with_capacity(n * d);
    let mut path_index = Vec::with_capacity(n);
    let (mut mart, mut qv, mut en, mut lz) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut aborted = Vec::new();
    for (i, p) in chunks.into_iter().flatten().enumerate() {
        if let Some(a) = p.abort {
            aborted.push(a);
            continue;
        }
        states.extend_from_slice(&p.state);
        path_index.push(i);
        if let Some([m, q, e]) = p.acc {
            mart.push(m);
            qv.push(q);
            en.push(e);
            lz.push(m - 0.5 * q);
        }
    }
    if aborted.len() as f64 > MAX_ABORT_RATE * n as f64 {
        return Err(LabError::AbortRate {
            aborted: aborted.len(),
            total: n,
        });
    }
    Ok(TrajectoryBatch {
        states: Samples::new(d, states)?,
        path_index,
        martingale: mart,
        quad_var: qv,
        energy: en,
        log_z: lz,
        aborted,
        n_requested: n,
        noise_key: stream.key(),
    })
}

/// Samples `n` points by integrating `field` from `T` down to `t_min`.
pub fn reverse_sample(field: &ScoreField, cfg: &IntegratorConfig, n: usize, stream: &Stream) -> Result<TrajectoryBatch> {
    simulate(Dynamics::Plain(field), cfg, n, stream)
}

/// Paths under the target drift with every path carrying `M`, `<M>` and `log Z`.
pub fn paired_girsanov_run(error: &ErrorField, cfg: &IntegratorConfig, n: usize, stream: &Stream) -> Result<TrajectoryBatch> {
    simulate(
        Dynamics::Tracked {
            error,
            along: Along::Target,
            tracked: n,
        },
        cfg,
        n,
        stream,
    )
}

/// Path-wise error energy `E int |e|^2 ds` along the chosen drift.
pub fn energy(error: &ErrorField, along: Along, cfg: &IntegratorConfig, n: usize, stream: &Stream) -> Result<Estimate> {
    if error.is_zero() {
        return Ok(Estimate::ZERO);
    }
    let b = simulate(
        Dynamics::Tracked {
            error,
            along,
            tracked: n,
        },
        cfg,
        n,
        stream,
    )?;
    Ok(b.energy_estimate())
}

/// Picks `k` distinct indices from `0..n` (partial Fisher-Yates).
pub fn choose_without_replacement<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianMixture;
    use crate::score::Perturbation;

    fn cfg(n_steps: usize) -> IntegratorConfig {
        IntegratorConfig {
            n_steps,
            t_max: 4.0,
            t_min: 0.02,
            noise: true,
        }
    }

    #[test]
    fn zero_field_deterministic_step() {
        let c = IntegratorConfig {
            n_steps: 1,
            noise: false,
            ..cfg(1)
        };
        let s = Stream::new(1);
        let b = reverse_sample(&ScoreField::Zero { dim: 3 }, &c, 2, &s).unwrap();
        let dt = c.step();
        for p in 0..2 {
            let mut y0 = vec![0.0; 3];
            initial_state(&mut s.path_rng(p), 3, &mut y0);
            for (got, y) in b.states.row(p).iter().zip(&y0) {
                assert_eq!(*got, y + 0.5 * y * dt);
            }
        }
    }

    #[test]
    fn zero_error_gives_zero_accumulators() {
        let g = GaussianMixture::five_cluster(2).unwrap();
        let f = ScoreField::analytic(g);
        let e = ErrorField::between(&f, &f).unwrap();
        let b = paired_girsanov_run(&e, &cfg(20), 50, &Stream::new(2)).unwrap();
        assert!(b.martingale.iter().all(|m| *m == 0.0));
        assert!(b.quad_var.iter().all(|m| *m == 0.0));
        assert!(b.log_z.iter().all(|m| *m == 0.0));
        let n = b.girsanov_normalization();
        assert_eq!((n.value, n.se), (1.0, 0.0));
    }

    #[test]
    fn state_free_error_accumulators_are_exact() {
        let g = GaussianMixture::five_cluster(2).unwrap();
        let (amp, freq) = (0.3, 1.7);
        let e = ErrorField::injected(
            ScoreField::analytic(g),
            Perturbation::TimeOnly {
                amplitude: amp,
                frequency: freq,
            },
        )
        .unwrap();
        let c = cfg(400);
        let b = paired_girsanov_run(&e, &c, 8, &Stream::new(3)).unwrap();
        let dt = c.step();
        let sq = |t: f64| 2.0 * (amp * (freq * t).sin()).powi(2);
        let qv: f64 = (0..c.n_steps).map(|k| sq(c.time(k)) * dt).sum();
        // int_a^b 2 A^2 sin^2(f t) dt in closed form
        let prim = |t: f64| amp * amp * (t - (2.0 * freq * t).sin() / (2.0 * freq));
        let exact = prim(c.t_max) - prim(c.t_min);
        for i in 0..b.len() {
            assert!((b.quad_var[i] - qv).abs() < 1e-12);
            assert!((b.energy[i] - exact).abs() < 1e-4);
            assert!((b.log_z[i] - (b.martingale[i] - 0.5 * b.quad_var[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn ito_isometry_holds() {
        let g = GaussianMixture::five_cluster(2).unwrap();
        let p = Perturbation::random_linear(2, 0.5, &mut Stream::new(8).rng());
        let e = ErrorField::injected(ScoreField::analytic(g), p).unwrap();
        let b = paired_girsanov_run(&e, &cfg(50), 4000, &Stream::new(9)).unwrap();
        let v = b.martingale_variance();
        let q = b.quad_var_estimate();
        assert!((v.value - q.value).abs() < 3.0 * (v.se + q.se), "{v:?} {q:?}");
        let z = b.girsanov_normalization();
        assert!((z.value - 1.0).abs() < 3.0 * z.se + 1e-3, "{z:?}");
    }

    #[test]
    fn terminal_grid_point_is_t_min() {
        let c = cfg(7);
        assert_eq!(c.time(0), 4.0);
        assert_eq!(c.time(7), 0.02);
        assert!((c.time(3) - (4.0 - 3.0 * c.step())).abs() < 1e-15);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let g = GaussianMixture::five_cluster(3).unwrap();
        let y = g.sample(64, &mut Stream::new(4).rng());
        let learned = ScoreField::kde(&y, 0.6).unwrap();
        let target = ScoreField::analytic(g);
        let e = ErrorField::between(&learned, &target).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| paired_girsanov_run(&e, &cfg(30), 70, &Stream::new(5)).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.states, b.states);
        assert_eq!(a.martingale, b.martingale);
        assert_eq!(a.energy, b.energy);
    }

    #[test]
    fn without_replacement_is_distinct() {
        let mut rng = Stream::new(6).rng();
        let mut v = choose_without_replacement(100, 40, &mut rng);
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 40);
        assert!(v.iter().all(|i| *i < 100));
    }
}
