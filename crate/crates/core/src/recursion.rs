//! The mix / refit / resample loop and its per-generation ledger.
//!
//! Generation `i` trains a kernel score on `pool_i`, made of `floor(alpha N)`
//! fresh draws from `p_data` and `N - floor(alpha N)` points subsampled without
//! replacement from the stored samples of `p^i`, then integrates the reverse
//! SDE to store `N` samples of `p^{i+1}`. Generation 0's stored samples come from
//! a kernel score fitted on `N` fresh points.
//!
//! The target score of generation `i` is the mixture of the exact data score
//! and the model-implied score of `p^i`: the kernel score of `pool_{i-1}`
//! evaluated `t0` later, which is the time-`t` marginal of the reverse process
//! that produced `p^i` when that process is run to `t0`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::divergence::{
    classifier_divergences, kl_exact_ratio, smoothed_chi2, tune_classifier, ClassifierConfig, ClassifierGrid,
    DivergenceEstimate, GridPoint,
};
use crate::error::{LabError, Result};
use crate::gmm::{DiffusionSchedule, GaussianMixture};
use crate::observability::{estimate_eta, EtaConfig, EtaEstimate, ProbeSuite};
use crate::rng::Stream;
use crate::samples::Samples;
use crate::score::{log_add_exp, Along, ErrorField, KernelScore, ScoreField};
use crate::sde::{choose_without_replacement, paired_girsanov_run, simulate, Dynamics, IntegratorConfig};
use crate::stats::{fit_line, Estimate, LineFit};

/// Score used in place of the learned one when a generation is ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationReference {
    /// The kernel score fitted on generation 0's fresh data.
    Generation0,
    /// The exact mixture-target score of the ablated generation.
    MixtureTarget,
}

/// Which estimator supplies `D_n` for memory heatmaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapDivergence {
    Classifier,
    Smoothed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mixture: GaussianMixture,
    pub alpha: f64,
    pub n_train: usize,
    pub n_generations: usize,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub schedule: DiffusionSchedule,
    /// Paths carrying error accumulators, for each of the ideal and learned runs.
    pub n_energy: usize,
    pub classifier: ClassifierConfig,
    /// When set, the classifier's bandwidth multiple and ridge are chosen once per
    /// seed by held-out log-loss on `p^0` against fresh data, then held fixed.
    pub classifier_grid: Option<ClassifierGrid>,
    pub eta: EtaConfig,
    /// Kernel width of the smoothed chi-square used for the refresh identity.
    pub smoothing_bandwidth: f64,
    pub ablation_reference: AblationReference,
    pub heatmap_divergence: HeatmapDivergence,
    /// Generations covered by memory heatmaps.
    pub heatmap_horizon: usize,
    pub probe: ProbeSuite,
    /// Worker threads; `None` uses every core (capped by `COLLAPSE_LAB_THREADS`).
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::paper()
    }
}

impl RunConfig {
    /// The full-scale protocol: N = 100,000, 500 steps, 20 generations, 10 runs.
    pub fn paper() -> Self {
        RunConfig {
            mixture: GaussianMixture::five_cluster(10).expect("built-in mixture is valid"),
            alpha: 0.5,
            n_train: 100_000,
            n_generations: 20,
            n_seeds: 10,
            master_seed: 0,
            schedule: DiffusionSchedule::default(),
            n_energy: 50_000,
            classifier: ClassifierConfig::default(),
            classifier_grid: Some(ClassifierGrid::default()),
            eta: EtaConfig::default(),
            smoothing_bandwidth: 1.0,
            ablation_reference: AblationReference::Generation0,
            heatmap_divergence: HeatmapDivergence::Classifier,
            heatmap_horizon: 8,
            probe: ProbeSuite::default(),
            threads: None,
        }
    }

    /// Laptop scale: N = 10,000, 200 steps, 12 generations, 3 runs.
    pub fn desk() -> Self {
        RunConfig {
            n_train: 10_000,
            n_generations: 12,
            n_seeds: 3,
            n_energy: 2_000,
            schedule: DiffusionSchedule {
                n_steps: 200,
                ..DiffusionSchedule::default()
            },
            ..RunConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(LabError::config("alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        if self.n_train < 100 {
            return Err(LabError::config("n_train", format!("must be >= 100, got {}", self.n_train)));
        }
        if self.n_generations == 0 {
            return Err(LabError::config("n_generations", "must be >= 1"));
        }
        if self.n_seeds == 0 {
            return Err(LabError::config("n_seeds", "must be >= 1"));
        }
        if self.n_energy < 100 || self.n_energy > self.n_train {
            return Err(LabError::config(
                "n_energy",
                format!("must lie in [100, n_train], got {}", self.n_energy),
            ));
        }
        if !(self.smoothing_bandwidth > 0.0 && self.smoothing_bandwidth.is_finite()) {
            return Err(LabError::config("smoothing_bandwidth", "must be positive"));
        }
        if self.threads == Some(0) {
            return Err(LabError::config("threads", "must be >= 1"));
        }
        self.schedule
            .validate()
            .map_err(|e| LabError::config("schedule", e.to_string()))?;
        self.classifier.validate()?;
        if let Some(g) = &self.classifier_grid {
            g.validate()?;
        }
        self.eta.validate()?;
        self.probe.validate()?;
        if self.heatmap_horizon == 0 {
            return Err(LabError::config("heatmap_horizon", "must be >= 1"));
        }
        Ok(())
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::from_schedule(&self.schedule)
    }

    pub fn n_fresh(&self) -> usize {
        (self.alpha * self.n_train as f64).floor() as usize
    }

    /// Seed value of run `s`.
    pub fn seed(&self, s: usize) -> u64 {
        self.master_seed.wrapping_add(s as u64)
    }

    /// SHA-256 of the canonical JSON form (keys sorted, compact).
    /// SHA-256 of the canonical JSON, ignoring `threads` (results do not depend on it).
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["threads"] = serde_json::Value::Null;
        let canonical = canonical_json(&v);
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(digest)
    }
}

fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&m[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Mixture-target evaluations where both densities underflowed.
    pub underflow: u64,
    pub aborted_paths: usize,
    pub capped_ratios: usize,
    pub separable: bool,
}

impl Flags {
    pub fn is_clear(&self) -> bool {
        *self == Flags::default()
    }

    /// Compact form for the ledger's `flags` column.
    pub fn encode(&self) -> String {
        let mut parts = Vec::new();
        if self.underflow > 0 {
            parts.push(format!("underflow={}", self.underflow));
        }
        if self.aborted_paths > 0 {
            parts.push(format!("aborted={}", self.aborted_paths));
        }
        if self.capped_ratios > 0 {
            parts.push(format!("capped={}", self.capped_ratios));
        }
        if self.separable {
            parts.push("separable".to_string());
        }
        parts.join(";")
    }

    pub fn decode(s: &str) -> Result<Flags> {
        let mut f = Flags::default();
        for part in s.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').unwrap_or((part, ""));
            let num = || -> Result<u64> {
                v.parse()
                    .map_err(|_| LabError::Schema(format!("bad flag value in `{part}`")))
            };
            match k {
                "underflow" => f.underflow = num()?,
                "aborted" => f.aborted_paths = num()? as usize,
                "capped" => f.capped_ratios = num()? as usize,
                "separable" => f.separable = true,
                _ => return Err(LabError::Schema(format!("unknown flag `{k}`"))),
            }
        }
        Ok(f)
    }
}

/// Everything recorded about generation `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub seed: u64,
    pub generation: usize,
    pub alpha: f64,
    /// Error energy along the target drift.
    pub eps_star_sq: Estimate,
    /// Error energy along the learned drift.
    pub eps_hat_sq: Estimate,
    pub eta: EtaEstimate,
    /// `chi2(p^{i+1} || q_i)`, classifier.
    pub i_chi2: DivergenceEstimate,
    /// `KL(p^{i+1} || q_i)`, exact ratio of model-implied densities.
    pub i_kl: DivergenceEstimate,
    /// `chi2(p^i || p_data)`, classifier.
    pub d_chi2: DivergenceEstimate,
    /// Smoothed `chi2(p^i K || p_data K)`.
    pub d_smooth: DivergenceEstimate,
    /// Smoothed `chi2(q_i K || p_data K)` from the training pool.
    pub q_smooth: DivergenceEstimate,
    pub var_m: Estimate,
    pub mean_quad_var: Estimate,
    /// Mean of `exp(M - <M>/2)`.
    pub girsanov_mean: Estimate,
    /// Points behind the kernel density of `p^i` used by the target score.
    pub kde_density_points: usize,
    pub flags: Flags,
    pub sample_ref: Option<String>,
}

/// Reference scores and samples shared by every pipeline of one seed.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub seed: u64,
    /// `stores[i]` holds the samples of `p^i`, `i = 0..=n_generations`.
    pub stores: Vec<Arc<Samples>>,
    /// Kernel score fitted on generation 0's fresh data.
    pub reference: KernelScore,
    pub fresh0: Arc<Samples>,
    /// Classifier used for every `D` and `I` of this seed.
    pub classifier: ClassifierConfig,
    /// Held-out log-loss of each grid point tried, empty without a grid.
    pub tuning: Vec<GridPoint>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<GenerationRecord>,
    pub baseline: Baseline,
}

struct Streams {
    root: Stream,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            root: Stream::new(seed).child("recursion"),
        }
    }

    fn initial(&self) -> Stream {
        self.root.child("initial")
    }

    fn gen(&self, i: usize, label: &str) -> Stream {
        self.root.child("generation").index(i as u64).child(label)
    }
}

/// One seed's recursion state machine.
pub struct Pipeline<'a> {
    cfg: &'a RunConfig,
    data: ScoreField,
    streams: Streams,
    seed: u64,
    classifier: ClassifierConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            data: ScoreField::analytic(cfg.mixture.clone()),
            streams: Streams::new(seed),
            seed,
            classifier: cfg.classifier,
        })
    }

    /// Pipeline reusing a baseline's classifier.
    pub fn for_baseline(cfg: &'a RunConfig, baseline: &Baseline) -> Result<Self> {
        let mut p = Pipeline::new(cfg, baseline.seed)?;
        p.classifier = baseline.classifier;
        Ok(p)
    }

    pub fn classifier(&self) -> &ClassifierConfig {
        &self.classifier
    }

    /// Selects the classifier on `p^0` against fresh data when the config has a grid.
    pub fn tune(&mut self, store0: &Samples) -> Result<Vec<GridPoint>> {
        let Some(grid) = &self.cfg.classifier_grid else {
            return Ok(Vec::new());
        };
        let reference = self.sample_data(self.cfg.n_train, &self.streams.initial().child("tune_reference"));
        let (chosen, table) = tune_classifier(
            store0,
            &reference,
            &self.cfg.classifier,
            grid,
            &self.streams.initial().child("tune"),
        )?;
        self.classifier = chosen;
        Ok(table)
    }

    fn sample_data(&self, n: usize, stream: &Stream) -> Samples {
        self.cfg.mixture.sample(n, &mut stream.rng())
    }

    /// Fresh data of generation 0 and the stored samples of `p^0`.
    pub fn initial(&self) -> Result<(Arc<Samples>, KernelScore, Arc<Samples>)> {
        let s = self.streams.initial();
        let fresh = self.sample_data(self.cfg.n_train, &s.child("fresh"));
        let score = KernelScore::new(&fresh, self.cfg.schedule.bandwidth)?;
        let field = ScoreField::Kde(score.clone());
        let batch = simulate(Dynamics::Plain(&field), &self.cfg.integrator(), self.cfg.n_train, &s.child("sampler"))?;
        Ok((Arc::new(fresh), score, Arc::new(batch.states)))
    }

    /// Training pool of generation `i`.
    pub fn pool(&self, i: usize, store: &Samples) -> Result<Samples> {
        let n_fresh = self.cfg.n_fresh();
        let n_synth = self.cfg.n_train - n_fresh;
        if store.len() < n_synth {
            return Err(LabError::config(
                "n_train",
                format!("store holds {} samples, need {n_synth}", store.len()),
            ));
        }
        let fresh = self.sample_data(n_fresh, &self.streams.gen(i, "fresh"));
        let idx = choose_without_replacement(store.len(), n_synth, &mut self.streams.gen(i, "subsample").rng());
        fresh.concat(&store.select(&idx))
    }

    /// Mixture-target score of generation `i` given the pool behind `p^i`.
    pub fn target(&self, prev_pool: &Samples) -> Result<ScoreField> {
        if self.cfg.alpha >= 1.0 {
            return Ok(self.data.clone());
        }
        let synth = KernelScore::with_offset(prev_pool, self.cfg.schedule.bandwidth, self.cfg.schedule.t_min)?;
        ScoreField::mixture_target(self.cfg.alpha, self.data.clone(), ScoreField::Kde(synth))
    }

    fn reference_sample(&self, i: usize) -> Samples {
        self.sample_data(self.cfg.n_train, &self.streams.gen(i, "reference"))
    }

    /// Classifier `chi2(p^i || p_data)`.
    pub fn d_classifier(&self, i: usize, store: &Samples) -> Result<DivergenceEstimate> {
        let reference = self.reference_sample(i);
        Ok(classifier_divergences(store, &reference, &self.classifier, &self.streams.gen(i, "d_classifier"))?.chi2)
    }

    pub fn d_smoothed(&self, i: usize, store: &Samples) -> Result<DivergenceEstimate> {
        smoothed_chi2(
            store,
            &self.cfg.mixture,
            self.cfg.smoothing_bandwidth,
            &self.streams.gen(i, "d_smooth"),
        )
    }

    pub fn heatmap_divergence(&self, i: usize, store: &Samples) -> Result<DivergenceEstimate> {
        match self.cfg.heatmap_divergence {
            HeatmapDivergence::Classifier => self.d_classifier(i, store),
            HeatmapDivergence::Smoothed => self.d_smoothed(i, store),
        }
    }

    /// Samples of `p^{i+1}` from `learned`, with the first `n_energy` paths
    /// tracking the error against `target` when measuring.
    fn sample_next(&self, i: usize, learned: &ScoreField, error: Option<&ErrorField>) -> Result<crate::sde::TrajectoryBatch> {
        let stream = self.streams.gen(i, "sampler");
        let integ = self.cfg.integrator();
        match error {
            Some(e) => simulate(
                Dynamics::Tracked {
                    error: e,
                    along: Along::Learned,
                    tracked: self.cfg.n_energy,
                },
                &integ,
                self.cfg.n_train,
                &stream,
            ),
            None => simulate(Dynamics::Plain(learned), &integ, self.cfg.n_train, &stream),
        }
    }

    /// `KL(p^{i+1} || q_{i, t0})` between the model-implied densities.
    fn intra_kl(&self, i: usize, learned: &KernelScore, prev_pool: &Samples) -> Result<DivergenceEstimate> {
        let t0 = self.cfg.schedule.t_min;
        let h = self.cfg.schedule.bandwidth;
        let x = learned.sample(self.cfg.n_train, t0, &mut self.streams.gen(i, "kl").rng());
        if self.cfg.alpha >= 1.0 {
            let g = &self.cfg.mixture;
            return kl_exact_ratio(
                |x| learned.log_density(x, t0, None, &mut Default::default()),
                |x| g.log_density_at(x, t0),
                &x,
            );
        }
        let prev = KernelScore::with_offset(prev_pool, h, t0)?;
        let (la, lb) = (self.cfg.alpha.ln(), (1.0 - self.cfg.alpha).ln());
        let g = &self.cfg.mixture;
        kl_exact_ratio(
            |x| learned.log_density(x, t0, None, &mut Default::default()),
            |x| {
                log_add_exp(
                    la + g.log_density_at(x, t0),
                    lb + prev.log_density(x, t0, None, &mut Default::default()),
                )
            },
            &x,
        )
    }

    /// Runs every generation, measuring each.
    pub fn run(&mut self) -> Result<RunOutput> {
        let (fresh0, reference, store0) = self.initial().map_err(|e| e.at_generation(0))?;
        let tuning = self.tune(&store0).map_err(|e| e.at_generation(0))?;
        let mut stores = vec![Arc::clone(&store0)];
        let mut prev_pool = Arc::clone(&fresh0);
        let mut records = Vec::with_capacity(self.cfg.n_generations);
        for i in 0..self.cfg.n_generations {
            let (rec, pool, next) = self
                .generation(i, &stores[i], &prev_pool)
                .map_err(|e| e.at_generation(i))?;
            records.push(rec);
            stores.push(Arc::new(next));
            prev_pool = Arc::new(pool);
        }
        Ok(RunOutput {
            records,
            baseline: Baseline {
                seed: self.seed,
                stores,
                reference,
                fresh0,
                classifier: self.classifier,
                tuning,
            },
        })
    }

    /// Measured generation `i`; returns the record, `pool_i` and the samples of `p^{i+1}`.
    pub fn generation(&self, i: usize, store: &Samples, prev_pool: &Samples) -> Result<(GenerationRecord, Samples, Samples)> {
        let cfg = self.cfg;
        let integ = cfg.integrator();
        let pool = self.pool(i, store)?;
        let learned_k = KernelScore::new(&pool, cfg.schedule.bandwidth)?;
        let learned = ScoreField::Kde(learned_k.clone());
        let target = self.target(prev_pool)?;
        let error = ErrorField::between(&learned, &target)?;

        let sampled = self.sample_next(i, &learned, Some(&error))?;
        let eps_hat_sq = sampled.energy_estimate();
        let ideal = paired_girsanov_run(&error, &integ, cfg.n_energy, &self.streams.gen(i, "ideal"))?;
        let eps_star_sq = ideal.energy_estimate();
        let eta = estimate_eta(&ideal, &cfg.eta, &self.streams.gen(i, "eta"))?;
        let next = sampled.states;

        let d_chi2 = self.d_classifier(i, store)?;
        let i_div = classifier_divergences(&next, &pool, &self.classifier, &self.streams.gen(i, "i_classifier"))?;
        let i_kl = self.intra_kl(i, &learned_k, prev_pool)?;
        let d_smooth = self.d_smoothed(i, store)?;
        let q_smooth = smoothed_chi2(&pool, &cfg.mixture, cfg.smoothing_bandwidth, &self.streams.gen(i, "q_smooth"))?;

        let flags = Flags {
            underflow: target.fallback_count(),
            aborted_paths: sampled.aborted.len() + ideal.aborted.len(),
            capped_ratios: d_chi2.capped + i_div.chi2.capped + i_kl.capped,
            separable: (d_chi2.flagged && d_chi2.capped == 0) || (i_div.chi2.flagged && i_div.chi2.capped == 0),
        };
        let rec = GenerationRecord {
            seed: self.seed,
            generation: i,
            alpha: cfg.alpha,
            eps_star_sq,
            eps_hat_sq,
            eta,
            i_chi2: i_div.chi2,
            i_kl,
            d_chi2,
            d_smooth,
            q_smooth,
            var_m: ideal.martingale_variance(),
            mean_quad_var: ideal.quad_var_estimate(),
            girsanov_mean: ideal.girsanov_normalization(),
            kde_density_points: prev_pool.len(),
            flags,
            sample_ref: None,
        };
        Ok((rec, pool, next))
    }

    /// Replays generations `k..n` with generation `k`'s learned score replaced by
    /// `reference`, reusing the baseline's streams. Returns the heatmap divergence
    /// of `p^{k+1}, ..., p^n`.
    pub fn ablated(&self, baseline: &Baseline, k: usize, n: usize) -> Result<Vec<DivergenceEstimate>> {
        if k >= n || n > baseline.stores.len() - 1 {
            return Err(LabError::config(
                "ablate_at",
                format!("need 0 <= k < n <= {}, got k={k}, n={n}", baseline.stores.len() - 1),
            ));
        }
        let mut store = Arc::clone(&baseline.stores[k]);
        let mut out = Vec::with_capacity(n - k);
        for i in k..n {
            let pool = self.pool(i, &store).map_err(|e| e.at_generation(i))?;
            let field = if i == k {
                match self.cfg.ablation_reference {
                    AblationReference::Generation0 => ScoreField::Kde(baseline.reference.clone()),
                    AblationReference::MixtureTarget => {
                        let prev = if k == 0 {
                            Arc::clone(&baseline.fresh0)
                        } else {
                            Arc::new(self.pool(k - 1, &baseline.stores[k - 1])?)
                        };
                        self.target(&prev)?
                    }
                }
            } else {
                ScoreField::kde(&pool, self.cfg.schedule.bandwidth)?
            };
            let next = self.sample_next(i, &field, None).map_err(|e| e.at_generation(i))?;
            store = Arc::new(next.states);
            out.push(self.heatmap_divergence(i + 1, &store).map_err(|e| e.at_generation(i + 1))?);
        }
        Ok(out)
    }
}

/// Runs every seed of `cfg` in order.
pub fn run_recursion(cfg: &RunConfig) -> Result<Vec<RunOutput>> {
    (0..cfg.n_seeds)
        .map(|s| Pipeline::new(cfg, cfg.seed(s))?.run())
        .collect()
}

/// `Contrib[k, n] = D_n - D_n^{(-k)}`.
pub fn ablation_contribution(cfg: &RunConfig, baseline: &Baseline, k: usize, n: usize) -> Result<Estimate> {
    let p = Pipeline::for_baseline(cfg, baseline)?;
    let d_base = p.heatmap_divergence(n, &baseline.stores[n])?;
    let d_abl = p.ablated(baseline, k, n)?;
    let last = d_abl.last().expect("k < n");
    Ok(contribution(&d_base, last))
}

fn contribution(base: &DivergenceEstimate, ablated: &DivergenceEstimate) -> Estimate {
    Estimate::new(
        base.value - ablated.value,
        (base.std_error.powi(2) + ablated.std_error.powi(2)).sqrt(),
    )
}

/// Lower-triangular contribution matrix; `matrix[n][k]` is `Contrib[k, n]` for `k < n`,
/// zero on and above the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub seed: u64,
    pub alpha: f64,
    pub horizon: usize,
    /// `D_n` of the baseline, `n = 0..=horizon`.
    pub baseline: Vec<Estimate>,
    pub matrix: Vec<Vec<Estimate>>,
}

impl Heatmap {
    /// Mean `|Contrib[n - lag, n]|` over every `n` with `n - lag >= 0`.
    pub fn mean_abs_at_lag(&self, lag: usize) -> Option<f64> {
        let v: Vec<f64> = (lag..=self.horizon)
            .filter(|n| *n >= lag && lag >= 1)
            .map(|n| self.matrix[n][n - lag].value.abs())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Column `Contrib[k, horizon]` against lag `horizon - k`.
    pub fn last_row(&self) -> Vec<(usize, Estimate)> {
        let n = self.horizon;
        (0..n).map(|k| (n - k, self.matrix[n][k])).collect()
    }
}

/// Seed-averaged `|Contrib[horizon - lag, horizon]|` against lag, and the
/// least-squares slope of its logarithm (`None` with fewer than two usable lags).
pub fn decay_profile(maps: &[Heatmap]) -> (Vec<(usize, f64)>, Option<LineFit>) {
    let Some(first) = maps.first() else {
        return (Vec::new(), None);
    };
    let n = first.horizon;
    let profile: Vec<(usize, f64)> = (1..=n)
        .map(|lag| {
            let v: f64 = maps.iter().map(|m| m.matrix[n][n - lag].value.abs()).sum::<f64>() / maps.len() as f64;
            (lag, v)
        })
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = profile
        .iter()
        .filter(|(_, v)| *v > 0.0)
        .map(|(l, v)| (*l as f64, v.ln()))
        .unzip();
    (profile, fit_line(&x, &y))
}

/// Seed-averaged `mean_abs_at_lag`.
pub fn mean_abs_at_lag(maps: &[Heatmap], lag: usize) -> Option<f64> {
    let v: Vec<f64> = maps.iter().filter_map(|m| m.mean_abs_at_lag(lag)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds the heatmap of one seed from its baseline; ablations run in parallel.
pub fn heatmap(cfg: &RunConfig, baseline: &Baseline, horizon: usize) -> Result<Heatmap> {
    if horizon == 0 || horizon > baseline.stores.len() - 1 {
        return Err(LabError::config(
            "horizon",
            format!("must lie in [1, {}], got {horizon}", baseline.stores.len() - 1),
        ));
    }
    let p = Pipeline::for_baseline(cfg, baseline)?;
    let base: Vec<DivergenceEstimate> = (0..=horizon)
        .into_par_iter()
        .map(|n| p.heatmap_divergence(n, &baseline.stores[n]))
        .collect::<Result<_>>()?;
    let ablated: Vec<Vec<DivergenceEstimate>> = (0..horizon)
        .into_par_iter()
        .map(|k| p.ablated(baseline, k, horizon))
        .collect::<Result<_>>()?;
    let mut matrix = vec![vec![Estimate::ZERO; horizon + 1]; horizon + 1];
    for (k, row) in ablated.iter().enumerate() {
        for (j, d) in row.iter().enumerate() {
            let n = k + 1 + j;
            matrix[n][k] = contribution(&base[n], d);
        }
    }
    Ok(Heatmap {
        seed: baseline.seed,
        alpha: cfg.alpha,
        horizon,
        baseline: base.iter().map(|d| d.estimate()).collect(),
        matrix,
    })
}

/// Baseline stores only, without measurements; what heatmaps need.
pub fn baseline_only(cfg: &RunConfig, seed: u64, generations: usize) -> Result<Baseline> {
    let mut p = Pipeline::new(cfg, seed)?;
    let (fresh0, reference, store0) = p.initial().map_err(|e| e.at_generation(0))?;
    let tuning = p.tune(&store0).map_err(|e| e.at_generation(0))?;
    let mut stores = vec![store0];
    for i in 0..generations {
        let pool = p.pool(i, &stores[i]).map_err(|e| e.at_generation(i))?;
        let learned = ScoreField::kde(&pool, cfg.schedule.bandwidth)?;
        let next = p.sample_next(i, &learned, None).map_err(|e| e.at_generation(i))?;
        stores.push(Arc::new(next.states));
    }
    Ok(Baseline {
        seed,
        stores,
        reference,
        fresh0,
        classifier: p.classifier,
        tuning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            mixture: GaussianMixture::five_cluster(2).unwrap(),
            alpha: 0.5,
            n_train: 300,
            n_generations: 2,
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
            ..RunConfig::desk()
        }
    }

    #[test]
    fn pool_composition() {
        let cfg = tiny();
        let p = Pipeline::new(&cfg, 1).unwrap();
        let (_, _, store) = p.initial().unwrap();
        let pool = p.pool(0, &store).unwrap();
        assert_eq!(pool.len(), 300);
        let synth = pool.select(&(150..300).collect::<Vec<_>>());
        // every synthetic point is a distinct stored point
        let mut hits = 0;
        for s in synth.rows() {
            hits += store.rows().filter(|r| *r == s).count();
        }
        assert_eq!(hits, 150);
    }

    #[test]
    fn single_generation_gives_one_record() {
        let cfg = RunConfig {
            n_generations: 1,
            ..tiny()
        };
        let out = run_recursion(&cfg).unwrap();
        assert_eq!(out[0].records.len(), 1);
        assert_eq!(out[0].baseline.stores.len(), 2);
    }

    #[test]
    fn reruns_are_identical() {
        let cfg = tiny();
        let a = run_recursion(&cfg).unwrap();
        let b = run_recursion(&cfg).unwrap();
        assert_eq!(a[0].records, b[0].records);
    }

    #[test]
    fn baseline_only_matches_measured_run() {
        let cfg = tiny();
        let full = run_recursion(&cfg).unwrap();
        let light = baseline_only(&cfg, cfg.seed(0), 2).unwrap();
        for (a, b) in full[0].baseline.stores.iter().zip(&light.stores) {
            assert_eq!(a, b);
        }
        assert_eq!(full[0].baseline.classifier, light.classifier);
        assert_eq!(full[0].baseline.tuning.len(), 2);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::desk();
        let mut b = RunConfig::desk();
        assert_eq!(a.config_hash(), b.config_hash());
        b.threads = Some(3);
        assert_eq!(a.config_hash(), b.config_hash());
        b.alpha = 0.1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn flags_round_trip() {
        let f = Flags {
            underflow: 3,
            aborted_paths: 0,
            capped_ratios: 2,
            separable: true,
        };
        assert_eq!(Flags::decode(&f.encode()).unwrap(), f);
        assert!(Flags::decode("").unwrap().is_clear());
        assert!(Flags::decode("bogus=1").is_err());
    }
}
