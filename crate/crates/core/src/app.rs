//! Subcommand implementations behind the `collapse-lab` binary: configuration
//! loading, artifact writing and manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bounds::{verify_all, write_rows_csv, BoundReport};
use crate::error::{LabError, Result};
use crate::ledger::{load_ledger, save_ledger, LedgerRow};
use crate::observability::{probe_suite, ProbeRow};
use crate::recursion::{baseline_only, decay_profile, heatmap, mean_abs_at_lag, Heatmap, Pipeline, RunConfig};
use crate::score::ScoreField;
use crate::stats::{mean, mean_se};
use crate::store::write_store;
use crate::svg;

pub const THREADS_ENV: &str = "COLLAPSE_LAB_THREADS";
pub const TOOL: &str = "collapse-lab";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

impl Profile {
    pub fn config(self) -> RunConfig {
        match self {
            Profile::Paper => RunConfig::paper(),
            Profile::Desk => RunConfig::desk(),
        }
    }
}

/// Recursively overlays `patch` on `base`; objects merge key by key, anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// The profile's defaults, overlaid with the JSON file at `path` and the seed override.
pub fn load_config(path: Option<&Path>, profile: Profile, seed: Option<u64>) -> Result<RunConfig> {
    let mut v = serde_json::to_value(profile.config())?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| LabError::config("--config", format!("{}: {e}", p.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| LabError::config("--config", format!("{}: {e}", p.display())))?;
        if !patch.is_object() {
            return Err(LabError::config("--config", "top level must be a JSON object"));
        }
        let mut patch = patch;
        // A mixture is replaced as a unit, never merged field by field.
        if let Some(mix) = patch.as_object_mut().and_then(|o| o.remove("mixture")) {
            v["mixture"] = mix;
        }
        merge(&mut v, patch);
    }
    let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| LabError::config("config", e.to_string()))?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Worker count: the config's `threads` (default: every core), capped by `COLLAPSE_LAB_THREADS`.
pub fn thread_count(cfg: &RunConfig, env: Option<&str>) -> Result<usize> {
    let mut n = cfg
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Some(raw) = env {
        let cap: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|c| *c > 0)
            .ok_or_else(|| LabError::config(THREADS_ENV, format!("expected a positive integer, got `{raw}`")))?;
        n = n.min(cap);
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: String,
    /// Relative to the manifest's directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub master_seed: Option<u64>,
    pub config: Value,
    pub files: Vec<ManifestEntry>,
    pub summary: Value,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, master_seed: Option<u64>, config: Value) -> Self {
        Manifest {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash,
            master_seed,
            config,
            files: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn add(&mut self, kind: &str, path: impl Into<String>) {
        self.files.push(ManifestEntry {
            kind: kind.to_string(),
            path: path.into(),
        });
    }

    /// Writes `<dir>/<name>` after checking every listed file exists.
    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        for f in &self.files {
            let p = dir.join(&f.path);
            if !p.is_file() {
                return Err(LabError::Store {
                    path: p,
                    reason: "listed in manifest but missing".into(),
                });
            }
        }
        let path = dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_text(dir: &Path, rel: &str, text: &str) -> Result<()> {
    let p = dir.join(rel);
    if let Some(parent) = p.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(p, text)?;
    Ok(())
}

pub const RUN_MANIFEST: &str = "manifest.json";
pub const LEDGER_FILE: &str = "ledger.csv";

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub rows: Vec<LedgerRow>,
    pub manifest: PathBuf,
    pub ledger: PathBuf,
}

/// Runs every seed, writing sample stores, the ledger and `manifest.json` under `out`.
/// `store_samples = false` skips the sample stores.
pub fn cmd_run(cfg: &RunConfig, out: &Path, store_samples: bool) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("run", cfg.config_hash(), Some(cfg.master_seed), serde_json::to_value(cfg)?);
    let mut rows = Vec::new();
    let mut tuning = Vec::new();
    if store_samples {
        std::fs::create_dir_all(out.join("stores"))?;
    }
    for s in 0..cfg.n_seeds {
        let seed = cfg.seed(s);
        let run = Pipeline::new(cfg, seed)?.run()?;
        let mut refs = Vec::new();
        if store_samples {
            for (i, store) in run.baseline.stores.iter().enumerate() {
                let rel = format!("stores/seed{seed}_gen{i}.f64");
                write_store(&out.join(&rel), store, seed, i)?;
                manifest.add("sample_store", rel.clone());
                manifest.add("sample_store_sidecar", format!("{rel}.json"));
                refs.push(rel);
            }
        }
        for rec in &run.records {
            let mut row = LedgerRow::from(rec);
            row.sample_ref = refs.get(rec.generation).cloned().unwrap_or_default();
            rows.push(row);
        }
        tuning.push(json!({
            "seed": seed,
            "classifier": run.baseline.classifier,
            "grid": run.baseline.tuning,
        }));
    }
    let ledger = out.join(LEDGER_FILE);
    save_ledger(&ledger, &rows)?;
    manifest.add("ledger", LEDGER_FILE);
    manifest.summary = json!({ "rows": rows.len(), "classifier_tuning": tuning });
    let manifest = manifest.write(out, RUN_MANIFEST)?;
    Ok(RunArtifacts { rows, manifest, ledger })
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub reports: Vec<BoundReport>,
    pub passed: bool,
}

/// Checks every bound on the ledger at `ledger`, writing `bounds.csv`,
/// `bounds.json` and `verify-manifest.json` under `out`.
/// A missing input is a usage error rather than a failed check.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(LabError::config(what, format!("{} does not exist", path.display())))
    }
}

pub fn cmd_verify(ledger: &Path, out: &Path, burn_in: usize) -> Result<VerifyOutcome> {
    require_file(ledger, "ledger")?;
    let bytes = std::fs::read(ledger)?;
    let rows = crate::ledger::read_ledger(&bytes[..])?;
    if rows.is_empty() {
        return Err(LabError::Schema("ledger has no rows".into()));
    }
    std::fs::create_dir_all(out)?;
    let reports = verify_all(&rows, burn_in);
    let passed = reports.iter().all(BoundReport::passed);
    let f = std::fs::File::create(out.join("bounds.csv"))?;
    write_rows_csv(std::io::BufWriter::new(f), &reports)?;
    let summary: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "name": r.name,
                "summary": r.summary,
                "fit": r.fit,
                "constants": r.constants,
                "notes": r.notes,
            })
        })
        .collect();
    write_text(out, "bounds.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    let config = json!({ "ledger_sha256": sha256_hex(&bytes), "burn_in": burn_in });
    let hash = sha256_hex(config.to_string().as_bytes());
    let mut m = Manifest::new("verify", hash, rows.first().map(|r| r.seed), config);
    m.add("bound_rows", "bounds.csv");
    m.add("bound_summary", "bounds.json");
    m.summary = json!({ "passed": passed });
    m.write(out, "verify-manifest.json")?;
    Ok(VerifyOutcome { reports, passed })
}

#[derive(Debug, Clone)]
pub struct HeatmapOutcome {
    pub maps: Vec<Heatmap>,
    pub lag1_over_lag3: Option<(f64, f64)>,
    pub decay_slope: Option<f64>,
}

fn heatmap_csv(map: &Heatmap) -> String {
    let mut s = String::from("n,k,lag,contrib,contrib_se\n");
    for n in 1..=map.horizon {
        for k in 0..n {
            let c = map.matrix[n][k];
            s.push_str(&format!("{n},{k},{},{},{}\n", n - k, c.value, c.se));
        }
    }
    s
}

/// Contribution heatmaps for every seed of `cfg` up to `horizon` generations.
pub fn cmd_heatmap(cfg: &RunConfig, out: &Path, horizon: usize) -> Result<HeatmapOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut m = Manifest::new("heatmap", cfg.config_hash(), Some(cfg.master_seed), serde_json::to_value(cfg)?);
    let mut maps = Vec::new();
    for s in 0..cfg.n_seeds {
        let seed = cfg.seed(s);
        let base = baseline_only(cfg, seed, horizon)?;
        let map = heatmap(cfg, &base, horizon)?;
        let csv = format!("heatmap_seed{seed}.csv");
        let svg_name = format!("heatmap_seed{seed}.svg");
        write_text(out, &csv, &heatmap_csv(&map))?;
        let values: Vec<Vec<f64>> = map.matrix.iter().map(|r| r.iter().map(|e| e.value).collect()).collect();
        let title = format!("Contrib[k, n], alpha = {}, seed {seed}", cfg.alpha);
        write_text(out, &svg_name, &svg::heatmap(&values, &title, "generation n", "ablated generation k"))?;
        m.add("heatmap_csv", csv);
        m.add("heatmap_svg", svg_name);
        maps.push(map);
    }
    let (profile, fit) = decay_profile(&maps);
    let lags = mean_abs_at_lag(&maps, 1).zip(mean_abs_at_lag(&maps, 3));
    let summary = json!({
        "alpha": cfg.alpha,
        "horizon": horizon,
        "seeds": maps.iter().map(|m| m.seed).collect::<Vec<_>>(),
        "mean_abs_lag1": lags.map(|l| l.0),
        "mean_abs_lag3": lags.map(|l| l.1),
        "last_row_profile": profile,
        "decay_slope": fit.map(|f| f.slope),
        "reference_slope": 2.0 * (1.0 - cfg.alpha).ln(),
    });
    write_text(out, "heatmap.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    m.add("heatmap_summary", "heatmap.json");
    m.summary = summary;
    m.write(out, "heatmap-manifest.json")?;
    Ok(HeatmapOutcome {
        maps,
        lag1_over_lag3: lags,
        decay_slope: fit.map(|f| f.slope),
    })
}

/// Mean `eta` and its standard error across seeds, per class, in first-seen order.
pub fn probe_means(rows: &[ProbeRow]) -> Vec<(String, f64, f64)> {
    let mut classes: Vec<String> = Vec::new();
    for r in rows {
        if !classes.contains(&r.class) {
            classes.push(r.class.clone());
        }
    }
    classes
        .into_iter()
        .map(|c| {
            let v: Vec<f64> = rows.iter().filter(|r| r.class == c).map(|r| r.eta.eta).collect();
            let e = mean_se(&v);
            let se = if v.len() > 1 { e.se } else { 0.0 };
            (c, e.value, se)
        })
        .collect()
}

fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from("class,scale,eps_star_sq,eps_star_se,eta,eta_se,seed\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.class, r.scale, r.eps_star_sq.value, r.eps_star_sq.se, r.eta.eta, r.eta.se, r.seed
        ));
    }
    s
}

/// Observability probe on the exact data score for every seed of `cfg`.
pub fn cmd_probe(cfg: &RunConfig, out: &Path) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let base = ScoreField::analytic(cfg.mixture.clone());
    let integ = cfg.integrator();
    let mut rows = Vec::new();
    for s in 0..cfg.n_seeds {
        rows.extend(probe_suite(&base, &cfg.probe, &cfg.eta, &integ, cfg.seed(s))?);
    }
    write_text(out, "probe.csv", &probe_csv(&rows))?;
    let means = probe_means(&rows);
    let labels: Vec<String> = means.iter().map(|m| m.0.clone()).collect();
    let values: Vec<f64> = means.iter().map(|m| m.1).collect();
    let errors: Vec<f64> = means.iter().map(|m| m.2).collect();
    let title = format!("Observability at matched energy ({} seeds)", cfg.n_seeds);
    write_text(out, "probe.svg", &svg::bar_chart(&labels, &values, &errors, &title, "mean eta"))?;
    let mut m = Manifest::new("probe", cfg.config_hash(), Some(cfg.master_seed), serde_json::to_value(cfg)?);
    m.add("probe_table", "probe.csv");
    m.add("probe_chart", "probe.svg");
    m.summary = json!(means
        .iter()
        .map(|(c, v, e)| json!({ "class": c, "mean_eta": v, "se": e }))
        .collect::<Vec<_>>());
    m.write(out, "probe-manifest.json")?;
    Ok(rows)
}

fn series(name: &str, rows: &[&LedgerRow], f: impl Fn(&LedgerRow) -> (f64, f64), dashed: bool) -> svg::Series {
    svg::Series {
        name: name.to_string(),
        points: rows
            .iter()
            .map(|r| {
                let (v, se) = f(r);
                (r.generation as f64, v, se)
            })
            .collect(),
        dashed,
    }
}

/// Plots and a markdown summary for the ledger in `dir` (written by `run`).
pub fn cmd_report(dir: &Path, burn_in: usize) -> Result<PathBuf> {
    require_file(&dir.join(LEDGER_FILE), "--out")?;
    let rows = load_ledger(&dir.join(LEDGER_FILE))?;
    if rows.is_empty() {
        return Err(LabError::Schema("ledger has no rows".into()));
    }
    let reports = verify_all(&rows, burn_in);
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    let seed = seeds[0];
    let alpha = rows[0].alpha;
    let one: Vec<&LedgerRow> = rows.iter().filter(|r| r.seed == seed).collect();
    let mut m = Manifest::new("report", sha256_hex(&std::fs::read(dir.join(LEDGER_FILE))?), Some(seed), json!({ "burn_in": burn_in }));

    let intra = svg::line_chart(
        &[
            series("I chi2", &one, |r| (r.i_chi2, r.i_chi2_se), false),
            series("I KL", &one, |r| (r.i_kl, r.i_kl_se), false),
            series("4 eps*^2", &one, |r| (4.0 * r.eps_star_sq, 4.0 * r.eps_star_se), true),
            series("eps_hat^2 / 2", &one, |r| (0.5 * r.eps_hat_sq, 0.5 * r.eps_hat_se), true),
            series("eta eps*^2 / 4", &one, |r| (0.25 * r.eta * r.eps_star_sq, 0.0), true),
        ],
        &format!("Intra-generation divergence, alpha = {alpha}, seed {seed}"),
        "generation",
        "divergence",
        true,
    );
    write_text(dir, "report/intra.svg", &intra)?;
    m.add("plot", "report/intra.svg");

    let eps: Vec<f64> = one.iter().map(|r| r.eps_star_sq).collect();
    let s = crate::bounds::discounted_sum(&eps, alpha);
    let acc = reports.iter().find(|r| r.name == "accumulation").expect("accumulation report");
    let coef = acc.constants.get("lower_coefficient_min").copied().unwrap_or(0.0);
    let mut acc_series = vec![
        series("D chi2 (classifier)", &one, |r| (r.d_chi2, r.d_chi2_se), false),
        svg::Series {
            name: "lower bound".into(),
            points: one.iter().map(|r| (r.generation as f64, coef * s[r.generation.min(s.len() - 1)], 0.0)).collect(),
            dashed: true,
        },
    ];
    if let Some(f) = acc.fit.filter(|f| !f.degenerate) {
        let g = (1.0 - alpha).powi(2);
        let d0 = one[0].d_chi2;
        acc_series.push(svg::Series {
            name: format!("affine fit (R2 {:.2})", f.r_squared),
            points: one
                .iter()
                .map(|r| {
                    let n = r.generation.min(s.len() - 1);
                    (n as f64, f.intercept + f.slope * (s[n] + g.powi(n as i32) * d0), 0.0)
                })
                .collect(),
            dashed: true,
        });
    }
    let accumulation = svg::line_chart(
        &acc_series,
        &format!("Accumulated divergence, alpha = {alpha}, seed {seed}"),
        "generation",
        "D",
        true,
    );
    write_text(dir, "report/accumulation.svg", &accumulation)?;
    m.add("plot", "report/accumulation.svg");

    let eta_plot = svg::line_chart(
        &[
            series("eta", &one, |r| (r.eta, r.eta_se), false),
            series("out-of-fold R2", &one, |r| (r.eta_r2, 0.0), true),
        ],
        &format!("Observability, alpha = {alpha}, seed {seed}"),
        "generation",
        "eta",
        false,
    );
    write_text(dir, "report/eta.svg", &eta_plot)?;
    m.add("plot", "report/eta.svg");

    let mut md = format!("# collapse-lab report\n\nalpha = {alpha}, seeds = {seeds:?}, rows = {}\n\n", rows.len());
    md.push_str("| check | pass | fail | first failure |\n|---|---|---|---|\n");
    for r in &reports {
        let first = r
            .summary
            .first_fail
            .map_or("-".to_string(), |(s, g)| format!("seed {s}, generation {g}"));
        md.push_str(&format!("| {} | {} | {} | {first} |\n", r.name, r.summary.n_pass, r.summary.n_fail));
    }
    if let Some(f) = acc.fit {
        md.push_str(&format!(
            "\nAffine fit of D_N on S_N + (1-alpha)^(2N) D_0 (descriptive): slope {:.4}, intercept {:.4}, R2 {:.3}\n",
            f.slope, f.intercept, f.r_squared
        ));
    }
    let mean_eta = mean(&rows.iter().map(|r| r.eta).collect::<Vec<_>>());
    md.push_str(&format!("\nMean eta over all rows: {mean_eta:.3}\n\n![intra](intra.svg)\n![accumulation](accumulation.svg)\n![eta](eta.svg)\n"));
    write_text(dir, "report/report.md", &md)?;
    m.add("report", "report/report.md");
    m.summary = json!({ "passed": reports.iter().all(BoundReport::passed) });
    m.write(dir, "report-manifest.json")
}

/// Exit code for an error: 2 for usage, configuration and schema problems, 1 otherwise.
pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::Config { .. } | LabError::Schema(_) | LabError::InvalidMixture(_) | LabError::InvalidSchedule(_) => 2,
        LabError::Csv(_) => 2,
        _ => 1,
    }
}
