//! The `collapse-lab` binary end to end: artifacts, exit codes and reproducibility.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use collapse_lab::app::Manifest;
use collapse_lab::ledger::{save_ledger, LedgerRow};
use collapse_lab::store::read_store;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_collapse-lab"));
    c.env_remove("COLLAPSE_LAB_THREADS");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn write_config(dir: &Path, alpha: f64) -> String {
    let name = format!("tiny_{alpha}.json");
    std::fs::write(dir.join(&name), common::tiny_json(alpha)).unwrap();
    name
}

#[test]
fn run_writes_ledger_stores_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.5);
    let o = run(&["run", "--config", &cfg, "--seed", "4", "--out", "a"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let out = dir.path().join("a");
    let ledger = std::fs::read_to_string(out.join("ledger.csv")).unwrap();
    assert!(ledger.starts_with("# collapse-lab ledger v1\n"));
    assert_eq!(ledger.lines().count(), 2 + 3);

    let m = Manifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.command, "run");
    assert_eq!(m.master_seed, Some(4));
    assert_eq!(m.config_hash.len(), 64);
    for f in &m.files {
        assert!(out.join(&f.path).is_file(), "missing {}", f.path);
    }
    let stores: Vec<_> = m.files.iter().filter(|f| f.kind == "sample_store").collect();
    assert_eq!(stores.len(), 4);
    let (s, meta) = read_store(&out.join(&stores[1].path)).unwrap();
    assert_eq!((s.len(), s.dim(), meta.generation), (300, 2, 1));
}

#[test]
fn reruns_are_byte_identical_and_ignore_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.5);
    assert_eq!(code(&run(&["run", "--config", &cfg, "--out", "a", "--no-stores"], dir.path())), 0);
    let o = bin()
        .args(["run", "--config", &cfg, "--out", "b", "--no-stores"])
        .env("COLLAPSE_LAB_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let a = std::fs::read(dir.path().join("a/ledger.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/ledger.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn alpha_sweep_gives_distinct_hashes_and_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    let mut ledgers = Vec::new();
    for alpha in [0.1, 0.5, 0.9] {
        let cfg = write_config(dir.path(), alpha);
        let out = format!("a{alpha}");
        assert_eq!(code(&run(&["run", "--config", &cfg, "--out", &out, "--no-stores"], dir.path())), 0);
        hashes.push(Manifest::read(&dir.path().join(&out).join("manifest.json")).unwrap().config_hash);
        ledgers.push(std::fs::read(dir.path().join(&out).join("ledger.csv")).unwrap());
    }
    for i in 0..3 {
        for j in i + 1..3 {
            assert_ne!(hashes[i], hashes[j]);
            assert_ne!(ledgers[i], ledgers[j]);
        }
    }
}

#[test]
fn verify_passes_the_zero_fixture_and_fails_an_adversarial_one() {
    let dir = tempfile::tempdir().unwrap();
    let zero: Vec<LedgerRow> = (0..6).map(|g| LedgerRow::zero(1, g, 0.5)).collect();
    save_ledger(&dir.path().join("zero.csv"), &zero).unwrap();
    let o = run(&["verify", "zero.csv", "--out", "z"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("z/bounds.csv").is_file());
    assert!(dir.path().join("z/verify-manifest.json").is_file());

    let mut bad = zero.clone();
    bad[2].i_kl = 5.0;
    bad[2].i_kl_se = 0.01;
    bad[2].eps_hat_sq = 1.0;
    bad[2].eps_hat_se = 0.01;
    save_ledger(&dir.path().join("bad.csv"), &bad).unwrap();
    let o = run(&["verify", "bad.csv", "--out", "b"], dir.path());
    assert_eq!(code(&o), 1);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL"), "{stdout}");
    let bounds = std::fs::read_to_string(dir.path().join("b/bounds.csv")).unwrap();
    assert!(bounds.lines().any(|l| l.contains("upper") && l.ends_with("false")), "{bounds}");
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&run(&["run", "--profile", "huge"], dir.path())), 2);

    std::fs::write(dir.path().join("bad.json"), r#"{"alpha": 1.5}"#).unwrap();
    assert_eq!(code(&run(&["run", "--config", "bad.json"], dir.path())), 2);
    std::fs::write(dir.path().join("typo.json"), r#"{"n_trian": 10}"#).unwrap();
    assert_eq!(code(&run(&["run", "--config", "typo.json"], dir.path())), 2);
    assert_eq!(code(&run(&["run", "--config", "missing.json"], dir.path())), 2);

    let cfg = write_config(dir.path(), 0.5);
    let o = bin()
        .args(["run", "--config", &cfg])
        .env("COLLAPSE_LAB_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);

    std::fs::write(dir.path().join("old.csv"), "# collapse-lab ledger v0\nseed\n").unwrap();
    assert_eq!(code(&run(&["verify", "old.csv"], dir.path())), 2);
}

fn svg_cells(svg: &str) -> Vec<(usize, usize, f64)> {
    svg.lines()
        .filter(|l| l.contains(r#"class="cell""#))
        .map(|l| {
            let attr = |name: &str| {
                let key = format!(r#"{name}=""#);
                let start = l.find(&key).unwrap() + key.len();
                let end = start + l[start..].find('"').unwrap();
                l[start..end].to_string()
            };
            (attr("data-row").parse().unwrap(), attr("data-col").parse().unwrap(), attr("data-value").parse().unwrap())
        })
        .collect()
}

#[test]
fn heatmap_csv_and_svg_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.9);
    let o = run(&["heatmap", "--config", &cfg, "--out", "h", "--generations", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("h");
    let seed = Manifest::read(&out.join("heatmap-manifest.json")).unwrap().master_seed.unwrap();

    let mut reader = csv::Reader::from_path(out.join(format!("heatmap_seed{seed}.csv"))).unwrap();
    let mut from_csv = Vec::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let n: usize = rec[0].parse().unwrap();
        let k: usize = rec[1].parse().unwrap();
        let lag: usize = rec[2].parse().unwrap();
        assert_eq!(lag, n - k);
        from_csv.push((n, k, rec[3].parse::<f64>().unwrap()));
    }
    let svg = std::fs::read_to_string(out.join(format!("heatmap_seed{seed}.svg"))).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    let mut from_svg = svg_cells(&svg);
    from_csv.sort_by_key(|c| (c.0, c.1));
    from_svg.sort_by_key(|c| (c.0, c.1));
    assert_eq!(from_csv.len(), 3 * 4 / 2);
    assert_eq!(from_csv, from_svg);
}

#[test]
fn probe_and_report_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.5);
    assert_eq!(code(&run(&["probe", "--config", &cfg, "--out", "p"], dir.path())), 0);
    let probe = std::fs::read_to_string(dir.path().join("p/probe.csv")).unwrap();
    let zero = probe.lines().find(|l| l.starts_with("zero_control")).unwrap();
    assert_eq!(zero.split(',').nth(3).unwrap().parse::<f64>().unwrap(), 0.0);
    assert!(dir.path().join("p/probe.svg").is_file());

    assert_eq!(code(&run(&["run", "--config", &cfg, "--out", "p", "--no-stores"], dir.path())), 0);
    let o = run(&["report", "--out", "p"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report/report.md", "report/intra.svg", "report/accumulation.svg", "report/eta.svg", "report-manifest.json"] {
        assert!(dir.path().join("p").join(f).is_file(), "missing {f}");
    }
    assert_eq!(code(&run(&["report", "--out", "nowhere"], dir.path())), 2);
    assert_eq!(code(&run(&["verify", "nowhere.csv"], dir.path())), 2);
}
