//! Generation-ablation contributions `Contrib[k, n]` for a short horizon,
//! written as an SVG heatmap.

use collapse_lab::recursion::{baseline_only, heatmap, RunConfig};
use collapse_lab::{svg, DiffusionSchedule};

fn main() -> collapse_lab::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.alpha = 0.9;
    cfg.n_train = 600;
    cfg.n_energy = 200;
    cfg.schedule = DiffusionSchedule {
        n_steps: 60,
        ..DiffusionSchedule::default()
    };
    let horizon = 4;
    let base = baseline_only(&cfg, cfg.seed(0), horizon)?;
    let map = heatmap(&cfg, &base, horizon)?;

    for (n, row) in map.matrix.iter().enumerate() {
        let cells: Vec<String> = row[..n].iter().map(|c| format!("{:>8.4}", c.value)).collect();
        println!("n = {n}: D = {:.4} | {}", map.baseline[n].value, cells.join(" "));
    }
    for lag in 1..=3 {
        if let Some(m) = map.mean_abs_at_lag(lag) {
            println!("mean |Contrib| at lag {lag}: {m:.4}");
        }
    }
    let values: Vec<Vec<f64>> = map.matrix.iter().map(|r| r.iter().map(|c| c.value).collect()).collect();
    let path = std::env::temp_dir().join("collapse_lab_heatmap.svg");
    std::fs::write(&path, svg::heatmap(&values, "Contrib[k, n]", "n", "k"))?;
    println!("wrote {}", path.display());
    Ok(())
}
