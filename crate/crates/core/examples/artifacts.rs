//! Sample stores and ledgers round-trip through their on-disk formats.

use collapse_lab::ledger::{load_ledger, save_ledger, LedgerRow, HEADER};
use collapse_lab::store::{read_store, sidecar_path, write_store};
use collapse_lab::{GaussianMixture, Stream};

fn main() -> collapse_lab::Result<()> {
    let dir = std::env::temp_dir().join("collapse_lab_artifacts");
    std::fs::create_dir_all(&dir)?;

    let samples = GaussianMixture::five_cluster(10)?.sample(100, &mut Stream::new(5).rng());
    let path = dir.join("seed5_gen0.f64");
    let meta = write_store(&path, &samples, 5, 0)?;
    let (back, _) = read_store(&path)?;
    assert_eq!(back, samples);
    println!("{} rows x {} -> {} ({})", meta.n, meta.dim, path.display(), sidecar_path(&path).display());
    println!("sha256 {}", meta.sha256);

    let rows: Vec<LedgerRow> = (0..3).map(|g| LedgerRow::zero(5, g, 0.5)).collect();
    let ledger = dir.join("ledger.csv");
    save_ledger(&ledger, &rows)?;
    assert_eq!(load_ledger(&ledger)?, rows);
    println!("{}", HEADER.join(","));
    print!("{}", std::fs::read_to_string(&ledger)?.lines().nth(2).unwrap_or_default());
    println!();
    Ok(())
}
