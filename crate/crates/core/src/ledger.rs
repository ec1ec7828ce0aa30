//! Flat per-generation ledger rows and their CSV form.
//!
//! The first line of a ledger file is a `#` comment naming the schema version;
//! readers refuse any other version. Floats are written in shortest round-trip
//! form, so a ledger read back compares equal to the one written.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::recursion::{Flags, GenerationRecord};
use crate::stats::Estimate;

pub const SCHEMA: &str = "collapse-lab ledger v1";

/// One generation of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub seed: u64,
    pub generation: usize,
    pub alpha: f64,
    pub eps_star_sq: f64,
    pub eps_star_se: f64,
    pub eps_hat_sq: f64,
    pub eps_hat_se: f64,
    pub eta: f64,
    pub eta_se: f64,
    #[serde(rename = "I_chi2")]
    pub i_chi2: f64,
    #[serde(rename = "I_chi2_se")]
    pub i_chi2_se: f64,
    #[serde(rename = "I_kl")]
    pub i_kl: f64,
    #[serde(rename = "I_kl_se")]
    pub i_kl_se: f64,
    #[serde(rename = "D_chi2")]
    pub d_chi2: f64,
    #[serde(rename = "D_chi2_se")]
    pub d_chi2_se: f64,
    pub flags: String,
    /// Out-of-fold R^2 of the observability regressor.
    pub eta_r2: f64,
    pub d_smooth: f64,
    pub d_smooth_se: f64,
    pub q_smooth: f64,
    pub q_smooth_se: f64,
    pub var_m: f64,
    pub var_m_se: f64,
    pub mean_qv: f64,
    pub mean_qv_se: f64,
    pub girsanov_mean: f64,
    pub girsanov_se: f64,
    pub sample_ref: String,
}

impl LedgerRow {
    pub fn eps_star(&self) -> Estimate {
        Estimate::new(self.eps_star_sq, self.eps_star_se)
    }

    pub fn eps_hat(&self) -> Estimate {
        Estimate::new(self.eps_hat_sq, self.eps_hat_se)
    }

    pub fn eta_est(&self) -> Estimate {
        Estimate::new(self.eta, self.eta_se)
    }

    pub fn i_chi2_est(&self) -> Estimate {
        Estimate::new(self.i_chi2, self.i_chi2_se)
    }

    pub fn i_kl_est(&self) -> Estimate {
        Estimate::new(self.i_kl, self.i_kl_se)
    }

    pub fn d_chi2_est(&self) -> Estimate {
        Estimate::new(self.d_chi2, self.d_chi2_se)
    }

    pub fn d_smooth_est(&self) -> Estimate {
        Estimate::new(self.d_smooth, self.d_smooth_se)
    }

    pub fn q_smooth_est(&self) -> Estimate {
        Estimate::new(self.q_smooth, self.q_smooth_se)
    }

    pub fn parsed_flags(&self) -> Result<Flags> {
        Flags::decode(&self.flags)
    }

    /// A row with every error quantity zero, for fixtures.
    pub fn zero(seed: u64, generation: usize, alpha: f64) -> Self {
        LedgerRow {
            seed,
            generation,
            alpha,
            eps_star_sq: 0.0,
            eps_star_se: 0.0,
            eps_hat_sq: 0.0,
            eps_hat_se: 0.0,
            eta: 0.0,
            eta_se: 0.0,
            i_chi2: 0.0,
            i_chi2_se: 0.0,
            i_kl: 0.0,
            i_kl_se: 0.0,
            d_chi2: 0.0,
            d_chi2_se: 0.0,
            flags: String::new(),
            eta_r2: 0.0,
            d_smooth: 0.0,
            d_smooth_se: 0.0,
            q_smooth: 0.0,
            q_smooth_se: 0.0,
            var_m: 0.0,
            var_m_se: 0.0,
            mean_qv: 0.0,
            mean_qv_se: 0.0,
            girsanov_mean: 1.0,
            girsanov_se: 0.0,
            sample_ref: String::new(),
        }
    }
}

impl From<&GenerationRecord> for LedgerRow {
    fn from(r: &GenerationRecord) -> Self {
        LedgerRow {
            seed: r.seed,
            generation: r.generation,
            alpha: r.alpha,
            eps_star_sq: r.eps_star_sq.value,
            eps_star_se: r.eps_star_sq.se,
            eps_hat_sq: r.eps_hat_sq.value,
            eps_hat_se: r.eps_hat_sq.se,
            eta: r.eta.eta,
            eta_se: r.eta.se,
            i_chi2: r.i_chi2.value,
            i_chi2_se: r.i_chi2.std_error,
            i_kl: r.i_kl.value,
            i_kl_se: r.i_kl.std_error,
            d_chi2: r.d_chi2.value,
            d_chi2_se: r.d_chi2.std_error,
            flags: r.flags.encode(),
            eta_r2: r.eta.r_squared,
            d_smooth: r.d_smooth.value,
            d_smooth_se: r.d_smooth.std_error,
            q_smooth: r.q_smooth.value,
            q_smooth_se: r.q_smooth.std_error,
            var_m: r.var_m.value,
            var_m_se: r.var_m.se,
            mean_qv: r.mean_quad_var.value,
            mean_qv_se: r.mean_quad_var.se,
            girsanov_mean: r.girsanov_mean.value,
            girsanov_se: r.girsanov_mean.se,
            sample_ref: r.sample_ref.clone().unwrap_or_default(),
        }
    }
}

pub fn write_ledger<W: Write>(mut out: W, rows: &[LedgerRow]) -> Result<()> {
    writeln!(out, "# {SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        // serde only emits the header with the first record
        w.write_record(HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger<R: Read>(input: R) -> Result<Vec<LedgerRow>> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    let version = first.trim_end().strip_prefix('#').map(str::trim);
    if version != Some(SCHEMA) {
        return Err(LabError::Schema(format!(
            "expected header comment `# {SCHEMA}`, found `{}`",
            first.trim_end()
        )));
    }
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let missing: Vec<&str> = HEADER.iter().copied().filter(|h| !header.iter().any(|c| c == *h)).collect();
    if !missing.is_empty() {
        return Err(LabError::Schema(format!("missing columns: {}", missing.join(", "))));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.deserialize().enumerate() {
        let row: LedgerRow = rec.map_err(|e| LabError::Schema(format!("row {}: {e}", line + 1)))?;
        row.parsed_flags()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_ledger(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_ledger(std::io::BufWriter::new(f), rows)
}

pub fn load_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    read_ledger(std::fs::File::open(path)?)
}

/// Column names, in order.
pub const HEADER: &[&str] = &[
    "seed",
    "generation",
    "alpha",
    "eps_star_sq",
    "eps_star_se",
    "eps_hat_sq",
    "eps_hat_se",
    "eta",
    "eta_se",
    "I_chi2",
    "I_chi2_se",
    "I_kl",
    "I_kl_se",
    "D_chi2",
    "D_chi2_se",
    "flags",
    "eta_r2",
    "d_smooth",
    "d_smooth_se",
    "q_smooth",
    "q_smooth_se",
    "var_m",
    "var_m_se",
    "mean_qv",
    "mean_qv_se",
    "girsanov_mean",
    "girsanov_se",
    "sample_ref",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<LedgerRow> {
        let mut a = LedgerRow::zero(7, 0, 0.5);
        a.eps_star_sq = 0.1 + 0.2;
        a.d_chi2 = 1e-300;
        a.flags = "underflow=2;separable".into();
        a.sample_ref = "stores/seed7_gen0.f64".into();
        let b = LedgerRow::zero(7, 1, 0.5);
        vec![a, b]
    }

    #[test]
    fn round_trip_is_exact() {
        let mut buf = Vec::new();
        write_ledger(&mut buf, &sample_rows()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# collapse-lab ledger v1\nseed,generation,alpha,eps_star_sq,"));
        assert_eq!(read_ledger(&buf[..]).unwrap(), sample_rows());
    }

    #[test]
    fn header_matches_struct_order() {
        let mut buf = Vec::new();
        write_ledger(&mut buf, &sample_rows()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().nth(1).unwrap();
        assert_eq!(header, HEADER.join(","));
        let mut empty = Vec::new();
        write_ledger(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().lines().nth(1).unwrap(), header);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = "# collapse-lab ledger v0\nseed\n";
        assert!(matches!(read_ledger(text.as_bytes()), Err(LabError::Schema(_))));
    }

    #[test]
    fn missing_column_is_rejected() {
        let text = "# collapse-lab ledger v1\nseed,generation\n1,0\n";
        let err = read_ledger(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("eps_star_sq"), "{err}");
    }
}
