use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::identities::ResidualReport;

pub const CSV_COLUMNS: [&str; 12] = [
    "test",
    "N",
    "observable",
    "estimate",
    "thermal_var",
    "quenched_var",
    "total_var",
    "se",
    "bound",
    "pass",
    "seed",
    "config_hash",
];

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub test: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub observable: String,
    pub estimate: Option<f64>,
    pub thermal_var: Option<f64>,
    pub quenched_var: Option<f64>,
    pub total_var: Option<f64>,
    pub se: Option<f64>,
    pub bound: Option<f64>,
    pub pass: Option<bool>,
    pub seed: u64,
    pub config_hash: String,
}

impl Row {
    pub fn blank(test: &str, n: usize, observable: &str, seed: u64, hash: &str) -> Row {
        Row {
            test: test.into(),
            n,
            observable: observable.into(),
            estimate: None,
            thermal_var: None,
            quenched_var: None,
            total_var: None,
            se: None,
            bound: None,
            pass: None,
            seed,
            config_hash: hash.into(),
        }
    }

    /// `estimate` is the residual; `bound` is the bound, or the tolerance for exact identities.
    pub fn from_report(r: &ResidualReport, seed: u64, hash: &str) -> Row {
        Row {
            estimate: Some(r.residual),
            se: Some(r.se),
            bound: r.tol.or(r.bound),
            pass: Some(r.pass),
            ..Row::blank(&r.name, r.n, &r.observable, seed, hash)
        }
    }

    pub fn failed(&self) -> bool {
        self.pass == Some(false)
    }

    fn fields(&self) -> [String; 12] {
        [
            self.test.clone(),
            self.n.to_string(),
            self.observable.clone(),
            num(self.estimate),
            num(self.thermal_var),
            num(self.quenched_var),
            num(self.total_var),
            num(self.se),
            num(self.bound),
            self.pass.map_or_else(String::new, |p| p.to_string()),
            self.seed.to_string(),
            self.config_hash.clone(),
        ]
    }
}

/// Shortest round-trip decimal; empty when absent.
pub fn num(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:?}"))
}

pub fn csv_bytes(rows: &[Row]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| LabError::Io(std::io::Error::other(e));
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record(r.fields()).map_err(io)?;
    }
    w.into_inner().map_err(|e| LabError::Io(std::io::Error::other(e.to_string())))
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    pass: bool,
    rows: &'a [Row],
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub test: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub seconds: f64,
}

#[derive(Serialize)]
struct FileEntry {
    name: &'static str,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    pass: bool,
    files: Vec<FileEntry>,
    timings: &'a [Timing],
    total_seconds: f64,
    finished_unix: u64,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `results.csv`, `report.json` and `manifest.json` into `dir`.
/// Only the manifest carries timings.
pub fn write_outputs(dir: &Path, command: &str, hash: &str, seed: u64, rows: &[Row], timings: &[Timing]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let pass = !rows.iter().any(Row::failed);
    let version = env!("CARGO_PKG_VERSION");
    let csv = csv_bytes(rows)?;
    let mut report = serde_json::to_vec_pretty(&Report { command, version, config_hash: hash, seed, pass, rows })?;
    report.push(b'\n');
    std::fs::write(dir.join("results.csv"), &csv)?;
    std::fs::write(dir.join("report.json"), &report)?;
    let manifest = Manifest {
        command,
        version,
        config_hash: hash,
        seed,
        pass,
        files: vec![
            FileEntry { name: "results.csv", sha256: sha_hex(&csv) },
            FileEntry { name: "report.json", sha256: sha_hex(&report) },
        ],
        timings,
        total_seconds: timings.iter().map(|t| t.seconds).sum(),
        finished_unix: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let mut m = serde_json::to_vec_pretty(&manifest)?;
    m.push(b'\n');
    std::fs::write(dir.join("manifest.json"), m)?;
    Ok(())
}
