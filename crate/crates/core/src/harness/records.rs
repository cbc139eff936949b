//! Result records, CSV round-tripping, run manifests and failure markers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DnnProgressive,
    DnnFixed,
    Evd,
    Bcd,
    LowerBound,
    DnnTrainableRange,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::DnnProgressive,
        Method::DnnFixed,
        Method::Evd,
        Method::Bcd,
        Method::LowerBound,
        Method::DnnTrainableRange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DnnProgressive => "dnn-progressive",
            Method::DnnFixed => "dnn-fixed",
            Method::Evd => "evd",
            Method::Bcd => "bcd",
            Method::LowerBound => "lower-bound",
            Method::DnnTrainableRange => "dnn-trainable-range",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("methods", format!("unknown method `{s}`")))
    }

    /// Whether the method needs global CSI (every agent's channel) to design
    /// its compression.
    pub fn uses_global_csi(self) -> bool {
        matches!(self, Method::Bcd | Method::LowerBound)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One Monte Carlo point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub method: Method,
    #[serde(rename = "K")]
    pub k: usize,
    /// Quantizer bits, empty for unquantized runs.
    #[serde(rename = "Q")]
    pub q: Option<u32>,
    pub rho: f64,
    pub snr_db: f64,
    pub mse_mean: f64,
    pub mse_stderr: f64,
    pub n_eval: usize,
    pub cost_global_total: u64,
    pub cost_local_total: u64,
    #[serde(rename = "T")]
    pub t: usize,
    pub root_seed: u64,
    pub wall_time_s: f64,
}

pub const RECORD_COLUMNS: [&str; 13] = [
    "method",
    "K",
    "Q",
    "rho",
    "snr_db",
    "mse_mean",
    "mse_stderr",
    "n_eval",
    "cost_global_total",
    "cost_local_total",
    "T",
    "root_seed",
    "wall_time_s",
];

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.mse_stderr >= 0.0) {
            return Err(Error::Schema(format!(
                "{} K={}: negative mse_stderr",
                self.method, self.k
            )));
        }
        if self.n_eval == 0 {
            return Err(Error::Schema(format!("{} K={}: n_eval is zero", self.method, self.k)));
        }
        Ok(())
    }
}

/// Serializes rows with a header into CSV bytes.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Schema(format!("csv buffer: {}", e.error())))
}

/// Like [`to_csv`], but still writes `header` when there are no rows.
pub fn to_csv_headed<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    if !rows.is_empty() {
        return to_csv(rows);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    w.into_inner()
        .map_err(|e| Error::Schema(format!("csv buffer: {}", e.error())))
}

/// Checks that every required column is present; names the first missing one.
pub fn require_columns(headers: &csv::StringRecord, required: &[&str], what: &str) -> Result<()> {
    for col in required {
        if !headers.iter().any(|h| h == *col) {
            return Err(Error::Schema(format!("{what} lacks column `{col}`")));
        }
    }
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path, required: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    require_columns(r.headers()?, required, &path.display().to_string())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let records: Vec<ExperimentRecord> = read_csv(path, &RECORD_COLUMNS)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Provenance written next to every CSV before its results.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Full configuration, one `key = value` per line.
    pub config: String,
    pub checkpoints: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub revision: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: String) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command: command.to_string(),
            config,
            checkpoints: Vec::new(),
            outputs: Vec::new(),
            revision: source_revision(),
            timestamp,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "command = {}\nrevision = {}\ntimestamp = {}\n",
            self.command, self.revision, self.timestamp
        );
        for p in &self.checkpoints {
            s += &format!("checkpoint = {}\n", p.display());
        }
        for p in &self.outputs {
            s += &format!("output = {}\n", p.display());
        }
        for line in self.config.lines() {
            s += &format!("config.{line}\n");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Package version plus the git commit when the binary runs inside a checkout.
fn source_revision() -> String {
    let version = env!("CARGO_PKG_VERSION");
    let commit = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match commit {
        Some(c) if !c.is_empty() => format!("{version}+{c}"),
        _ => version.to_string(),
    }
}

/// Path of the marker left when a run producing `output` fails.
pub fn failure_marker(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".FAILED");
    output.with_file_name(name)
}

/// Writes `bytes` to `path` via a temporary file so a crash never leaves a
/// truncated result behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let marker = failure_marker(path);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    Ok(())
}

/// Runs `body`; on error leaves a marker next to `output` describing it.
pub fn guarded<T>(output: &Path, body: impl FnOnce() -> Result<T>) -> Result<T> {
    match body() {
        Ok(v) => Ok(v),
        Err(e) => {
            let marker = failure_marker(output);
            // the original error matters more than a failed marker write
            let _ = fs::write(&marker, format!("run failed: {e}\n"));
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: Method, k: usize) -> ExperimentRecord {
        ExperimentRecord {
            method,
            k,
            q: Some(6),
            rho: 0.5,
            snr_db: -3.0,
            mse_mean: 0.1 + 1.0 / 3.0 * k as f64,
            mse_stderr: 1e-3 / 7.0,
            n_eval: 100_000,
            cost_global_total: 1444,
            cost_local_total: 840,
            t: 200,
            root_seed: u64::MAX,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let mut rows: Vec<_> = Method::ALL.iter().map(|&m| record(m, 2)).collect();
        rows[1].q = None;
        rows[2].mse_mean = f64::MIN_POSITIVE;
        let bytes = to_csv(&rows).unwrap();
        let header = String::from_utf8(bytes.clone()).unwrap();
        assert!(header.starts_with(&RECORD_COLUMNS.join(",")));
        write_atomic(&path, &bytes).unwrap();
        assert_eq!(read_records(&path).unwrap(), rows);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "method,K\nevd,1\n").unwrap();
        match read_records(&path) {
            Err(Error::Schema(m)) => assert!(m.contains("`Q`"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn failures_leave_a_marker() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.csv");
        let r: Result<()> = guarded(&out, || Err(Error::Numerical("boom".into())));
        assert!(r.is_err());
        assert!(!out.exists());
        let marker = failure_marker(&out);
        assert!(fs::read_to_string(&marker).unwrap().contains("boom"));
        write_atomic(&out, b"a\n").unwrap();
        assert!(!marker.exists());
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("pca").is_err());
    }

    #[test]
    fn manifest_lists_config() {
        let mut m = RunManifest::new("sweep-k", "M = 4\nN = 2\n".into());
        m.outputs.push("sweep.csv".into());
        let text = m.render();
        assert!(text.contains("config.M = 4\n"));
        assert!(text.contains("output = sweep.csv\n"));
    }
}
