//! Run records and report emission.
//!
//! Every experiment run writes one `RunRecord` (versioned JSON) plus an
//! optional per-component metric CSV with a fixed header. Records are
//! immutable once written: re-running into the same directory with the same
//! config hash is a no-op.

use crate::attribution::AlphaValue;
use crate::error::{FcxError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CSV_HEADER: &str =
    "depth,component,rho_c,rho_reli,phi_train,phi_overfit,alpha_eff,alpha_overfit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = FcxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(FcxError::UnsupportedFormat(other.to_string())),
        }
    }
}

/// One metric row of the per-component table; missing values serialize as
/// empty CSV fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub depth: usize,
    pub component: usize,
    pub rho_c: Option<f64>,
    pub rho_reli: Option<f64>,
    pub phi_train: Option<f64>,
    pub phi_overfit: Option<f64>,
    pub alpha_eff: Option<f64>,
    pub alpha_overfit: Option<f64>,
}

impl MetricRow {
    pub fn set_alpha_eff(&mut self, v: &AlphaValue) {
        self.alpha_eff = v.as_defined();
    }

    pub fn set_alpha_overfit(&mut self, v: &AlphaValue) {
        self.alpha_overfit = v.as_defined();
    }
}

/// Immutable record of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Free-form metric tables keyed by name.
    pub metrics: serde_json::Value,
    pub metric_rows: Vec<MetricRow>,
    pub artifact_paths: Vec<String>,
    pub wall_clock_secs: f64,
}

/// Canonical SHA-256 of a serializable config (hex).
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let v = serde_json::to_value(config)?;
    let bytes = serde_json::to_vec(&v)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_lower(&hasher.finalize()))
}

fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.depth,
            r.component,
            opt(&r.rho_c),
            opt(&r.rho_reli),
            opt(&r.phi_train),
            opt(&r.phi_overfit),
            opt(&r.alpha_eff),
            opt(&r.alpha_overfit),
        ));
    }
    out
}

/// Canonical JSON bytes of the record (object keys sorted).
pub fn record_to_json(run: &RunRecord) -> Result<Vec<u8>> {
    let v = serde_json::to_value(run)?;
    let mut bytes = serde_json::to_vec_pretty(&v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `run.<ext>` under `dir`. Byte-stable for a fixed record.
pub fn emit_report(run: &RunRecord, dir: &Path, format: ReportFormat) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = match format {
        ReportFormat::Json => {
            let p = dir.join("run.json");
            std::fs::write(&p, record_to_json(run)?)?;
            p
        }
        ReportFormat::Csv => {
            let p = dir.join("metrics.csv");
            std::fs::write(&p, rows_to_csv(&run.metric_rows))?;
            p
        }
    };
    Ok(path)
}

/// True when `dir` already holds a completed run with this config hash;
/// runners treat that as "nothing to do".
pub fn is_complete(dir: &Path, hash: &str) -> bool {
    let p = dir.join("run.json");
    let Ok(bytes) = std::fs::read(&p) else { return false };
    let Ok(record) = serde_json::from_slice::<RunRecord>(&bytes) else { return false };
    record.config_hash == hash
}

pub fn load_record(dir: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(dir.join("run.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> RunRecord {
        RunRecord {
            schema_version: REPORT_SCHEMA_VERSION,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            experiment: "unit".into(),
            config_hash: "abc".into(),
            seeds: vec![1, 2, 3],
            metrics: serde_json::json!({"rho": [0.5, 0.25]}),
            metric_rows: vec![
                MetricRow {
                    depth: 4,
                    component: 1,
                    rho_c: Some(0.5),
                    rho_reli: Some(0.8),
                    phi_train: Some(0.1),
                    phi_overfit: None,
                    alpha_eff: Some(2.0),
                    alpha_overfit: None,
                },
                MetricRow { depth: 7, component: 2, ..Default::default() },
            ],
            artifact_paths: vec!["metrics.csv".into()],
            wall_clock_secs: 1.5,
        }
    }

    #[test]
    fn json_roundtrip_preserves_record() {
        let run = sample_record();
        let bytes = record_to_json(&run).unwrap();
        let back: RunRecord = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back.config_hash, run.config_hash);
        assert_eq!(back.seeds, run.seeds);
        assert_eq!(back.metrics, run.metrics);
        assert_eq!(back.metric_rows.len(), 2);
        // byte-stable
        assert_eq!(bytes, record_to_json(&back).unwrap());
    }

    #[test]
    fn csv_layout_and_missing_fields() {
        let run = sample_record();
        let csv = rows_to_csv(&run.metric_rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let row1 = lines.next().unwrap();
        assert_eq!(row1, "4,1,0.5,0.8,0.1,,2,");
        let row2 = lines.next().unwrap();
        assert_eq!(row2, "7,2,,,,,,");
        assert_eq!(csv.lines().count(), 1 + run.metric_rows.len());
    }

    #[test]
    fn unknown_format_rejected() {
        let err = "yaml".parse::<ReportFormat>();
        assert!(matches!(err, Err(FcxError::UnsupportedFormat(_))));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = serde_json::json!({"x": 1, "y": [1, 2]});
        let b = serde_json::json!({"y": [1, 2], "x": 1});
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        let c = serde_json::json!({"x": 2, "y": [1, 2]});
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
    }

    #[test]
    fn resumability_marker() {
        let dir = tempfile::tempdir().unwrap();
        let run = sample_record();
        assert!(!is_complete(dir.path(), "abc"));
        emit_report(&run, dir.path(), ReportFormat::Json).unwrap();
        assert!(is_complete(dir.path(), "abc"));
        assert!(!is_complete(dir.path(), "other"));
    }
}
