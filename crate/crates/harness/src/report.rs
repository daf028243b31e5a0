//! Report rows and their CSV/JSON serialization.

use crate::HarnessError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

/// One sweep point. Runtime is kept out of the serialized row so that
/// reports are byte-identical across runs; it goes to a timing sidecar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub digest: String,
    pub experiment: String,
    pub system: String,
    pub arch: String,
    pub sampling_factor: usize,
    pub dt: f64,
    /// Sensing mask as a 0/1 string, e.g. `01`.
    pub mask: String,
    pub perturbation: bool,
    /// Injected timing error, in samples at the experiment rate.
    pub injected_shift: f64,
    pub shift_search: bool,
    pub seed: u64,
    /// `ok`, or the failure message.
    pub status: String,
    pub rmse_theta: Option<f64>,
    pub rmse_y: Option<f64>,
    pub rmse_y_raw: Option<f64>,
    pub degradation_theta_pct: Option<f64>,
    pub degradation_y_pct: Option<f64>,
    /// `name=est-true` per coefficient.
    pub coeff_errors: Vec<(String, f64)>,
    /// Learned shifts in samples per shifted channel.
    pub shifts: Vec<f64>,
    /// Nonzero SINDYc terms absent from the system.
    pub spurious: usize,
    #[serde(skip)]
    pub runtime_s: f64,
}

impl ReportRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// Chosen by extension: `.json` gives JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

pub const CSV_HEADER: [&str; 20] = [
    "digest",
    "experiment",
    "system",
    "arch",
    "sampling_factor",
    "dt",
    "mask",
    "perturbation",
    "injected_shift",
    "shift_search",
    "rmse_theta",
    "rmse_y",
    "rmse_y_raw",
    "degradation_theta_pct",
    "degradation_y_pct",
    "shifts",
    "coeff_errors",
    "spurious",
    "seed",
    "status",
];

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_record(r: &ReportRow) -> Vec<String> {
    vec![
        r.digest.clone(),
        r.experiment.clone(),
        r.system.clone(),
        r.arch.clone(),
        r.sampling_factor.to_string(),
        num(r.dt),
        r.mask.clone(),
        r.perturbation.to_string(),
        num(r.injected_shift),
        r.shift_search.to_string(),
        opt(r.rmse_theta),
        opt(r.rmse_y),
        opt(r.rmse_y_raw),
        opt(r.degradation_theta_pct),
        opt(r.degradation_y_pct),
        r.shifts.iter().map(|s| num(*s)).collect::<Vec<_>>().join(";"),
        r.coeff_errors.iter().map(|(n, e)| format!("{n}={}", num(*e))).collect::<Vec<_>>().join(";"),
        r.spurious.to_string(),
        r.seed.to_string(),
        r.status.clone(),
    ]
}

/// Serializes rows in the given format.
pub fn render(rows: &[ReportRow], format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(rows).expect("rows serialize") + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory write");
            for r in rows {
                w.write_record(csv_record(r)).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
        }
    }
}

/// Path of the runtime sidecar for a report written to `path`.
pub fn timing_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".timing.csv");
    path.with_file_name(name)
}

/// Writes the report and a `<report>.timing.csv` sidecar with per-row runtimes.
pub fn emit_report(rows: &[ReportRow], format: Format, path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, render(rows, format)).map_err(|e| HarnessError::io(path, e))?;
    let mut timing = String::from("row,digest,runtime_s\n");
    for (i, r) in rows.iter().enumerate() {
        timing.push_str(&format!("{i},{},{:.3}\n", r.digest, r.runtime_s));
    }
    let tp = timing_path(path);
    fs::write(&tp, timing).map_err(|e| HarnessError::io(&tp, e))
}

/// Reads a JSON report back.
pub fn read_json_report(path: &Path) -> Result<Vec<ReportRow>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

/// Short hex SHA-256 of a serializable configuration.
pub fn digest<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ReportRow {
        ReportRow {
            digest: "ab".into(),
            experiment: "c1".into(),
            system: "lotka_volterra".into(),
            arch: "ltc".into(),
            sampling_factor: 10,
            dt: 5.0,
            mask: "01".into(),
            perturbation: true,
            status: "ok".into(),
            rmse_theta: Some(0.1),
            coeff_errors: vec![("a".into(), -0.25)],
            shifts: vec![3.5],
            runtime_s: 1.25,
            ..ReportRow::default()
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = render(&[], Format::Csv);
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("digest,experiment,system,arch,sampling_factor"));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let mut r = row();
        emit_report(std::slice::from_ref(&r), Format::Json, &p).unwrap();
        r.runtime_s = 0.0;
        assert_eq!(read_json_report(&p).unwrap(), vec![r]);
        assert!(timing_path(&p).exists());
    }

    #[test]
    fn csv_fields() {
        let text = render(&[row()], Format::Csv);
        let line = text.lines().nth(1).unwrap();
        assert!(line.contains("a=-0.25"));
        assert!(line.contains(",3.5,"));
        assert!(!line.contains("1.25"));
    }
}
