//! CSV series and the JSON manifest describing them.
//!
//! Every series file is `step,value` with floats in shortest round-trip form,
//! so parsing a file back yields the in-memory values exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::MetricsLog;
use crate::error::{Error, Result};
use crate::sparse_coding::StageLog;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesFile {
    pub series: String,
    pub file: String,
    pub rows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportManifest {
    /// The run configuration exactly as it was supplied.
    pub config: Box<RawValue>,
    pub seed: u64,
    pub files: Vec<SeriesFile>,
    /// End step of the trailing partial window, when there is one.
    pub partial_window_end: Option<usize>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Csv {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Writes a `step,value` CSV.
pub fn write_series(path: impl AsRef<Path>, points: &[(f64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["step", "value"]).map_err(|e| csv_error(path, e))?;
    for (s, v) in points {
        w.write_record([s.to_string(), v.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a `step,value` CSV. Errors carry the 1-based line number.
pub fn read_series(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Csv {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", record.len())));
        }
        let parse = |i: usize| {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("cannot parse {:?} as a number", &record[i])))
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

fn series_of(log: &MetricsLog) -> Vec<(&'static str, Vec<(f64, f64)>)> {
    let win = |f: fn(&super::WindowMean) -> f64| -> Vec<(f64, f64)> {
        log.windows.iter().map(|w| (w.end as f64, f(w))).collect()
    };
    let epoch = |f: fn(&super::EpochRecord) -> f64| -> Vec<(f64, f64)> {
        log.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect()
    };
    let steps = |v: &[f64]| -> Vec<(f64, f64)> {
        v.iter().enumerate().map(|(i, &x)| ((i + 1) as f64, x)).collect()
    };
    vec![
        ("grad_window", win(|w| w.grad)),
        ("weight_window", win(|w| w.weight)),
        ("loss_window", win(|w| w.loss)),
        ("grad_step", steps(&log.step_grad)),
        ("weight_step", steps(&log.step_weight)),
        ("loss_step", steps(&log.step_loss)),
        ("grad_cumulative", epoch(|e| e.cumulative_grad)),
        ("weight_cumulative", epoch(|e| e.cumulative_weight)),
        ("train_loss", epoch(|e| e.train_loss)),
        ("test_accuracy", epoch(|e| e.test_accuracy)),
        (
            "sparsity",
            log.mask_updates
                .iter()
                .map(|u| (u.step as f64, u.realized))
                .collect(),
        ),
        (
            "target_sparsity",
            log.mask_updates
                .iter()
                .map(|u| (u.step as f64, u.target))
                .collect(),
        ),
    ]
}

/// Writes one CSV per series plus `manifest.json` into `dir`.
///
/// `config_json` must be valid JSON; it is echoed into the manifest verbatim.
pub fn export_metrics(log: &MetricsLog, dir: impl AsRef<Path>, config_json: &str, seed: u64) -> Result<ExportManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = RawValue::from_string(config_json.to_string())?;
    let mut files = Vec::new();
    for (name, points) in series_of(log) {
        let file = format!("{name}.csv");
        write_series(dir.join(&file), &points)?;
        files.push(SeriesFile {
            series: name.to_string(),
            file,
            rows: points.len(),
        });
    }
    let manifest = ExportManifest {
        config,
        seed,
        files,
        partial_window_end: log.windows.last().filter(|w| w.partial).map(|w| w.end),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<ExportManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One row per stage with the start and end value of every energy term.
pub fn export_stage_log(log: &StageLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["stage".to_string(), "pruned".into(), "reactivated".into(), "active".into()];
    for when in ["start", "end"] {
        for term in ["direct", "data", "compensation", "cross", "sparsity"] {
            header.push(format!("{when}_{term}"));
        }
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in &log.records {
        let mut row = vec![
            r.stage.to_string(),
            r.pruned.to_string(),
            r.reactivated.to_string(),
            r.active.to_string(),
        ];
        for e in [&r.start, &r.end] {
            for v in [e.direct, e.data_residual, e.compensation, e.cross, e.sparsity] {
                row.push(v.to_string());
            }
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
