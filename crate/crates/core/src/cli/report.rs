//! Metric reports as `(task, model, seed, metric, value)` records, written
//! as JSON lines and CSV, plus run manifests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub task: String,
    pub model: String,
    pub seed: u64,
    pub metric: String,
    /// `None` when the metric is undefined (e.g. no positives).
    pub value: Option<f64>,
}

/// Accumulates records sharing one task/model/seed.
#[derive(Clone, Debug)]
pub struct Report {
    task: String,
    model: String,
    seed: u64,
    records: Vec<MetricRecord>,
}

impl Report {
    pub fn new(cfg: &RunConfig, model: &str) -> Self {
        Self { task: cfg.task.to_string(), model: model.into(), seed: cfg.seed, records: Vec::new() }
    }

    pub fn push(&mut self, metric: impl Into<String>, value: Option<f64>) {
        self.records.push(MetricRecord {
            task: self.task.clone(),
            model: self.model.clone(),
            seed: self.seed,
            metric: metric.into(),
            value,
        });
    }

    /// Same task and seed, different model column.
    pub fn with_model(&self, model: &str) -> Self {
        Self { task: self.task.clone(), model: model.into(), seed: self.seed, records: Vec::new() }
    }

    pub fn extend(&mut self, other: Report) {
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// Writes `<stem>.jsonl` and `<stem>.csv` in `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_jsonl(&dir.join(format!("{stem}.jsonl")), &self.records)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv"))).map_err(csv_error)?;
        w.write_record(["task", "model", "seed", "metric", "value"]).map_err(csv_error)?;
        for r in &self.records {
            let value = r.value.map_or_else(|| "NA".to_string(), |v| v.to_string());
            w.write_record([r.task.as_str(), &r.model, &r.seed.to_string(), &r.metric, &value]).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One `metric = value` line per record.
    pub fn print(&self) {
        for r in &self.records {
            match r.value {
                Some(v) => println!("{:<8} {:<28} {v:.6}", r.model, r.metric),
                None => println!("{:<8} {:<28} undefined", r.model, r.metric),
            }
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes serializable rows as CSV with a header from their field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    #[serde(flatten)]
    details: T,
}

/// `manifest.json`: the command, seed, fully resolved config and
/// command-specific details.
pub fn write_manifest<T: Serialize>(dir: &Path, command: &str, cfg: &RunConfig, details: T) -> Result<()> {
    let m = Manifest { command, seed: cfg.seed, config: cfg, details };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}
