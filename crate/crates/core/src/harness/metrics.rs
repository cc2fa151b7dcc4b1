//! The append-only metrics log: `<out>/<run_id>/metrics.csv`.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::SplitTag;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,epoch,split,loss,top1,agreement,lr,wall_s";

/// One line of the metrics CSV. `agreement` is empty when there is no teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: f64,
    pub split: SplitTag,
    pub loss: f64,
    pub top1: f64,
    pub agreement: Option<f64>,
    pub lr: f64,
    pub wall_s: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest(format!("{}: {other:?}", path.display())),
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Start a fresh log, replacing any existing file.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        writer
            .write_record(METRICS_HEADER.split(','))
            .and_then(|_| writer.flush().map_err(csv::Error::from))
            .map_err(|e| csv_err(&path, e))?;
        Ok(MetricsWriter {
            path,
            writer,
            last_step: None,
        })
    }

    /// Reopen a log for appending after dropping every row past `step`.
    pub fn resume(path: impl Into<PathBuf>, step: u64) -> Result<Self> {
        let path = path.into();
        let kept: Vec<MetricsRow> = read_metrics(&path)?
            .into_iter()
            .filter(|r| r.step <= step)
            .collect();
        let mut w = Self::create(&path)?;
        for r in &kept {
            w.append(r)?;
        }
        w.flush()?;
        drop(w);
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricsWriter {
            writer: csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(file),
            last_step: kept.last().map(|r| r.step),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(last) = self.last_step {
            if row.step < last {
                return Err(Error::InvalidArgument(format!(
                    "metrics step went backwards: {} after {last}",
                    row.step
                )));
            }
        }
        self.last_step = Some(row.step);
        self.writer
            .serialize(row)
            .map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.lines().next() != Some(METRICS_HEADER) {
        return Err(Error::Manifest(format!(
            "{}: unexpected metrics header",
            path.display()
        )));
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| csv_err(path, e))
}

/// Last row for each split tag.
pub fn final_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut out: Vec<MetricsRow> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|o| o.split == r.split) {
            Some(o) => *o = r.clone(),
            None => out.push(r.clone()),
        }
    }
    out.sort_by_key(|r| r.split);
    out
}
