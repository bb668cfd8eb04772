//! Append-only JSON-lines metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AnysegError, Result};
use crate::losses::LossReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        /// Per-sample modality subsets, e.g. `["RD", "E"]`.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        masks: Vec<String>,
        report: LossReport,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        /// Full-modality mIoU on the training set.
        train_miou: f64,
    },
}

/// Writes one flushed line per record so a crash leaves a parseable prefix.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates or truncates the log.
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| AnysegError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| AnysegError::Format(e.to_string()))?;
        let path = &self.path;
        writeln!(self.out, "{line}").map_err(|e| AnysegError::io(path, e))?;
        self.out.flush().map_err(|e| AnysegError::io(path, e))
    }
}

/// Parses a log. A final line without its terminating newline is treated as
/// an interrupted write and skipped; malformed complete lines are errors.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| AnysegError::io(path, e))?;
    parse_metrics(&text)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..i + 1],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AnysegError::Format(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}
