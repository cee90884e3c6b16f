//! Line-delimited training logs. The metrics log holds only deterministic
//! values; wall-clock durations go to a separate sidecar file.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trainer::EpochRecord;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const WALLTIME_FILE: &str = "metrics.walltime.jsonl";

#[derive(Serialize)]
struct WallRecord<'a> {
    stage: &'a str,
    epoch: usize,
    seconds: f64,
}

pub struct MetricsLog {
    metrics: BufWriter<File>,
    walltime: BufWriter<File>,
    metrics_path: PathBuf,
    walltime_path: PathBuf,
    started: Instant,
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

impl MetricsLog {
    /// Opens both logs in `dir` for appending.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics_path = dir.join(METRICS_FILE);
        let walltime_path = dir.join(WALLTIME_FILE);
        Ok(Self {
            metrics: open_append(&metrics_path)?,
            walltime: open_append(&walltime_path)?,
            metrics_path,
            walltime_path,
            started: Instant::now(),
        })
    }

    pub fn record(&mut self, rec: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&self.metrics_path, e))?;
        let wall = WallRecord {
            stage: &rec.stage,
            epoch: rec.epoch,
            seconds: self.started.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&wall)?;
        writeln!(self.walltime, "{line}").map_err(|e| Error::io(&self.walltime_path, e))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
        self.walltime.flush().map_err(|e| Error::io(&self.walltime_path, e))
    }
}
