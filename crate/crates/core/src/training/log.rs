//! Line-delimited training log: one JSON record per step, config echo first.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::StepRecord;
use crate::Result;

pub struct TrainLogger {
    out: BufWriter<File>,
}

impl TrainLogger {
    /// Create (truncate) the log and write the config echo as its head line.
    pub fn create<C: serde::Serialize>(path: &Path, config: &C) -> Result<TrainLogger> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        let mut out = BufWriter::new(file);
        let head = serde_json::json!({ "config": config });
        writeln!(out, "{head}")?;
        out.flush()?;
        Ok(TrainLogger { out })
    }

    pub fn log_step(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| crate::Error::format("train log", e.to_string()))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for TrainLogger {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}
