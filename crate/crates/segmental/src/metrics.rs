//! Append-only JSON-lines metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use segmental_core::training::EpochRecord;
use serde::Serialize;

#[derive(Serialize)]
struct Line<'a> {
    epoch: usize,
    stage: &'a str,
    train_loss: f64,
    dev_loss: f64,
    dev_per: f64,
    wall_time: f64,
    step_size: f64,
    skipped: usize,
    nonfinite: u64,
}

pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| path.display().to_string())?;
        Ok(MetricsLog { out: BufWriter::new(f) })
    }

    pub fn record(&mut self, r: &EpochRecord) -> Result<()> {
        let line = Line {
            epoch: r.epoch,
            stage: r.stage.name(),
            train_loss: r.train_loss,
            dev_loss: r.dev_loss,
            dev_per: r.dev_per,
            wall_time: r.wall_time,
            step_size: r.step_size,
            skipped: r.skipped,
            nonfinite: r.nonfinite,
        };
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
