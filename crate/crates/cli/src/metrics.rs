//! Line-delimited JSON metrics. Files are only ever appended to.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use hdistill_core::diagnostics::LayerMeans;
use hdistill_core::distill::StepRecord;
use hdistill_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// First line of every log.
    Run {
        config_digest: String,
        command: String,
    },
    Step(StepRecord),
    /// Epoch-level summary, optionally with attention diagnostics.
    Epoch {
        epoch: usize,
        mean_loss: f64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        layers: Vec<LayerMeans>,
    },
}

pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Opens `path` for appending and writes the run header.
    pub fn open(path: &Path, config_digest: &str, command: &str) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut log = MetricsLog {
            out: BufWriter::new(file),
        };
        log.push(&Record::Run {
            config_digest: config_digest.to_string(),
            command: command.to_string(),
        })?;
        Ok(log)
    }

    pub fn push(&mut self, record: &Record) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    reader
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(&line?)
                .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
