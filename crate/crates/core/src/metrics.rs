//! JSON-lines metrics log, one record per training iteration.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::trainer::StepReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub seg: f64,
    pub co: f64,
    pub orth: f64,
    pub cadv_g: f64,
    pub cl: f64,
    pub total: f64,
    pub disc: f64,
    pub lr_g: f64,
    pub lr_c: f64,
    pub lr_d: f64,
    /// Mean D(target) per group.
    pub d_target: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norms: Option<LossTerms>,
}

impl From<&StepReport> for MetricsRecord {
    fn from(r: &StepReport) -> Self {
        Self {
            iteration: r.iteration,
            seg: r.loss.seg,
            co: r.loss.co,
            orth: r.loss.orth,
            cadv_g: r.loss.cadv_g,
            cl: r.loss.cl,
            total: r.loss.total,
            disc: r.disc,
            lr_g: r.lr_g,
            lr_c: r.lr_c,
            lr_d: r.lr_d,
            d_target: r.d_target.clone(),
            grad_norms: r.loss.grad_norms,
        }
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    /// Opens an existing log for appending, as when resuming from a checkpoint.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::data(path, e))
        })
        .collect()
}

/// Keeps only records with `iteration < end`, so a resumed run can append
/// without duplicating lines written after its checkpoint.
pub fn truncate_metrics(path: &Path, end: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<MetricsRecord> = read_metrics(path)?.into_iter().filter(|r| r.iteration < end).collect();
    let mut w = MetricsWriter::create(path)?;
    for r in &kept {
        w.write(r)?;
    }
    w.flush()
}
