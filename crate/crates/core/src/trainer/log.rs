use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::config::Method;
use super::loss::LossBreakdown;
use crate::error::{Error, Result};

/// Per-iteration CSV loss log.
pub struct LossLog<W: Write> {
    writer: csv::Writer<W>,
    experts: usize,
}

impl LossLog<File> {
    pub fn create(path: &Path, experts: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(file, experts)
    }
}

impl<W: Write> LossLog<W> {
    pub fn new(inner: W, experts: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(Self::header(experts))?;
        Ok(Self { writer, experts })
    }

    pub fn header(experts: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "method",
            "iteration",
            "epoch",
            "warmup",
            "expert_term",
            "gating_mse",
            "gating_repulsion",
            "gating_entropy",
            "aux_term",
            "total",
            "kl",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..experts).map(|e| format!("buffer_{e}")));
        h
    }

    pub fn write(&mut self, method: Method, iteration: u64, epoch: u64, loss: &LossBreakdown, kl: f64, fill: &[usize]) -> Result<()> {
        if fill.len() != self.experts {
            return Err(Error::dim("loss log buffer columns", self.experts, fill.len()));
        }
        let mut row = vec![
            method.name().to_string(),
            iteration.to_string(),
            epoch.to_string(),
            (loss.warmup as u8).to_string(),
            loss.expert_term.to_string(),
            loss.gating_mse.to_string(),
            loss.gating_repulsion.to_string(),
            loss.gating_entropy.to_string(),
            loss.aux_term.to_string(),
            loss.total.to_string(),
            kl.to_string(),
        ];
        row.extend(fill.iter().map(|f| f.to_string()));
        self.writer.write_record(row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(Path::new("<loss log>"), e))
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::io(Path::new("<loss log>"), e.into_error()))
    }
}
