use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,lr,loss,loss_lm,loss_vm,seconds,grad_norm";

/// One optimizer step. Loss components that the stage does not compute are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_lm: Option<f64>,
    pub loss_vm: Option<f64>,
    /// Wall-clock seconds since the stage started. Not deterministic.
    pub seconds: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{:e},{:e},{},{},{:.3},{:e}",
            self.step,
            self.lr,
            self.loss,
            opt(self.loss_lm),
            opt(self.loss_vm),
            self.seconds,
            self.grad_norm
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    rows: Vec<MetricRow>,
}

impl RunMetrics {
    pub fn new() -> Self {
        RunMetrics::default()
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::contract(format!(
                    "metrics step {} does not follow {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    /// Rows without the wall-clock column, for determinism comparisons.
    pub fn deterministic_csv(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.seconds = 0.0;
                r.to_csv()
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Appends rows to `path`, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        for r in &self.rows {
            writeln!(f, "{}", r.to_csv())?;
        }
        f.flush()?;
        Ok(())
    }
}
