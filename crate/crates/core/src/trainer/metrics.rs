//! Newline-delimited JSON training log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalBlock {
    pub split: String,
    pub map50: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub intra_class_sim: BTreeMap<usize, f64>,
    pub inter_class_disc: Option<f64>,
}

impl From<&EvalReport> for EvalBlock {
    fn from(r: &EvalReport) -> Self {
        Self {
            split: r.split.clone(),
            map50: r.map50,
            per_class_ap: r.per_class_ap.clone(),
            intra_class_sim: r.intra_class_sim.clone(),
            inter_class_disc: r.inter_class_disc,
        }
    }
}

/// One line of the log. Loss terms that were not computed at a step are
/// `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_det: Option<f64>,
    pub loss_bpa: Option<f64>,
    pub loss_rsh: Option<f64>,
    pub loss_ssp: Option<f64>,
    pub loss_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalBlock>,
}

/// Append-only writer; every record is flushed before `log` returns.
pub struct MetricsLog {
    out: Option<Box<dyn Write>>,
    records: Vec<MetricsRecord>,
    keep: bool,
}

impl MetricsLog {
    /// Creates (truncates) `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(Box::new(BufWriter::new(f))),
            records: Vec::new(),
            keep: false,
        })
    }

    /// Keeps records in memory only.
    pub fn in_memory() -> Self {
        Self {
            out: None,
            records: Vec::new(),
            keep: true,
        }
    }

    /// Discards everything.
    pub fn discard() -> Self {
        Self {
            out: None,
            records: Vec::new(),
            keep: false,
        }
    }

    pub fn log(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(out, "{line}")
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("metrics log", e))?;
        }
        if self.keep {
            self.records.push(record);
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }
}

pub fn parse_log(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
