use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricSet;
use crate::error::{input_err, Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One method (or ablation mode) on one OOD set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub method: String,
    pub ood_set: String,
    pub tnr_at_tpr95: f64,
    pub auroc: f64,
    pub detection_acc: f64,
    pub aupr_in: f64,
    /// Score files relative to the run directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_scores: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_scores: Option<String>,
}

impl ReportCell {
    pub fn new(method: &str, ood_set: &str, m: MetricSet) -> Self {
        Self {
            method: method.to_string(),
            ood_set: ood_set.to_string(),
            tnr_at_tpr95: m.tnr_at_tpr95,
            auroc: m.auroc,
            detection_acc: m.detection_acc,
            aupr_in: m.aupr_in,
            id_scores: None,
            ood_scores: None,
        }
    }

    pub fn metrics(&self) -> MetricSet {
        MetricSet {
            tnr_at_tpr95: self.tnr_at_tpr95,
            auroc: self.auroc,
            detection_acc: self.detection_acc,
            aupr_in: self.aupr_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// `benchmark` or `ablation`.
    pub kind: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub cells: Vec<ReportCell>,
}

impl MetricsReport {
    pub fn new(kind: &str, seeds: Vec<u64>, config: serde_json::Value) -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, kind: kind.to_string(), seeds, config, cells: Vec::new() }
    }

    pub fn cell(&self, method: &str, ood_set: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.method == method && c.ood_set == ood_set)
    }

    /// Mean AUROC of `method` over `sets`.
    pub fn mean_auroc(&self, method: &str, sets: &[&str]) -> Result<f64> {
        let mut total = 0.0;
        for s in sets {
            total += self
                .cell(method, s)
                .ok_or_else(|| input_err(format!("report has no cell for {method} on {s}")))?
                .auroc;
        }
        Ok(total / sets.len() as f64)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        if let Some(p) = json_path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(json_path, self.to_json())?;
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(["method", "ood_set", "tnr_at_tpr95", "auroc", "detection_acc", "aupr_in"])?;
        for c in &self.cells {
            w.write_record([
                c.method.clone(),
                c.ood_set.clone(),
                c.tnr_at_tpr95.to_string(),
                c.auroc.to_string(),
                c.detection_acc.to_string(),
                c.aupr_in.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_slice(&fs::read(json_path)?)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported report schema {}", r.schema_version)));
        }
        Ok(r)
    }
}

/// Cell-wise mean of reports over seeds. All reports must list the same
/// cells in the same order.
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| input_err("no reports to average"))?;
    let n = reports.len() as f64;
    let mut out = MetricsReport::new(
        &first.kind,
        reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        first.config.clone(),
    );
    for (i, cell) in first.cells.iter().enumerate() {
        let mut acc = [0.0; 4];
        for r in reports {
            let c = r
                .cells
                .get(i)
                .filter(|c| c.method == cell.method && c.ood_set == cell.ood_set)
                .ok_or_else(|| input_err("reports list different cells"))?;
            for (a, v) in acc.iter_mut().zip(c.metrics().as_array()) {
                *a += v / n;
            }
        }
        let m = MetricSet { tnr_at_tpr95: acc[0], auroc: acc[1], detection_acc: acc[2], aupr_in: acc[3] };
        out.cells.push(ReportCell::new(&cell.method, &cell.ood_set, m));
    }
    Ok(out)
}
