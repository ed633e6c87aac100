//! Per-run records: metric rows and the result summary of one training run.

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::losses::WeightTable;
use crate::pipelines::Method;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRow { epoch, split: split.to_string(), metric: metric.to_string(), value }
    }
}

/// metrics.csv: `epoch,split,metric,value`.
pub fn save_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,split,metric,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.epoch, r.split, r.metric, r.value)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything one training run produced. Model selection is by best
/// validation accuracy; the reported test numbers come from that epoch.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub metrics: Vec<MetricRow>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub aligned_accuracy: f64,
    pub conflicting_accuracy: f64,
    /// Parameters at the selected epoch.
    pub checkpoint: Checkpoint,
    pub weight_table: Option<WeightTable>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    /// Metric value at a given epoch, if recorded.
    pub fn metric(&self, epoch: usize, split: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.epoch == epoch && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// All values of one metric in epoch order.
    pub fn metric_series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![
            MetricRow::new(0, "train", "loss", 2.5),
            MetricRow::new(0, "val", "accuracy", 0.125),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        save_metrics_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,split,metric,value\n0,train,loss,2.5\n0,val,accuracy,0.125\n");
    }
}
