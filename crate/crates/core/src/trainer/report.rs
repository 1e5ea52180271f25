use std::path::Path;

use serde::Serialize;

use super::TrainError;

/// One optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub k: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub k: usize,
    pub epochs: usize,
    /// Loss of the last mini-batch, a rough error indicator for the step.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    /// In training order, i.e. `k = N-1` first.
    pub steps: Vec<StepSummary>,
    pub wall_ms: u64,
    pub note: Option<String>,
}

impl TrainReport {
    pub fn step(&self, k: usize) -> Option<&StepSummary> {
        self.steps.iter().find(|s| s.k == k)
    }

    /// Writes the per-update CSV. Extra leading columns (such as a config hash)
    /// are repeated on every row.
    pub fn write_csv(&self, path: &Path, extra: &[(&str, String)]) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = extra.iter().map(|(h, _)| *h).collect();
        header.extend(["k", "epoch", "step", "loss", "learning_rate", "wall_ms"]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = extra.iter().map(|(_, v)| v.clone()).collect();
            rec.extend([
                r.k.to_string(),
                r.epoch.to_string(),
                r.step.to_string(),
                format!("{:e}", r.loss),
                format!("{:e}", r.learning_rate),
                r.wall_ms.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
