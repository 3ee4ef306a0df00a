//! Run outputs: loss curves, metric reports, experiment records. Reports and
//! curves are deterministic functions of (config, seed); wall-clock timings
//! go only into the experiment record.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use chime_core::metrics::MetricReport;
use chime_core::{ChimeError, Result};

/// Build identifier recorded with every run.
pub fn build_id() -> String {
    format!("chime-{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub build_id: String,
    pub phase_timings_ms: BTreeMap<String, u128>,
    pub checkpoint: Option<String>,
    pub report: Option<MetricReport>,
}

/// Phase stopwatch feeding the experiment record.
pub struct PhaseTimer {
    started: Instant,
    timings: BTreeMap<String, u128>,
}

impl PhaseTimer {
    pub fn new() -> Self {
        PhaseTimer {
            started: Instant::now(),
            timings: BTreeMap::new(),
        }
    }

    /// Closes the current phase under `name` and starts the next one.
    pub fn mark(&mut self, name: &str) {
        let elapsed = self.started.elapsed().as_millis();
        self.timings.insert(name.to_string(), elapsed);
        self.started = Instant::now();
    }

    pub fn into_timings(self) -> BTreeMap<String, u128> {
        self.timings
    }
}

impl Default for PhaseTimer {
    fn default() -> Self {
        Self::new()
    }
}

/// Write-then-rename so records are never observed half-written.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| ChimeError::io(parent.display().to_string(), e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| ChimeError::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| ChimeError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn write_record(dir: &Path, record: &ExperimentRecord) -> Result<()> {
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| ChimeError::Config(format!("record serialization: {e}")))?;
    write_atomic(&dir.join("record.json"), json.as_bytes())
}

pub fn write_loss_curve(dir: &Path, curve: &[f64]) -> Result<()> {
    let mut body = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        body.push_str(&format!("{},{l}\n", i + 1));
    }
    write_atomic(&dir.join("loss_curve.csv"), body.as_bytes())
}

/// Table-style "0.005±.000" rendering of a scored metric.
pub fn display_value(mean: f64, std: f64) -> String {
    let std_str = format!("{std:.3}");
    format!("{mean:.3}±{}", std_str.trim_start_matches('0'))
}

/// report.json (stable key order) plus report.csv, one row per metric with a
/// table-style display column.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    let mut csv = String::from("metric,mean,std,n_repeats,display\n");
    for (name, v) in &report.metrics {
        csv.push_str(&format!(
            "{name},{},{},{},{}\n",
            v.mean,
            v.std,
            v.n_repeats,
            display_value(v.mean, v.std)
        ));
    }
    write_atomic(&dir.join("report.csv"), csv.as_bytes())
}

pub fn write_diagnostics(dir: &Path, diagnostics: &chime_core::error::AbortDiagnostics) -> Result<()> {
    let json = serde_json::to_string_pretty(diagnostics)
        .map_err(|e| ChimeError::Config(format!("diagnostics serialization: {e}")))?;
    write_atomic(&dir.join("diagnostics.json"), json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chime_core::metrics::MetricValue;

    #[test]
    fn loss_curve_format_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        write_loss_curve(dir.path(), &[1.5, 0.75]).unwrap();
        let body = std::fs::read_to_string(dir.path().join("loss_curve.csv")).unwrap();
        assert_eq!(body, "step,loss\n1,1.5\n2,0.75\n");
    }

    #[test]
    fn display_matches_table_convention() {
        assert_eq!(display_value(0.005, 0.0001), "0.005±.000");
        assert_eq!(display_value(0.075, 0.013), "0.075±.013");
        assert_eq!(display_value(1.402, 0.042), "1.402±.042");
    }

    #[test]
    fn report_files_are_written_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = MetricReport::default();
        report.insert("b_metric", MetricValue::from_repeats(&[1.0]));
        report.insert("a_metric", MetricValue::from_repeats(&[2.0]));
        write_report(dir.path(), &report).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let a_pos = csv.find("a_metric").unwrap();
        let b_pos = csv.find("b_metric").unwrap();
        assert!(a_pos < b_pos);
        assert!(dir.path().join("report.json").exists());
    }
}
