//! Structured run outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use timellm::data::Region;
use timellm::metrics::MetricReport;
use timellm::train::EpochRecord;

use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub trainable: usize,
    pub frozen: usize,
    /// Trainable tensors by name with their sizes.
    pub trainable_tensors: BTreeMap<String, usize>,
}

/// What `train` did, saved next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset: String,
    pub protocol: String,
    pub train_region: Region,
    pub train_samples: usize,
    pub val_samples: usize,
    pub few_shot_fraction: f64,
    /// Datasets whose samples the training loop read.
    pub datasets_seen: Vec<String>,
    pub best_epoch: usize,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub backbone_unchanged: bool,
    pub parameters: ParameterCounts,
}

/// Self-describing evaluation result. Contains no wall-clock values, so
/// identical runs produce identical files; timings go to `timing.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub version: String,
    pub command: String,
    pub label: Option<String>,
    pub train_dataset: String,
    pub eval_dataset: String,
    pub protocol: String,
    pub eval_region: Region,
    pub eval_windows: usize,
    /// One entry per evaluated horizon.
    pub metrics: Vec<MetricReport>,
    /// Repeat-last forecasts scored on the same windows.
    pub baseline: Vec<MetricReport>,
    pub parameters: ParameterCounts,
    pub training: Option<TrainSummary>,
    pub timing_file: String,
    pub config: RunConfig,
}

pub fn version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Adds `key: seconds` to the timing sidecar in `dir`.
pub fn record_timing(dir: &Path, key: &str, seconds: f64) -> CliResult<()> {
    let path = dir.join(TIMING_FILE);
    let mut map: BTreeMap<String, f64> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
    map.insert(key.to_owned(), seconds);
    write_json(&path, &map)
}
