//! CSV ingestion, chronological splits and sliding-window samples.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::{Error, Result};

/// A multivariate series: one timestamp column plus `N` value channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    pub name: String,
    pub timestamps: Vec<String>,
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
}

fn increasing(ts: &[String]) -> Option<usize> {
    let numeric: Option<Vec<f64>> = ts.iter().map(|t| t.trim().parse::<f64>().ok()).collect();
    match numeric {
        Some(v) => (1..v.len()).find(|&i| v[i] <= v[i - 1]),
        None => (1..ts.len()).find(|&i| ts[i] <= ts[i - 1]),
    }
}

impl TimeSeriesFrame {
    pub fn new(
        name: impl Into<String>,
        timestamps: Vec<String>,
        channel_names: Vec<String>,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if channel_names.len() != channels.len() {
            return Err(Error::contract(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                channels.len()
            )));
        }
        if let Some(c) = channels.iter().position(|c| c.len() != timestamps.len()) {
            return Err(Error::contract(format!(
                "channel `{}` has {} values for {} timestamps",
                channel_names[c],
                channels[c].len(),
                timestamps.len()
            )));
        }
        if let Some(i) = increasing(&timestamps) {
            return Err(Error::Ingestion {
                row: i + 1,
                detail: format!("timestamp `{}` does not follow `{}`", timestamps[i], timestamps[i - 1]),
            });
        }
        Ok(Self {
            name: name.into(),
            timestamps,
            channel_names,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Parses CSV text. Row numbers in errors count data rows from 1.
    pub fn from_reader<R: Read>(name: impl Into<String>, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Ingestion {
                row: 0,
                detail: format!("header: {e}"),
            })?
            .clone();
        if header.len() < 2 {
            return Err(Error::Ingestion {
                row: 0,
                detail: "need a timestamp column and at least one value column".into(),
            });
        }
        let channel_names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let mut timestamps = Vec::new();
        let mut channels = vec![Vec::new(); channel_names.len()];
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Ingestion {
                row,
                detail: e.to_string(),
            })?;
            if rec.len() != header.len() {
                return Err(Error::Ingestion {
                    row,
                    detail: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            timestamps.push(rec[0].to_owned());
            for (c, cell) in rec.iter().skip(1).enumerate() {
                if cell.is_empty() {
                    return Err(Error::Ingestion {
                        row,
                        detail: format!("empty cell in column `{}`", channel_names[c]),
                    });
                }
                let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                    row,
                    detail: format!("`{cell}` in column `{}` is not a number", channel_names[c]),
                })?;
                channels[c].push(v);
            }
        }
        Self::new(name, timestamps, channel_names, channels)
    }

    pub fn load_csv(path: impl AsRef<Path>, name: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(name, file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::contract(format!("csv write: {e}"));
        let mut header = vec!["date".to_owned()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header).map_err(to_err)?;
        for (i, t) in self.timestamps.iter().enumerate() {
            let mut row = vec![t.clone()];
            row.extend(self.channels.iter().map(|c| format!("{:?}", c[i])));
            w.write_record(&row).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::contract(format!("csv write: {e}")))?;
        Ok(())
    }
}

/// Half-open step range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub end: usize,
}

impl Region {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// `⌈fraction·len⌉`, tolerant of float noise such as `1000·0.1`.
pub fn few_shot_len(len: usize, fraction: f64) -> usize {
    let exact = fraction * len as f64;
    ((exact - 1e-9 * exact.max(1.0)).ceil() as usize).clamp(1.min(len), len)
}

/// Chronological train/validation/test boundaries over one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Full training region before any few-shot truncation.
    pub train_full: Region,
    pub val: Region,
    pub test: Region,
    pub few_shot_fraction: f64,
}

impl SplitSpec {
    /// Train and validation sizes are `⌊ratio·total⌋`; the test region takes
    /// the remainder. Regions never overlap.
    pub fn from_ratios(total: usize, train: f64, val: f64) -> Result<Self> {
        if !(train > 0.0 && val >= 0.0 && train + val < 1.0 + 1e-12) {
            return Err(Error::config(format!(
                "split ratios must satisfy train > 0, val >= 0, train + val <= 1; got {train}, {val}"
            )));
        }
        let a = (train * total as f64 + 1e-9).floor() as usize;
        let b = (a + (val * total as f64 + 1e-9).floor() as usize).min(total);
        Ok(Self {
            train_full: Region { start: 0, end: a },
            val: Region { start: a, end: b },
            test: Region { start: b, end: total },
            few_shot_fraction: 1.0,
        })
    }

    /// Keeps the first `⌈fraction·len⌉` training steps. Validation and test
    /// are untouched, and the same fraction applied twice is a no-op.
    pub fn apply_few_shot(self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(format!("few-shot fraction must be in (0, 1], got {fraction}")));
        }
        Ok(Self {
            few_shot_fraction: fraction,
            ..self
        })
    }

    pub fn train(&self) -> Region {
        let n = few_shot_len(self.train_full.len(), self.few_shot_fraction);
        Region {
            start: self.train_full.start,
            end: self.train_full.start + n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub dataset: Arc<str>,
    pub channel: usize,
    /// Frame index of the first input step.
    pub start: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl WindowSample {
    /// Frame steps covered by input and target, `[start, start+T+H)`.
    pub fn span(&self) -> Region {
        Region {
            start: self.start,
            end: self.start + self.input.len() + self.target.len(),
        }
    }
}

pub fn window_count(region_len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    let need = lookback + horizon;
    if region_len < need {
        0
    } else {
        (region_len - need) / stride + 1
    }
}

/// All `(T, H)` windows fully inside `region`, channel-major.
pub fn make_windows(
    frame: &TimeSeriesFrame,
    region: Region,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::config("lookback, horizon and stride must be positive"));
    }
    if region.end > frame.len() || region.start > region.end {
        return Err(Error::contract(format!(
            "region {region:?} outside frame of length {}",
            frame.len()
        )));
    }
    let name: Arc<str> = Arc::from(frame.name.as_str());
    let n = window_count(region.len(), lookback, horizon, stride);
    let mut out = Vec::with_capacity(n * frame.num_channels());
    for (c, values) in frame.channels.iter().enumerate() {
        for k in 0..n {
            let s = region.start + k * stride;
            out.push(WindowSample {
                dataset: Arc::clone(&name),
                channel: c,
                start: s,
                input: values[s..s + lookback].to_vec(),
                target: values[s + lookback..s + lookback + horizon].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Samples for a cross-dataset run: fit on the source, score on the target.
#[derive(Debug, Clone)]
pub struct ZeroShotPair {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub eval: Vec<WindowSample>,
}

#[allow(clippy::too_many_arguments)]
pub fn zero_shot_pair(
    source: &TimeSeriesFrame,
    source_split: &SplitSpec,
    target: &TimeSeriesFrame,
    target_split: &SplitSpec,
    lookback: usize,
    horizon: usize,
    train_stride: usize,
    eval_stride: usize,
) -> Result<ZeroShotPair> {
    if source.name == target.name {
        return Err(Error::config(format!(
            "zero-shot source and target are both `{}`",
            source.name
        )));
    }
    let pair = ZeroShotPair {
        train: make_windows(source, source_split.train(), lookback, horizon, train_stride)?,
        val: make_windows(source, source_split.val, lookback, horizon, eval_stride)?,
        eval: make_windows(target, target_split.test, lookback, horizon, eval_stride)?,
    };
    for (what, set) in [("source train", &pair.train), ("target test", &pair.eval)] {
        if set.is_empty() {
            return Err(Error::InsufficientData(format!("{what} region has no ({lookback}, {horizon}) windows")));
        }
    }
    Ok(pair)
}

/// One dataset entry of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub lookback: Option<usize>,
    #[serde(default)]
    pub horizons: Vec<usize>,
    /// Dataset description used in the prompt.
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub periodicity: Option<usize>,
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub datasets: BTreeMap<String, DatasetEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("manifest {}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn entry(&self, name: &str) -> Result<&DatasetEntry> {
        self.datasets.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.datasets.keys().map(String::as_str).collect();
            Error::config(format!("dataset `{name}` not in manifest (known: {})", known.join(", ")))
        })
    }

    pub fn resolve(&self, entry: &DatasetEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn load_frame(&self, name: &str) -> Result<(TimeSeriesFrame, SplitSpec)> {
        let entry = self.entry(name)?;
        let frame = TimeSeriesFrame::load_csv(self.resolve(entry), name)?;
        let sum: f64 = entry.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios for `{name}` sum to {sum}, expected 1")));
        }
        let split = SplitSpec::from_ratios(frame.len(), entry.split[0], entry.split[1])?;
        Ok((frame, split))
    }
}

/// `channels` series of `sin(2πt/period) + noise·N(0,1)` with independent
/// noise per channel and integer timestamps.
pub fn synthetic_sine(name: &str, channels: usize, steps: usize, period: f64, noise: f64, seed: u64) -> TimeSeriesFrame {
    let mut rng = SplitMix64::new(seed);
    let data = (0..channels)
        .map(|_| {
            (0..steps)
                .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin() + noise * rng.normal(0.0, 1.0))
                .collect()
        })
        .collect();
    TimeSeriesFrame {
        name: name.to_owned(),
        timestamps: (0..steps).map(|t| t.to_string()).collect(),
        channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
        channels: data,
    }
}
