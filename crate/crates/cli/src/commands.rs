//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use timellm::backbone::Backbone;
use timellm::checkpoint;
use timellm::data::{self, DatasetEntry, Manifest, SplitSpec, TimeSeriesFrame, WindowSample};
use timellm::metrics::{self, MetricReport, Scored};
use timellm::model::{PromptSpec, TimeLlmModel};
use timellm::train::{self, RecordingSource, Trainer};

use crate::config::{Protocol, RunConfig};
use crate::report::{self, ForecastReport, ParameterCounts, TrainSummary};
use crate::{CliError, CliResult};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn manifest(cfg: &RunConfig) -> CliResult<Manifest> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset manifest given (`manifest` key or --manifest)".into()))?;
    Ok(Manifest::load(path)?)
}

struct Dataset {
    frame: TimeSeriesFrame,
    split: SplitSpec,
    entry: DatasetEntry,
}

fn load_dataset(m: &Manifest, name: &str) -> CliResult<Dataset> {
    if name.is_empty() {
        return Err(CliError::Config("no dataset selected (`dataset` key or --dataset)".into()));
    }
    let (frame, split) = m.load_frame(name)?;
    Ok(Dataset {
        frame,
        split,
        entry: m.entry(name)?.clone(),
    })
}

fn build_model(cfg: &RunConfig, context: &str) -> CliResult<TimeLlmModel> {
    let backbone = match &cfg.backbone_weights {
        Some(path) => Backbone::load_weights(path)?,
        None => Backbone::init_random(cfg.backbone_config(), cfg.backbone_seed)?,
    };
    let prompt = PromptSpec::new(context);
    Ok(TimeLlmModel::new(cfg.model_config(), backbone, prompt, cfg.seed)?)
}

fn parameter_counts(model: &TimeLlmModel) -> ParameterCounts {
    ParameterCounts {
        trainable: model.trainable().trainable_scalars(),
        frozen: model.backbone().store().frozen_scalars(),
        trainable_tensors: model
            .trainable()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.len()))
            .collect(),
    }
}

fn context_of(entry: &DatasetEntry, name: &str) -> String {
    if entry.context.is_empty() {
        name.to_owned()
    } else {
        entry.context.clone()
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Fits the model under the configured protocol and writes the checkpoint,
/// training log and summary.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let started = Instant::now();
    let protocol = cfg.protocol()?;
    let train_name = match &protocol {
        Protocol::ZeroShot { source, .. } => source.clone(),
        _ => cfg.dataset.clone(),
    };
    let m = manifest(cfg)?;
    let ds = load_dataset(&m, &train_name)?;
    let split = ds.split.apply_few_shot(protocol.few_shot_fraction())?;
    let train_samples = data::make_windows(&ds.frame, split.train(), cfg.lookback, cfg.horizon, cfg.train_stride)?;
    let val_samples = data::make_windows(&ds.frame, split.val, cfg.lookback, cfg.horizon, cfg.val_stride)?;
    if train_samples.is_empty() {
        return Err(CliError::Data(format!(
            "training region {:?} of `{train_name}` holds no ({}, {}) windows",
            split.train(),
            cfg.lookback,
            cfg.horizon
        )));
    }

    let mut model = build_model(cfg, &context_of(&ds.entry, &train_name))?;
    let before = model.backbone().serialize();

    create_dir(&cfg.out)?;
    report::write_json(&cfg.out.join("run_config.json"), cfg)?;
    let log_path = cfg.out.join(report::TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);

    let recorder = RecordingSource::new(&train_samples);
    let mut trainer = Trainer::new(&model, cfg.train_config())?;
    let fit = trainer.fit(&mut model, &recorder, &val_samples, Some(&mut log))?;
    log.flush().map_err(|e| io_err(&log_path, e))?;

    let backbone_unchanged = model.backbone().serialize() == before;
    if !backbone_unchanged {
        return Err(CliError::Runtime("backbone weights changed during training".into()));
    }
    let ckpt = cfg.checkpoint_dir();
    checkpoint::save(&model, &ckpt)?;
    let summary = TrainSummary {
        dataset: train_name,
        protocol: cfg.protocol.clone(),
        train_region: split.train(),
        train_samples: train_samples.len(),
        val_samples: val_samples.len(),
        few_shot_fraction: split.few_shot_fraction,
        datasets_seen: recorder.datasets_seen().into_iter().collect(),
        best_epoch: fit.best_epoch,
        steps: fit.steps,
        epochs: fit.epochs,
        backbone_unchanged,
        parameters: parameter_counts(&model),
    };
    report::write_json(&ckpt.join(report::TRAIN_SUMMARY_FILE), &summary)?;
    report::record_timing(&cfg.out, "train_seconds", started.elapsed().as_secs_f64())?;
    Ok(summary)
}

fn write_predictions(
    path: &Path,
    frame: &TimeSeriesFrame,
    samples: &[WindowSample],
    preds: &[Vec<f64>],
) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::Data(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?));
    w.write_record(["window_index", "channel", "step", "timestamp", "truth", "prediction"]).map_err(csv_err)?;
    let mut index: BTreeMap<usize, usize> = BTreeMap::new();
    for (s, p) in samples.iter().zip(preds) {
        let k = index.entry(s.channel).or_insert(0);
        let t0 = s.start + s.input.len();
        for (h, (y, yhat)) in s.target.iter().zip(p).enumerate() {
            w.write_record([
                k.to_string(),
                frame.channel_names[s.channel].clone(),
                (h + 1).to_string(),
                frame.timestamps[t0 + h].clone(),
                format!("{y:?}"),
                format!("{yhat:?}"),
            ])
            .map_err(csv_err)?;
        }
        *k += 1;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Scores the checkpoint on the protocol's test region and writes the
/// report and predictions.
pub fn cmd_evaluate(cfg: &RunConfig) -> CliResult<ForecastReport> {
    evaluate_as(cfg, "evaluate")
}

fn evaluate_as(cfg: &RunConfig, command: &str) -> CliResult<ForecastReport> {
    let started = Instant::now();
    let protocol = cfg.protocol()?;
    let ckpt = cfg.checkpoint_dir();
    let model = checkpoint::load(&ckpt)?;
    let mc = model.config();
    if (mc.lookback, mc.horizon) != (cfg.lookback, cfg.horizon) {
        return Err(CliError::Config(format!(
            "checkpoint was trained for (T={}, H={}), config asks for (T={}, H={})",
            mc.lookback, mc.horizon, cfg.lookback, cfg.horizon
        )));
    }
    let (train_name, eval_name) = match &protocol {
        Protocol::ZeroShot { source, target } => {
            if source == target {
                return Err(CliError::Config("zero-shot source and target must differ".into()));
            }
            (source.clone(), target.clone())
        }
        _ => (cfg.dataset.clone(), cfg.dataset.clone()),
    };
    let m = manifest(cfg)?;
    let ds = load_dataset(&m, &eval_name)?;
    let region = ds.split.test;
    let samples = data::make_windows(&ds.frame, region, cfg.lookback, cfg.horizon, cfg.eval_stride)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "test region {region:?} of `{eval_name}` holds no ({}, {}) windows",
            cfg.lookback, cfg.horizon
        )));
    }
    let prepared = samples
        .iter()
        .map(|s| model.prepare(&s.input))
        .collect::<timellm::Result<Vec<_>>>()?;
    let preds = train::predict(&model, &prepared)?;
    let naive = samples
        .iter()
        .map(|s| metrics::naive_repeat_last(&s.input, cfg.horizon))
        .collect::<timellm::Result<Vec<_>>>()?;

    let periodicity = cfg.periodicity.or(ds.entry.periodicity).unwrap_or(1);
    let scored: Vec<Scored<'_>> = samples
        .iter()
        .zip(&preds)
        .zip(&naive)
        .map(|((s, p), r)| Scored {
            truth: &s.target,
            prediction: p,
            reference: r,
        })
        .collect();
    let baseline: Vec<Scored<'_>> = samples
        .iter()
        .zip(&naive)
        .map(|(s, r)| Scored {
            truth: &s.target,
            prediction: r,
            reference: r,
        })
        .collect();
    let metrics = MetricReport::aggregate(&scored, periodicity)?;
    let baseline = MetricReport::aggregate(&baseline, periodicity)?;

    create_dir(&cfg.out)?;
    write_predictions(&cfg.out.join(report::PREDICTIONS_FILE), &ds.frame, &samples, &preds)?;
    let summary_path = ckpt.join(report::TRAIN_SUMMARY_FILE);
    let training = if summary_path.exists() {
        Some(report::read_json(&summary_path)?)
    } else {
        None
    };
    let report = ForecastReport {
        version: report::version(),
        command: command.to_owned(),
        label: cfg.ablation.clone(),
        train_dataset: train_name,
        eval_dataset: eval_name,
        protocol: cfg.protocol.clone(),
        eval_region: region,
        eval_windows: samples.len(),
        metrics: vec![metrics],
        baseline: vec![baseline],
        parameters: parameter_counts(&model),
        training,
        timing_file: report::TIMING_FILE.to_owned(),
        config: cfg.clone(),
    };
    report::write_json(&cfg.out.join(report::REPORT_FILE), &report)?;
    report::record_timing(&cfg.out, "eval_seconds", started.elapsed().as_secs_f64())?;
    Ok(report)
}

/// Trains on the source dataset and scores on the target.
pub fn cmd_zero_shot(cfg: &RunConfig) -> CliResult<ForecastReport> {
    let Protocol::ZeroShot { source, target } = cfg.protocol()? else {
        return Err(CliError::Config("zero-shot needs protocol zero_shot with source and target".into()));
    };
    if source == target {
        return Err(CliError::Config("zero-shot source and target must differ".into()));
    }
    let summary = cmd_train(cfg)?;
    if summary.datasets_seen.contains(&target) {
        return Err(CliError::Runtime(format!("training read samples of target `{target}`")));
    }
    evaluate_as(cfg, "zero-shot")
}

/// Runs one ablation variant end to end and labels the report with its id.
pub fn cmd_ablate(cfg: &RunConfig, variant: &str) -> CliResult<ForecastReport> {
    let mut cfg = cfg.clone();
    cfg.apply_variant(variant)?;
    cmd_train(&cfg)?;
    evaluate_as(&cfg, "ablate")
}

/// Scores an external predictions file with the columns written by
/// `evaluate`. OWA needs reference forecasts and is left undefined.
pub fn cmd_metrics(path: &Path, periodicity: usize) -> CliResult<MetricReport> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (wi, ch, st, tr, pr) = (col("window_index")?, col("channel")?, col("step")?, col("truth")?, col("prediction")?);
    // (channel, window) -> [(step, truth, prediction)]
    type Rows = Vec<(usize, f64, f64)>;
    let mut groups: BTreeMap<(String, usize), Rows> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::Data(format!("row {row}: {e}")))?;
        let num = |c: usize| -> CliResult<f64> {
            rec[c]
                .parse()
                .map_err(|_| CliError::Data(format!("row {row}: `{}` is not a number", &rec[c])))
        };
        let window = num(wi)? as usize;
        let step = num(st)? as usize;
        groups
            .entry((rec[ch].to_owned(), window))
            .or_default()
            .push((step, num(tr)?, num(pr)?));
    }
    let mut truths = Vec::new();
    let mut preds = Vec::new();
    for (_, mut rows) in groups {
        rows.sort_by_key(|r| r.0);
        truths.push(rows.iter().map(|r| r.1).collect::<Vec<_>>());
        preds.push(rows.iter().map(|r| r.2).collect::<Vec<_>>());
    }
    let scored: Vec<Scored<'_>> = truths
        .iter()
        .zip(&preds)
        .map(|(t, p)| Scored {
            truth: t,
            prediction: p,
            reference: p,
        })
        .collect();
    let mut report = MetricReport::aggregate(&scored, periodicity)?;
    report.owa = None;
    Ok(report)
}

/// Parameters of a generated sine dataset.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub name: String,
    pub channels: usize,
    pub steps: usize,
    pub period: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Writes `<dir>/<name>.csv` and adds it to `<dir>/manifest.json`.
pub fn cmd_synth(dir: &Path, spec: &SynthSpec) -> CliResult<PathBuf> {
    create_dir(dir)?;
    let frame = data::synthetic_sine(&spec.name, spec.channels, spec.steps, spec.period, spec.noise, spec.seed);
    let file = format!("{}.csv", spec.name);
    let csv_path = dir.join(&file);
    let out = File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    frame.write_csv(BufWriter::new(out))?;
    let manifest_path = dir.join("manifest.json");
    let mut m = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
    } else {
        Manifest::default()
    };
    m.datasets.insert(
        spec.name.clone(),
        DatasetEntry {
            path: PathBuf::from(file),
            split: [0.6, 0.2, 0.2],
            lookback: None,
            horizons: Vec::new(),
            context: format!(
                "Synthetic sine wave with period {} steps plus Gaussian noise of standard deviation {}.",
                spec.period, spec.noise
            ),
            periodicity: None,
        },
    );
    report::write_json(&manifest_path, &m)?;
    Ok(manifest_path)
}
