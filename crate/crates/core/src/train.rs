//! Adam and the training loop. Only the trainable store is ever updated.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::model::{PreparedWindow, TimeLlmModel};
use crate::rng::SplitMix64;
use crate::{Error, ParameterStore, Result, Tape, Var};

/// Denominator guard of the training SMAPE loss.
pub const SMAPE_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Smape,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "smape" => Ok(Self::Smape),
            _ => Err(Error::config(format!("unknown loss `{s}`; expected mse or smape"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            loss: LossKind::Mse,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with moment buffers for trainable parameters only.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore, lr: f64) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| (!p.frozen).then(|| (vec![0.0; p.tensor.len()], vec![0.0; p.tensor.len()])))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    /// Number of parameters with moment buffers.
    pub fn tracked(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }
}

/// One Adam update from the gradients recorded on `store`. Parameters
/// without a gradient are left alone.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(Error::contract("optimizer state was built for a different store"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, slot) in state.moments.iter_mut().enumerate() {
        let Some((m, v)) = slot else { continue };
        let p = store.get_mut(crate::ParamId(i));
        if p.frozen {
            continue;
        }
        let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Indexed access to training samples. The trainer reads samples only
/// through this trait, so an instrumented source sees every access.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> &WindowSample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [WindowSample] {
    fn len(&self) -> usize {
        <[WindowSample]>::len(self)
    }

    fn sample(&self, index: usize) -> &WindowSample {
        &self[index]
    }
}

impl SampleSource for Vec<WindowSample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn sample(&self, index: usize) -> &WindowSample {
        &self[index]
    }
}

/// Wraps a source and records the dataset name of every sample read.
pub struct RecordingSource<'a> {
    inner: &'a dyn SampleSource,
    seen: RefCell<BTreeSet<String>>,
    reads: RefCell<usize>,
}

impl<'a> RecordingSource<'a> {
    pub fn new(inner: &'a dyn SampleSource) -> Self {
        Self {
            inner,
            seen: RefCell::new(BTreeSet::new()),
            reads: RefCell::new(0),
        }
    }

    pub fn datasets_seen(&self) -> BTreeSet<String> {
        self.seen.borrow().clone()
    }

    pub fn reads(&self) -> usize {
        *self.reads.borrow()
    }
}

impl SampleSource for RecordingSource<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn sample(&self, index: usize) -> &WindowSample {
        let s = self.inner.sample(index);
        *self.reads.borrow_mut() += 1;
        if !self.seen.borrow().contains(&*s.dataset) {
            self.seen.borrow_mut().insert(s.dataset.to_string());
        }
        s
    }
}

/// A sample with its parameter-independent inputs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub window: PreparedWindow,
    pub target: Vec<f64>,
}

pub fn prepare_all(model: &TimeLlmModel, source: &dyn SampleSource) -> Result<Vec<PreparedSample>> {
    (0..source.len())
        .map(|i| {
            let s = source.sample(i);
            Ok(PreparedSample {
                window: model.prepare(&s.input)?,
                target: s.target.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub steps: usize,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect()
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    rng: SplitMix64,
    steps: usize,
}

fn sample_loss(tape: &mut Tape, loss: LossKind, pred: Var, target: &[f64]) -> Result<Var> {
    match loss {
        LossKind::Mse => tape.mse_scalar(pred, target),
        LossKind::Smape => tape.smape_scalar(pred, target, SMAPE_GUARD),
    }
}

impl Trainer {
    pub fn new(model: &TimeLlmModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            adam: AdamState::new(model.trainable(), config.lr),
            rng: SplitMix64::new(config.seed),
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer step on the mean loss of `batch`. Returns that loss.
    pub fn step(&mut self, model: &mut TimeLlmModel, batch: &[&PreparedSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let mut losses = Vec::with_capacity(batch.len());
        for s in batch {
            let y = model.forward_prepared(&mut tape, &bound, &s.window, Some(&mut self.rng))?;
            losses.push(sample_loss(&mut tape, self.config.loss, y, &s.target)?);
        }
        let loss = tape.mean_scalars(&losses)?;
        tape.backward(loss)?;
        let store = model.trainable_mut();
        store.zero_grads();
        store.accumulate_grads(&tape)?;
        adam_step(store, &mut self.adam)?;
        self.steps += 1;
        Ok(tape.value(loss)[0])
    }

    /// Mean per-sample loss over the epoch, in seeded shuffled order.
    pub fn train_epoch(&mut self, model: &mut TimeLlmModel, samples: &[PreparedSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("no training samples".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            total += self.step(model, &batch)? * batch.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    /// Trains for the configured epochs, then restores the parameters of the
    /// epoch with the lowest validation loss (training loss if no validation
    /// samples exist). Each epoch record is written to `log` as it finishes.
    pub fn fit(
        &mut self,
        model: &mut TimeLlmModel,
        train: &dyn SampleSource,
        val: &dyn SampleSource,
        mut log: Option<&mut dyn Write>,
    ) -> Result<TrainLog> {
        let train = prepare_all(model, train)?;
        let val = prepare_all(model, val)?;
        let mut records = Vec::with_capacity(self.config.epochs);
        let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
        for epoch in 1..=self.config.epochs {
            let train_loss = self.train_epoch(model, &train)?;
            let val_loss = if val.is_empty() {
                None
            } else {
                Some(evaluate_loss(model, &val, self.config.loss, self.config.batch_size)?)
            };
            let rec = EpochRecord {
                epoch,
                train_loss,
                val_loss,
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec).expect("epoch record serializes"))
                    .map_err(|e| Error::contract(format!("writing training log: {e}")))?;
            }
            records.push(rec);
            let score = val_loss.unwrap_or(train_loss);
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, epoch, model.trainable().snapshot()));
            }
        }
        let (_, best_epoch, snapshot) = best.expect("at least one epoch ran");
        model.trainable_mut().restore(&snapshot)?;
        Ok(TrainLog {
            epochs: records,
            best_epoch,
            steps: self.steps,
        })
    }
}

/// Mean per-sample loss without dropout or updates.
pub fn evaluate_loss(model: &TimeLlmModel, samples: &[PreparedSample], loss: LossKind, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for part in samples.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        for s in part {
            let y = model.forward_prepared(&mut tape, &bound, &s.window, None)?;
            let l = sample_loss(&mut tape, loss, y, &s.target)?;
            total += tape.value(l)[0];
        }
    }
    Ok(total / samples.len() as f64)
}

/// Forecasts for prepared samples, in order.
pub fn predict(model: &TimeLlmModel, samples: &[PreparedWindow]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(64) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        for w in part {
            let y = model.forward_prepared(&mut tape, &bound, w, None)?;
            out.push(tape.value(y).to_vec());
        }
    }
    Ok(out)
}
