//! Python bindings: model construction, forecasting, training, metrics and
//! the preprocessing helpers.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use timellm::backbone::{Backbone, BackboneConfig};
use timellm::data::{self, WindowSample};
use timellm::model::{Ablations, ModelConfig, PromptSpec, TimeLlmModel};
use timellm::reprogram::{self, PatchConfig, RevinState};
use timellm::train::{LossKind, TrainConfig, Trainer};
use timellm::{checkpoint, metrics};

fn py_err(e: timellm::Error) -> PyErr {
    use timellm::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::SequenceLength { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for timellm::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Forecaster over a frozen backbone.
#[pyclass(name = "Model", module = "timellm_py")]
struct PyModel {
    inner: TimeLlmModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        lookback = 96, horizon = 24, *, context = "", patch_len = 16, patch_stride = 8,
        d_model = 16, heads = 8, prototypes = 64, revin_affine = false, dropout = 0.0,
        ablation = None, seed = 0, backbone_seed = 0, backbone_weights = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        lookback: usize,
        horizon: usize,
        context: &str,
        patch_len: usize,
        patch_stride: usize,
        d_model: usize,
        heads: usize,
        prototypes: usize,
        revin_affine: bool,
        dropout: f64,
        ablation: Option<&str>,
        seed: u64,
        backbone_seed: u64,
        backbone_weights: Option<PathBuf>,
    ) -> PyResult<Self> {
        let ablations = ablation.map(Ablations::variant).transpose().or_py()?.unwrap_or_default();
        let cfg = ModelConfig {
            lookback,
            horizon,
            patch: PatchConfig {
                patch_len,
                stride: patch_stride,
            },
            d_model,
            heads,
            prototypes,
            revin_affine,
            dropout,
            ablations,
            ..Default::default()
        };
        let backbone = match backbone_weights {
            Some(p) => Backbone::load_weights(&p),
            None => Backbone::init_random(BackboneConfig::default(), backbone_seed),
        }
        .or_py()?;
        let inner = TimeLlmModel::new(cfg, backbone, PromptSpec::new(context), seed).or_py()?;
        Ok(Self { inner })
    }

    /// Loads a checkpoint directory written by `save` or the CLI.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&dir).or_py()?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &dir).or_py()
    }

    #[getter]
    fn lookback(&self) -> usize {
        self.inner.config().lookback
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.config().horizon
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.inner.num_patches()
    }

    #[getter]
    fn trainable_parameters(&self) -> usize {
        self.inner.trainable().trainable_scalars()
    }

    #[getter]
    fn frozen_parameters(&self) -> usize {
        self.inner.backbone().store().frozen_scalars()
    }

    /// Trainable tensor names mapped to their shapes.
    fn parameter_shapes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (_, p) in self.inner.trainable().iter() {
            d.set_item(&p.name, p.tensor.shape().to_vec())?;
        }
        Ok(d)
    }

    /// Rendered prompt text for a window, or `None` when prompting is off.
    fn prompt(&self, window: Vec<f64>) -> PyResult<Option<String>> {
        Ok(self.inner.build_prompt(&window).or_py()?.map(|p| p.rendered))
    }

    fn forecast(&self, window: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&window, self.inner.config().horizon).or_py()
    }

    /// One forecast per channel; channels do not interact.
    fn forecast_channels(&self, channels: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        self.inner.forward_multichannel(&channels).or_py()
    }

    /// Trains on `(input, target)` pairs and returns one dict per epoch.
    /// The parameters of the best epoch are kept.
    #[pyo3(signature = (inputs, targets, *, epochs = 10, batch_size = 32, lr = 1e-3, loss = "mse", seed = 0,
                        val_inputs = None, val_targets = None))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        loss: &str,
        seed: u64,
        val_inputs: Option<Vec<Vec<f64>>>,
        val_targets: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let loss: LossKind = loss.parse().or_py()?;
        let train = samples(inputs, targets)?;
        let val = samples(val_inputs.unwrap_or_default(), val_targets.unwrap_or_default())?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            lr,
            loss,
            seed,
        };
        let mut trainer = Trainer::new(&self.inner, cfg).or_py()?;
        let log = trainer.fit(&mut self.inner, &train, &val, None).or_py()?;
        log.epochs
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("val_loss", r.val_loss)?;
                d.set_item("best", r.epoch == log.best_epoch)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(lookback={}, horizon={}, patches={}, trainable={})",
            c.lookback,
            c.horizon,
            self.inner.num_patches(),
            self.inner.trainable().trainable_scalars()
        )
    }
}

fn samples(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<Vec<WindowSample>> {
    if inputs.len() != targets.len() {
        return Err(PyValueError::new_err(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let name: Arc<str> = Arc::from("python");
    Ok(inputs
        .into_iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (input, target))| WindowSample {
            dataset: Arc::clone(&name),
            channel: 0,
            start: i,
            input,
            target,
        })
        .collect())
}

#[pyfunction]
fn mse(y: Vec<f64>, yhat: Vec<f64>) -> PyResult<f64> {
    metrics::mse(&y, &yhat).or_py()
}

#[pyfunction]
fn mae(y: Vec<f64>, yhat: Vec<f64>) -> PyResult<f64> {
    metrics::mae(&y, &yhat).or_py()
}

#[pyfunction]
fn smape(y: Vec<f64>, yhat: Vec<f64>) -> PyResult<f64> {
    metrics::smape(&y, &yhat).or_py()
}

#[pyfunction]
fn mape(y: Vec<f64>, yhat: Vec<f64>) -> PyResult<f64> {
    metrics::mape(&y, &yhat).or_py()
}

#[pyfunction]
#[pyo3(signature = (y, yhat, periodicity = 1))]
fn mase(y: Vec<f64>, yhat: Vec<f64>, periodicity: usize) -> PyResult<f64> {
    metrics::mase(&y, &yhat, periodicity).or_py()
}

#[pyfunction]
fn owa(smape: f64, mase: f64, smape_ref: f64, mase_ref: f64) -> PyResult<f64> {
    metrics::owa(smape, mase, smape_ref, mase_ref).or_py()
}

/// Patches of a window as a list of rows.
#[pyfunction]
#[pyo3(signature = (window, patch_len = 16, stride = 8))]
fn make_patches(window: Vec<f64>, patch_len: usize, stride: usize) -> PyResult<Vec<Vec<f64>>> {
    let t = reprogram::make_patches(&window, &PatchConfig { patch_len, stride }).or_py()?;
    Ok(t.data().chunks(patch_len).map(<[f64]>::to_vec).collect())
}

/// Returns `(normalized, mean, std)`.
#[pyfunction]
#[pyo3(signature = (window, eps = 1e-5))]
fn revin_normalize(window: Vec<f64>, eps: f64) -> PyResult<(Vec<f64>, f64, f64)> {
    let (z, s) = reprogram::revin_normalize(&window, eps).or_py()?;
    Ok((z, s.mean, s.std))
}

#[pyfunction]
#[pyo3(signature = (values, mean, std, eps = 1e-5))]
fn revin_denormalize(values: Vec<f64>, mean: f64, std: f64, eps: f64) -> Vec<f64> {
    reprogram::revin_denormalize(&values, &RevinState { mean, std, eps })
}

#[pyfunction]
fn window_count(region_len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    data::window_count(region_len, lookback, horizon, stride)
}

/// Noisy sines, one list per channel.
#[pyfunction]
#[pyo3(signature = (channels = 1, steps = 1000, period = 24.0, noise = 0.05, seed = 0))]
fn synthetic_sine(channels: usize, steps: usize, period: f64, noise: f64, seed: u64) -> Vec<Vec<f64>> {
    data::synthetic_sine("synthetic", channels, steps, period, noise, seed).channels
}

#[pymodule]
fn timellm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class, function and constant to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add("ABLATIONS", Ablations::VARIANTS.to_vec())?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(smape, m)?)?;
    m.add_function(wrap_pyfunction!(mape, m)?)?;
    m.add_function(wrap_pyfunction!(mase, m)?)?;
    m.add_function(wrap_pyfunction!(owa, m)?)?;
    m.add_function(wrap_pyfunction!(make_patches, m)?)?;
    m.add_function(wrap_pyfunction!(revin_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(revin_denormalize, m)?)?;
    m.add_function(wrap_pyfunction!(window_count, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_sine, m)?)?;
    Ok(())
}
