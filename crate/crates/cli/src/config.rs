//! Run configuration: defaults, then a JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use timellm::backbone::BackboneConfig;
use timellm::model::{Ablations, ModelConfig};
use timellm::reprogram::PatchConfig;
use timellm::train::{LossKind, TrainConfig};

use crate::CliError;

/// Evaluation protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Protocol {
    Standard,
    FewShot10,
    FewShot5,
    ZeroShot { source: String, target: String },
}

impl Protocol {
    pub fn few_shot_fraction(&self) -> f64 {
        match self {
            Self::FewShot10 => 0.10,
            Self::FewShot5 => 0.05,
            _ => 1.0,
        }
    }
}

/// Every field has a default. JSON keys are the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub dataset: String,
    pub lookback: usize,
    pub horizon: usize,

    pub prototypes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub revin_eps: f64,
    pub revin_affine: bool,
    pub dropout: f64,

    /// Pretrained backbone weight file. Without one, a backbone is
    /// initialized from `backbone_seed` with the dimensions below.
    pub backbone_weights: Option<PathBuf>,
    pub backbone_seed: u64,
    pub backbone_vocab: usize,
    pub backbone_hidden: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub backbone_ffn: usize,
    pub backbone_max_seq: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,

    pub no_reprogram: bool,
    pub no_prompt: bool,
    pub no_dataset_ctx: bool,
    pub no_instruction: bool,
    pub no_stats: bool,
    /// Variant id the ablation flags came from, used as the report label.
    pub ablation: Option<String>,

    /// `standard`, `few10`, `few5` or `zero_shot`.
    pub protocol: String,
    pub source: Option<String>,
    pub target: Option<String>,

    pub train_stride: usize,
    pub val_stride: usize,
    pub eval_stride: usize,
    /// MASE periodicity; falls back to the manifest entry, then 1.
    pub periodicity: Option<usize>,

    pub seed: u64,
    pub out: PathBuf,
    /// Checkpoint directory; defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let b = BackboneConfig::default();
        let t = TrainConfig::default();
        Self {
            manifest: None,
            dataset: String::new(),
            lookback: m.lookback,
            horizon: m.horizon,
            prototypes: m.prototypes,
            d_model: m.d_model,
            heads: m.heads,
            patch_len: m.patch.patch_len,
            patch_stride: m.patch.stride,
            revin_eps: m.revin_eps,
            revin_affine: m.revin_affine,
            dropout: m.dropout,
            backbone_weights: None,
            backbone_seed: 0,
            backbone_vocab: b.vocab_size,
            backbone_hidden: b.hidden_dim,
            backbone_layers: b.num_layers,
            backbone_heads: b.num_heads,
            backbone_ffn: b.ffn_dim,
            backbone_max_seq: b.max_seq_len,
            epochs: t.epochs,
            batch_size: 16,
            lr: t.lr,
            loss: t.loss,
            no_reprogram: false,
            no_prompt: false,
            no_dataset_ctx: false,
            no_instruction: false,
            no_stats: false,
            ablation: None,
            protocol: "standard".into(),
            source: None,
            target: None,
            train_stride: 1,
            val_stride: 1,
            eval_stride: 1,
            periodicity: None,
            seed: 0,
            out: PathBuf::from("runs/latest"),
            checkpoint: None,
        }
    }
}

/// Field-level overrides collected from flags, applied on top of the file.
pub type Overrides = Map<String, Value>;

fn merge(base: &mut Value, layer: &Map<String, Value>) {
    let obj = base.as_object_mut().expect("config serializes to an object");
    for (k, v) in layer {
        obj.insert(k.clone(), v.clone());
    }
}

/// Parses `key=value`. The value is read as JSON when possible and as a
/// plain string otherwise, so `--set loss=smape` and `--set lr=0.01` both work.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got `{s}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
    Ok((k.trim().to_owned(), value))
}

impl RunConfig {
    /// Defaults, overridden by `file`, overridden by `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        let mut base_dir = None;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            let layer: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let obj = layer
                .as_object()
                .ok_or_else(|| CliError::Config(format!("{}: expected a JSON object", path.display())))?;
            merge(&mut value, obj);
            base_dir = path.parent().map(Path::to_path_buf);
        }
        merge(&mut value, flags);
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(dir) = base_dir {
            cfg.anchor_paths(&dir, flags);
        }
        if let Some(id) = cfg.ablation.clone() {
            cfg.apply_variant(&id)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative paths given in a config file are relative to that file.
    fn anchor_paths(&mut self, dir: &Path, flags: &Overrides) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = dir.join(&*path);
                }
            }
        };
        if !flags.contains_key("manifest") {
            fix(&mut self.manifest);
        }
        if !flags.contains_key("backbone_weights") {
            fix(&mut self.backbone_weights);
        }
        if !flags.contains_key("checkpoint") {
            fix(&mut self.checkpoint);
        }
    }

    /// Sets the ablation flags for a variant id and records it as the label.
    pub fn apply_variant(&mut self, id: &str) -> Result<(), CliError> {
        let a = Ablations::variant(id).map_err(|e| CliError::Config(e.to_string()))?;
        self.no_reprogram |= a.no_reprogram;
        self.no_prompt |= a.no_prompt;
        self.no_dataset_ctx |= a.no_dataset_ctx;
        self.no_instruction |= a.no_instruction;
        self.no_stats |= a.no_stats;
        self.ablation = Some(id.to_owned());
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.protocol()?;
        self.model_config().patch.validate(self.lookback).map_err(CliError::from)?;
        self.train_config().validate().map_err(CliError::from)?;
        self.backbone_config().validate().map_err(CliError::from)?;
        if self.train_stride == 0 || self.val_stride == 0 || self.eval_stride == 0 {
            return Err(CliError::Config("window strides must be positive".into()));
        }
        Ok(())
    }

    pub fn protocol(&self) -> Result<Protocol, CliError> {
        match self.protocol.as_str() {
            "standard" => Ok(Protocol::Standard),
            "few10" => Ok(Protocol::FewShot10),
            "few5" => Ok(Protocol::FewShot5),
            "zero_shot" => match (&self.source, &self.target) {
                (Some(s), Some(t)) => Ok(Protocol::ZeroShot {
                    source: s.clone(),
                    target: t.clone(),
                }),
                _ => Err(CliError::Config("protocol zero_shot needs `source` and `target`".into())),
            },
            p => Err(CliError::Config(format!(
                "unknown protocol `{p}`; expected standard, few10, few5 or zero_shot"
            ))),
        }
    }

    pub fn ablations(&self) -> Ablations {
        Ablations {
            no_reprogram: self.no_reprogram,
            no_prompt: self.no_prompt,
            no_dataset_ctx: self.no_dataset_ctx,
            no_instruction: self.no_instruction,
            no_stats: self.no_stats,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            patch: PatchConfig {
                patch_len: self.patch_len,
                stride: self.patch_stride,
            },
            d_model: self.d_model,
            heads: self.heads,
            prototypes: self.prototypes,
            revin_eps: self.revin_eps,
            revin_affine: self.revin_affine,
            dropout: self.dropout,
            ablations: self.ablations(),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            vocab_size: self.backbone_vocab,
            hidden_dim: self.backbone_hidden,
            num_layers: self.backbone_layers,
            num_heads: self.backbone_heads,
            ffn_dim: self.backbone_ffn,
            max_seq_len: self.backbone_max_seq,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            loss: self.loss,
            seed: self.seed,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint"))
    }
}
