//! Model checkpoints: backbone weights, trainable weights (same binary
//! format) and a JSON configuration file, side by side in one directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::model::{ModelConfig, PromptSpec, TimeLlmModel};
use crate::prompt::{PromptTemplate, Vocabulary};
use crate::{weights, Error, Result};

pub const BACKBONE_FILE: &str = "backbone.tllmw";
pub const TRAINABLE_FILE: &str = "trainable.tllmw";
pub const CONFIG_FILE: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    model: ModelConfig,
    dataset_context: String,
    template: PromptTemplate,
    vocabulary: String,
}

pub fn save(model: &TimeLlmModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.backbone().save_weights(&dir.join(BACKBONE_FILE))?;
    let named = model.trainable().iter().map(|(_, p)| (p.name.as_str(), &p.tensor));
    weights::write_file(&dir.join(TRAINABLE_FILE), model.backbone().config(), named)?;
    let spec = model.prompt_spec();
    let file = ModelFile {
        model: *model.config(),
        dataset_context: spec.dataset_context.clone(),
        template: spec.template.clone(),
        vocabulary: spec.vocab.to_file_text(),
    };
    let path = dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(&file).expect("model file serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<TimeLlmModel> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| Error::format("model.json", e.to_string()))?;
    let backbone = Backbone::load_weights(&dir.join(BACKBONE_FILE))?;
    let prompt = PromptSpec {
        template: file.template,
        vocab: Vocabulary::parse(&file.vocabulary)?,
        dataset_context: file.dataset_context,
    };
    let mut model = TimeLlmModel::new(file.model, backbone, prompt, 0)?;
    let (_, params) = weights::read_file(&dir.join(TRAINABLE_FILE))?;
    let store = model.trainable_mut();
    if params.len() != store.len() {
        return Err(Error::format(
            "parameters",
            format!("expected {} trainable tensors, found {}", store.len(), params.len()),
        ));
    }
    for p in params {
        let id = store
            .id_of(&p.name)
            .ok_or_else(|| Error::format(&p.name, "not a parameter of this model"))?;
        let dst = &mut store.get_mut(id).tensor;
        if dst.shape() != p.tensor.shape() {
            return Err(Error::format(
                &p.name,
                format!("expected dims {:?}, found {:?}", dst.shape(), p.tensor.shape()),
            ));
        }
        dst.data_mut().copy_from_slice(p.tensor.data());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::reprogram::PatchConfig;

    #[test]
    fn round_trip_preserves_forecasts() {
        let bcfg = BackboneConfig {
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            max_seq_len: 256,
            ..Default::default()
        };
        let cfg = ModelConfig {
            lookback: 24,
            horizon: 4,
            patch: PatchConfig {
                patch_len: 8,
                stride: 8,
            },
            d_model: 8,
            heads: 2,
            prototypes: 8,
            ..Default::default()
        };
        let mut model = TimeLlmModel::new(cfg, Backbone::init_random(bcfg, 1).unwrap(), PromptSpec::new("demo"), 2).unwrap();
        let store = model.trainable_mut();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let t = &mut store.get_mut(id).tensor;
            for x in t.data_mut() {
                *x = weights::to_f32_precision(*x);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        let w: Vec<f64> = (0..24).map(|t| (t as f64).cos()).collect();
        assert_eq!(model.forward(&w, 4).unwrap(), loaded.forward(&w, 4).unwrap());
        assert_eq!(model.backbone().serialize(), loaded.backbone().serialize());
    }
}
