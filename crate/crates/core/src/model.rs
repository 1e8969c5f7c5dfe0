//! End-to-end forecaster: normalize, patch, embed, reprogram, prefix with the
//! prompt, run the frozen backbone, project, denormalize.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneVars, PrefixState};
use crate::head::{self, Denormalize, OutputHead};
use crate::prompt::{self, PromptAblations, PromptContext, PromptTemplate, Vocabulary};
use crate::reprogram::{self, PatchConfig, PrototypeKeys, ReprogramConfig, ReprogramParams, RevinState};
use crate::rng::SplitMix64;
use crate::{Error, ParameterStore, Result, Tape, Tensor, Var};

/// Runtime switches for the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Linear projection instead of prototype cross-attention.
    pub no_reprogram: bool,
    /// No prompt prefix at all.
    pub no_prompt: bool,
    pub no_dataset_ctx: bool,
    pub no_instruction: bool,
    pub no_stats: bool,
}

impl Ablations {
    pub const VARIANTS: [&'static str; 5] = ["B.1", "B.2", "C.1", "C.2", "C.3"];

    pub fn variant(id: &str) -> Result<Self> {
        let mut a = Self::default();
        match id {
            "B.1" => a.no_reprogram = true,
            "B.2" => a.no_prompt = true,
            "C.1" => a.no_dataset_ctx = true,
            "C.2" => a.no_instruction = true,
            "C.3" => a.no_stats = true,
            _ => {
                return Err(Error::config(format!(
                    "unknown ablation variant `{id}`; valid ids: {}",
                    Self::VARIANTS.join(", ")
                )))
            }
        }
        Ok(a)
    }

    pub fn prompt(&self) -> PromptAblations {
        PromptAblations {
            no_dataset_ctx: self.no_dataset_ctx,
            no_instruction: self.no_instruction,
            no_stats: self.no_stats,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch: PatchConfig,
    pub d_model: usize,
    pub heads: usize,
    pub prototypes: usize,
    pub revin_eps: f64,
    pub revin_affine: bool,
    pub dropout: f64,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 24,
            patch: PatchConfig::default(),
            d_model: 16,
            heads: 8,
            prototypes: 64,
            revin_eps: 1e-5,
            revin_affine: false,
            dropout: 0.0,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        self.patch.num_patches(self.lookback)
    }
}

/// Text side of the prompt: template, tokenizer, and dataset description.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub template: PromptTemplate,
    pub vocab: Vocabulary,
    pub dataset_context: String,
}

impl PromptSpec {
    pub fn new(dataset_context: impl Into<String>) -> Self {
        Self {
            template: PromptTemplate::default(),
            vocab: Vocabulary::byte_level(),
            dataset_context: dataset_context.into(),
        }
    }
}

/// Window-dependent inputs that do not depend on trainable parameters.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub revin: RevinState,
    /// Normalized patches `[P×L_p]`.
    pub patches: Tensor,
    pub prompt: Option<PromptContext>,
    pub prefix: PrefixState,
}

/// Model parameters bound onto one tape. Prototype keys and values are
/// computed once here and shared by every window on the tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    backbone: BackboneVars,
    revin: Option<(Var, Var)>,
    embed_weight: Var,
    embed_bias: Var,
    attention: Option<BoundAttention>,
    fallback: Option<Var>,
    head_weight: Var,
    head_bias: Var,
}

#[derive(Debug, Clone)]
struct BoundAttention {
    query: Var,
    bank: PrototypeKeys,
    out: Var,
}

#[derive(Debug)]
pub struct TimeLlmModel {
    config: ModelConfig,
    backbone: Backbone,
    prompt: PromptSpec,
    store: ParameterStore,
    reprogram: ReprogramParams,
    head: OutputHead,
}

impl TimeLlmModel {
    pub fn new(config: ModelConfig, backbone: Backbone, prompt: PromptSpec, seed: u64) -> Result<Self> {
        config.patch.validate(config.lookback)?;
        if config.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        let bcfg = *backbone.config();
        if prompt.vocab.len() != bcfg.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} tokens but backbone expects {}",
                prompt.vocab.len(),
                bcfg.vocab_size
            )));
        }
        let p = config.num_patches();
        if p > bcfg.max_seq_len {
            return Err(Error::SequenceLength {
                len: p,
                max: bcfg.max_seq_len,
            });
        }
        let rcfg = ReprogramConfig {
            patch_len: config.patch.patch_len,
            d_model: config.d_model,
            heads: config.heads,
            prototypes: config.prototypes,
            vocab_size: bcfg.vocab_size,
            hidden_dim: bcfg.hidden_dim,
        };
        let mut rng = SplitMix64::new(seed);
        let mut store = ParameterStore::new();
        let reprogram = ReprogramParams::init(
            &mut store,
            &rcfg,
            config.revin_affine,
            config.ablations.no_reprogram,
            &mut rng,
        )?;
        let head = OutputHead::init(&mut store, p, bcfg.hidden_dim, config.horizon, &mut rng)?;
        Ok(Self {
            config,
            backbone,
            prompt,
            store,
            reprogram,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn prompt_spec(&self) -> &PromptSpec {
        &self.prompt
    }

    pub fn trainable(&self) -> &ParameterStore {
        &self.store
    }

    pub fn trainable_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    pub fn num_patches(&self) -> usize {
        self.head.num_patches
    }

    /// Prompt for a raw (unnormalized) window, or `None` when prompting is off.
    pub fn build_prompt(&self, window: &[f64]) -> Result<Option<PromptContext>> {
        if self.config.ablations.no_prompt {
            return Ok(None);
        }
        let max = self.backbone.config().max_seq_len - self.num_patches();
        prompt::build_prompt(
            &self.prompt.vocab,
            &self.prompt.template,
            &self.prompt.dataset_context,
            self.config.lookback,
            self.config.horizon,
            window,
            self.config.ablations.prompt(),
            max,
        )
        .map(Some)
    }

    /// Everything about `window` that stays fixed while parameters train.
    pub fn prepare(&self, window: &[f64]) -> Result<PreparedWindow> {
        if window.len() != self.config.lookback {
            return Err(Error::contract(format!(
                "model built for lookback {}, got a window of {}",
                self.config.lookback,
                window.len()
            )));
        }
        let (normed, revin) = reprogram::revin_normalize(window, self.config.revin_eps)?;
        let patches = reprogram::make_patches(&normed, &self.config.patch)?;
        let prompt = self.build_prompt(window)?;
        let prefix = match &prompt {
            Some(p) if !p.token_ids.is_empty() => {
                let emb = prompt::embed_prompt(self.backbone.token_embeddings(), &p.token_ids)?;
                self.backbone.prefix_state(&emb)?
            }
            _ => PrefixState::empty(self.backbone.config().num_layers),
        };
        Ok(PreparedWindow {
            revin,
            patches,
            prompt,
            prefix,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let backbone = self.backbone.bind(tape);
        let r = &self.reprogram;
        let revin = match (r.revin_gain, r.revin_bias) {
            (Some(g), Some(b)) => Some((tape.param(&self.store, g), tape.param(&self.store, b))),
            _ => None,
        };
        let embed_weight = tape.param(&self.store, r.embed_weight);
        let embed_bias = tape.param(&self.store, r.embed_bias);
        let attention = match &r.attention {
            Some(a) => {
                let probe = tape.param(&self.store, a.probe);
                let protos = reprogram::prototypes(tape, probe, backbone.tok_emb)?;
                let key = tape.param(&self.store, a.key);
                let value = tape.param(&self.store, a.value);
                let bank = reprogram::prototype_keys(tape, protos, key, value)?;
                Some(BoundAttention {
                    query: tape.param(&self.store, a.query),
                    bank,
                    out: tape.param(&self.store, a.out),
                })
            }
            None => None,
        };
        let fallback = r.fallback.map(|f| tape.param(&self.store, f));
        Ok(BoundModel {
            backbone,
            revin,
            embed_weight,
            embed_bias,
            attention,
            fallback,
            head_weight: tape.param(&self.store, self.head.weight),
            head_bias: tape.param(&self.store, self.head.bias),
        })
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut SplitMix64>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..tape.value(x).len())
                    .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Reprogrammed patches `[P×D]`.
    fn input_stack(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        window: &PreparedWindow,
        mut rng: Option<&mut SplitMix64>,
    ) -> Result<Var> {
        let mut x = tape.leaf(window.patches.clone());
        if let Some((gain, bias)) = bound.revin {
            x = tape.mul_scalar_var(x, gain)?;
            x = tape.add_scalar_var(x, bias)?;
        }
        let emb = reprogram::embed_patches(tape, x, bound.embed_weight, Some(bound.embed_bias))?;
        let emb = self.dropout(tape, emb, rng.as_deref_mut())?;
        let out = match (&bound.attention, bound.fallback) {
            (Some(a), _) => reprogram::reprogram_patches(tape, emb, a.query, a.bank, a.out, self.config.heads)?.output,
            (None, Some(fb)) => reprogram::ablate_reprogramming(tape, emb, fb)?,
            (None, None) => unreachable!("model always has an input projection"),
        };
        self.dropout(tape, out, rng)
    }

    fn denormalize(&self, bound: &BoundModel, window: &PreparedWindow) -> Denormalize {
        Denormalize {
            state: window.revin,
            affine: bound.revin,
        }
    }

    /// Forecast `[1×H]` in input units. Pass `rng` only while training, to
    /// enable dropout.
    pub fn forward_prepared(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        window: &PreparedWindow,
        rng: Option<&mut SplitMix64>,
    ) -> Result<Var> {
        let patches = self.input_stack(tape, bound, window, rng)?;
        let hidden = if window.prefix.is_empty() {
            self.backbone.forward_embedded(tape, &bound.backbone, patches)?
        } else {
            self.backbone
                .forward_with_prefix(tape, &bound.backbone, &window.prefix, patches)?
        };
        head::project(
            tape,
            hidden,
            0,
            &self.head,
            bound.head_weight,
            bound.head_bias,
            &self.denormalize(bound, window),
        )
    }

    /// Reference route: embeds the prompt on the tape, concatenates it with
    /// the patches, and runs the whole sequence through the backbone.
    pub fn forward_full_sequence(&self, tape: &mut Tape, bound: &BoundModel, window: &PreparedWindow) -> Result<Var> {
        let patches = self.input_stack(tape, bound, window, None)?;
        let ids: Vec<usize> = window
            .prompt
            .as_ref()
            .map(|p| p.token_ids.iter().map(|&i| i as usize).collect())
            .unwrap_or_default();
        let seq = if ids.is_empty() {
            patches
        } else {
            let prompt = tape.embedding_lookup(bound.backbone.tok_emb, &ids)?;
            tape.concat_rows(&[prompt, patches])?
        };
        let hidden = self.backbone.forward_embedded(tape, &bound.backbone, seq)?;
        head::project(
            tape,
            hidden,
            ids.len(),
            &self.head,
            bound.head_weight,
            bound.head_bias,
            &self.denormalize(bound, window),
        )
    }

    /// Forecast for one univariate window.
    pub fn forward(&self, window: &[f64], horizon: usize) -> Result<Vec<f64>> {
        if horizon != self.config.horizon {
            return Err(Error::contract(format!(
                "model built for horizon {}, asked for {horizon}",
                self.config.horizon
            )));
        }
        let prepared = self.prepare(window)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let y = self.forward_prepared(&mut tape, &bound, &prepared, None)?;
        Ok(tape.value(y).to_vec())
    }

    /// One forecast per channel; channels never see each other.
    pub fn forward_multichannel(&self, channels: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        channels.iter().map(|c| self.forward(c, self.config.horizon)).collect()
    }
}
