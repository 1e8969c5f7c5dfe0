//! Trainable input transformation: instance normalization, patching, patch
//! embedding, text-prototype probing and the multi-head cross-attention that
//! maps patches into the backbone's embedding space.

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::{Error, ParamId, ParameterStore, Result, Tape, Tensor, Var};

/// Per-window statistics kept for inverting the normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevinState {
    pub mean: f64,
    /// Population standard deviation of the raw window.
    pub std: f64,
    pub eps: f64,
}

impl RevinState {
    /// Divisor used by the forward map: `std`, or `eps` once `std` drops to it.
    pub fn scale(&self) -> f64 {
        if self.std > self.eps {
            self.std
        } else {
            self.eps
        }
    }
}

pub fn revin_normalize(window: &[f64], eps: f64) -> Result<(Vec<f64>, RevinState)> {
    if window.is_empty() {
        return Err(Error::InsufficientData("cannot normalize an empty window".into()));
    }
    if eps <= 0.0 {
        return Err(Error::config("RevIN eps must be positive"));
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let state = RevinState {
        mean,
        std: var.sqrt(),
        eps,
    };
    let s = state.scale();
    Ok((window.iter().map(|x| (x - mean) / s).collect(), state))
}

pub fn revin_denormalize(values: &[f64], state: &RevinState) -> Vec<f64> {
    let s = state.scale();
    values.iter().map(|y| y * s + state.mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            stride: 8,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self, lookback: usize) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_len || self.patch_len > lookback {
            return Err(Error::config(format!(
                "patching needs 1 <= stride ({}) <= patch_len ({}) <= lookback ({lookback})",
                self.stride, self.patch_len
            )));
        }
        Ok(())
    }

    /// `⌊(T − L_p)/S⌋ + 2`
    pub fn num_patches(&self, lookback: usize) -> usize {
        (lookback - self.patch_len) / self.stride + 2
    }
}

/// Pads the window with `stride` copies of its last value, then cuts
/// length-`patch_len` windows at offsets `0, S, 2S, …`. Returns `[P×L_p]`.
pub fn make_patches(window: &[f64], cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate(window.len())?;
    let last = window[window.len() - 1];
    let mut padded = window.to_vec();
    padded.extend(std::iter::repeat_n(last, cfg.stride));
    let p = cfg.num_patches(window.len());
    let mut data = Vec::with_capacity(p * cfg.patch_len);
    for i in 0..p {
        let start = i * cfg.stride;
        data.extend_from_slice(&padded[start..start + cfg.patch_len]);
    }
    Tensor::new(vec![p, cfg.patch_len], data)
}

/// Shapes of the reprogramming stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprogramConfig {
    pub patch_len: usize,
    /// `d_m`, the patch embedding width.
    pub d_model: usize,
    /// `K`
    pub heads: usize,
    /// `V′`
    pub prototypes: usize,
    /// Backbone vocabulary size `V`.
    pub vocab_size: usize,
    /// Backbone hidden width `D`.
    pub hidden_dim: usize,
}

impl ReprogramConfig {
    /// `d = ⌊d_m/K⌋`
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 {
            return Err(Error::config("d_model and heads must be positive"));
        }
        if self.head_dim() == 0 || self.head_dim() * self.heads > self.d_model {
            return Err(Error::config(format!(
                "head_dim {} x heads {} must fit in d_model {} with head_dim >= 1",
                self.head_dim(),
                self.heads,
                self.d_model
            )));
        }
        if self.prototypes == 0 || self.prototypes >= self.vocab_size {
            return Err(Error::config(format!(
                "prototype count {} must satisfy 0 < V' < V = {}",
                self.prototypes, self.vocab_size
            )));
        }
        Ok(())
    }
}

fn fan_in_uniform(rng: &mut SplitMix64, rows: usize, cols: usize) -> Result<Tensor> {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect())
}

/// Parameter ids of the input transformation inside the trainable store.
///
/// `query`, `key` and `value` hold all heads side by side: columns
/// `k·d..(k+1)·d` are head `k`'s projection.
#[derive(Debug, Clone)]
pub struct ReprogramParams {
    pub revin_gain: Option<ParamId>,
    pub revin_bias: Option<ParamId>,
    pub embed_weight: ParamId,
    pub embed_bias: ParamId,
    pub attention: Option<AttentionParams>,
    pub fallback: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// `W` `[V′×V]`
    pub probe: ParamId,
    /// `[d_m × K·d]`
    pub query: ParamId,
    /// `[D × K·d]`
    pub key: ParamId,
    /// `[D × K·d]`
    pub value: ParamId,
    /// `[K·d × D]`
    pub out: ParamId,
}

impl ReprogramParams {
    /// Registers the stack in `store`. With `ablate` the cross-attention is
    /// replaced by a single `[d_m×D]` projection.
    pub fn init(
        store: &mut ParameterStore,
        cfg: &ReprogramConfig,
        revin_affine: bool,
        ablate: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        cfg.validate()?;
        let (revin_gain, revin_bias) = if revin_affine {
            (
                Some(store.add("revin.gain", Tensor::scalar(1.0), false)?),
                Some(store.add("revin.bias", Tensor::scalar(0.0), false)?),
            )
        } else {
            (None, None)
        };
        let embed_weight = store.add("patch_embed.weight", fan_in_uniform(rng, cfg.patch_len, cfg.d_model)?, false)?;
        let bound = 1.0 / (cfg.patch_len as f64).sqrt();
        let bias = Tensor::new(vec![cfg.d_model], (0..cfg.d_model).map(|_| rng.uniform(-bound, bound)).collect())?;
        let embed_bias = store.add("patch_embed.bias", bias, false)?;

        let width = cfg.head_dim() * cfg.heads;
        let (attention, fallback) = if ablate {
            let fb = store.add("reprogram.fallback", fan_in_uniform(rng, cfg.d_model, cfg.hidden_dim)?, false)?;
            (None, Some(fb))
        } else {
            let (vp, v) = (cfg.prototypes, cfg.vocab_size);
            let uniform = 1.0 / v as f64;
            let probe_data = (0..vp * v).map(|_| uniform + rng.uniform(-uniform, uniform)).collect();
            let probe = store.add("prototypes.probe", Tensor::new(vec![vp, v], probe_data)?, false)?;
            let query = store.add("reprogram.query", fan_in_uniform(rng, cfg.d_model, width)?, false)?;
            let key = store.add("reprogram.key", fan_in_uniform(rng, cfg.hidden_dim, width)?, false)?;
            let value = store.add("reprogram.value", fan_in_uniform(rng, cfg.hidden_dim, width)?, false)?;
            let out = store.add("reprogram.out", fan_in_uniform(rng, width, cfg.hidden_dim)?, false)?;
            (
                Some(AttentionParams {
                    probe,
                    query,
                    key,
                    value,
                    out,
                }),
                None,
            )
        };
        Ok(Self {
            revin_gain,
            revin_bias,
            embed_weight,
            embed_bias,
            attention,
            fallback,
        })
    }
}

/// Patches `[P×L_p]` times the embedder `[L_p×d_m]`, plus optional bias.
pub fn embed_patches(tape: &mut Tape, raw: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let x = tape.matmul(raw, weight)?;
    match bias {
        Some(b) => tape.add_bias(x, b),
        None => Ok(x),
    }
}

/// `E′ = W·E`
pub fn prototypes(tape: &mut Tape, probe: Var, embeddings: Var) -> Result<Var> {
    tape.matmul(probe, embeddings)
}

/// Keys and values of the prototype bank for every head, `[V′ × K·d]` each.
/// They depend only on parameters, so one pair serves a whole batch.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeKeys {
    pub keys: Var,
    pub values: Var,
}

pub fn prototype_keys(tape: &mut Tape, protos: Var, key: Var, value: Var) -> Result<PrototypeKeys> {
    Ok(PrototypeKeys {
        keys: tape.matmul(protos, key)?,
        values: tape.matmul(protos, value)?,
    })
}

/// Output of [`reprogram_patches`].
#[derive(Debug, Clone)]
pub struct Reprogrammed {
    /// `[P×D]`
    pub output: Var,
    /// Per-head attention weights `[P×V′]`.
    pub attention: Vec<Var>,
}

/// Per head `k`: `softmax(Q_k K_kᵀ / √d) V_k`, heads concatenated and
/// projected to `[P×D]`.
pub fn reprogram_patches(
    tape: &mut Tape,
    embedded: Var,
    query: Var,
    bank: PrototypeKeys,
    out: Var,
    heads: usize,
) -> Result<Reprogrammed> {
    let q = tape.matmul(embedded, query)?;
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(bank.keys, heads)?;
    let vh = tape.split_heads(bank.values, heads)?;
    let d = tape.shape(qh[0])[1];
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut zs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for k in 0..heads {
        let s = tape.matmul_t(qh[k], kh[k])?;
        let s = tape.scale(s, inv_sqrt);
        let a = tape.softmax_rows(s)?;
        zs.push(tape.matmul(a, vh[k])?);
        attention.push(a);
    }
    let z = tape.concat_last_dim(&zs)?;
    Ok(Reprogrammed {
        output: tape.matmul(z, out)?,
        attention,
    })
}

/// Plain `[d_m×D]` projection standing in for cross-attention.
pub fn ablate_reprogramming(tape: &mut Tape, embedded: Var, fallback: Var) -> Result<Var> {
    tape.matmul(embedded, fallback)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_window_normalizes_to_zero() {
        let (y, s) = revin_normalize(&[0.0; 3], 1e-5).unwrap();
        assert_eq!(y, vec![0.0; 3]);
        assert_eq!((s.mean, s.std), (0.0, 0.0));
    }

    #[test]
    fn normalizes_by_population_std() {
        let (y, s) = revin_normalize(&[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = revin_denormalize(&y, &s);
        for (a, b) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_counts_follow_formula() {
        let cfg = PatchConfig::default();
        assert_eq!(make_patches(&vec![0.0; 512], &cfg).unwrap().shape(), &[64, 16]);
        assert_eq!(make_patches(&vec![0.0; 96], &cfg).unwrap().shape(), &[12, 16]);
    }

    #[test]
    fn full_length_patch_plus_padding_patch() {
        let w = [1.0, 2.0, 3.0, 4.0];
        let cfg = PatchConfig {
            patch_len: 4,
            stride: 4,
        };
        let p = make_patches(&w, &cfg).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert_eq!(p.row(0), &w);
        assert_eq!(p.row(1), &[4.0; 4]);
    }

    #[test]
    fn patch_len_longer_than_window_is_a_config_error() {
        assert!(matches!(
            make_patches(&[1.0; 8], &PatchConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn heads_must_fit_d_model() {
        let cfg = ReprogramConfig {
            patch_len: 16,
            d_model: 4,
            heads: 8,
            prototypes: 8,
            vocab_size: 32,
            hidden_dim: 16,
        };
        assert!(cfg.validate().is_err());
        assert!(ReprogramConfig { heads: 4, ..cfg }.validate().is_ok());
        assert!(ReprogramConfig { heads: 4, prototypes: 32, ..cfg }.validate().is_err());
    }
}
