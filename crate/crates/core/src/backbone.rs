//! Frozen decoder-only transformer.
//!
//! Pre-norm blocks (`x + attn(ln1(x))`, then `x + ffn(ln2(x))`), GELU
//! feed-forward, learned absolute positional embeddings, causal
//! self-attention, and a final layer norm. Every parameter is frozen; the
//! tape still carries gradient through the blocks to whatever fed them.
//!
//! Canonical parameter order, used by the weight file:
//!
//! ```text
//! tok_emb [V×D], pos_emb [max_seq_len×D],
//! for l in 0..num_layers:
//!   layers.{l}.ln1.gain [D], layers.{l}.ln1.bias [D],
//!   layers.{l}.attn.wq [D×D], layers.{l}.attn.bq [D],
//!   layers.{l}.attn.wk [D×D], layers.{l}.attn.bk [D],
//!   layers.{l}.attn.wv [D×D], layers.{l}.attn.bv [D],
//!   layers.{l}.attn.wo [D×D], layers.{l}.attn.bo [D],
//!   layers.{l}.ln2.gain [D], layers.{l}.ln2.bias [D],
//!   layers.{l}.ffn.w1 [D×F], layers.{l}.ffn.b1 [F],
//!   layers.{l}.ffn.w2 [F×D], layers.{l}.ffn.b2 [D],
//! final_ln.gain [D], final_ln.bias [D]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::weights::{self, to_f32_precision, NamedTensor};
use crate::{Error, ParamId, ParameterStore, Result, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 512,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("backbone {name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "backbone hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub(crate) fn header_fields(&self) -> [usize; 6] {
        [
            self.vocab_size,
            self.hidden_dim,
            self.num_layers,
            self.num_heads,
            self.ffn_dim,
            self.max_seq_len,
        ]
    }

    /// `(name, shape)` for every parameter in canonical order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.hidden_dim, self.ffn_dim);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out.push(("final_ln.gain".to_string(), vec![d]));
        out.push(("final_ln.bias".to_string(), vec![d]));
        out
    }
}

// Parameter ids of one block, in canonical order.
const PER_LAYER: usize = 16;

#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    store: ParameterStore,
}

/// Backbone parameters bound onto a tape as constants.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub tok_emb: Var,
    pos_emb: Var,
    layers: Vec<[Var; PER_LAYER]>,
    final_gain: Var,
    final_bias: Var,
}

/// Per-layer keys and values of an already processed prefix.
///
/// Everything the backbone computes for the prefix rows depends only on those
/// rows, so later rows can be run against the cached keys and values and get
/// exactly what a full pass over the concatenated sequence would give them.
#[derive(Debug, Clone)]
pub struct PrefixState {
    len: usize,
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

impl PrefixState {
    pub fn empty(num_layers: usize) -> Self {
        Self {
            len: 0,
            keys: vec![Tensor::zeros(vec![0, 0]); num_layers],
            values: vec![Tensor::zeros(vec![0, 0]); num_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Backbone {
    pub fn init_random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParameterStore::new();
        for (name, shape) in config.parameter_layout() {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let data: Vec<f64> = match leaf {
                "tok_emb" => (0..n).map(|_| rng.normal(0.0, 1.0)).collect(),
                "pos_emb" => (0..n).map(|_| rng.normal(0.0, 0.1)).collect(),
                "gain" => vec![1.0; n],
                l if l.starts_with('b') => vec![0.0; n],
                _ => {
                    let std = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| rng.normal(0.0, std)).collect()
                }
            };
            let data = data.into_iter().map(to_f32_precision).collect();
            store.add(name, Tensor::new(shape, data)?, true)?;
        }
        Ok(Self { config, store })
    }

    pub fn from_named(config: BackboneConfig, params: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if params.len() != layout.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} tensors, found {}", layout.len(), params.len()),
            ));
        }
        let mut store = ParameterStore::new();
        for ((name, shape), p) in layout.into_iter().zip(params) {
            if p.name != name {
                return Err(Error::format(&p.name, format!("expected parameter `{name}`")));
            }
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::format(
                    &p.name,
                    format!("expected dims {shape:?}, found {:?}", p.tensor.shape()),
                ));
            }
            store.add(name, p.tensor, true)?;
        }
        Ok(Self { config, store })
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        let (config, params) = weights::read_file(path)?;
        Self::from_named(config, params)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        weights::write_file(path, &self.config, self.named())
    }

    /// Weight-file bytes; equal bytes mean equal parameters.
    pub fn serialize(&self) -> Vec<u8> {
        weights::encode(&self.config, self.named())
    }

    fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.store.iter().map(|(_, p)| (p.name.as_str(), &p.tensor))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    /// Word-embedding matrix `E`, `[V×D]`.
    pub fn token_embeddings(&self) -> &Tensor {
        &self.store.get(ParamId(0)).tensor
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        let mut id = 0;
        let mut next = |tape: &mut Tape| {
            let v = tape.param(&self.store, ParamId(id));
            id += 1;
            v
        };
        let tok_emb = next(tape);
        let pos_emb = next(tape);
        let layers = (0..self.config.num_layers)
            .map(|_| std::array::from_fn(|_| next(tape)))
            .collect();
        let final_gain = next(tape);
        let final_bias = next(tape);
        BackboneVars {
            tok_emb,
            pos_emb,
            layers,
            final_gain,
            final_bias,
        }
    }

    /// Final-layer hidden states for `inputs` `[L×D]`, already in embedding space.
    pub fn forward_embedded(&self, tape: &mut Tape, vars: &BackboneVars, inputs: Var) -> Result<Var> {
        Ok(self.run(tape, vars, inputs, None)?.0)
    }

    /// Like [`Backbone::forward_embedded`] for rows that follow a cached prefix.
    /// Returns hidden states for `inputs` only.
    pub fn forward_with_prefix(
        &self,
        tape: &mut Tape,
        vars: &BackboneVars,
        prefix: &PrefixState,
        inputs: Var,
    ) -> Result<Var> {
        Ok(self.run(tape, vars, inputs, Some(prefix))?.0)
    }

    /// Tensor-in, tensor-out convenience over a private tape.
    pub fn forward_tensor(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(inputs.clone());
        let y = self.forward_embedded(&mut tape, &vars, x)?;
        Ok(tape.tensor(y))
    }

    /// Runs `prefix` `[L×D]` once and keeps its per-layer keys and values.
    pub fn prefix_state(&self, prefix: &Tensor) -> Result<PrefixState> {
        let (len, _) = prefix.dims2()?;
        if len == 0 {
            return Ok(PrefixState::empty(self.config.num_layers));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(prefix.clone().with_requires_grad(false));
        let (_, kv) = self.run(&mut tape, &vars, x, None)?;
        let (keys, values) = kv.into_iter().map(|(k, v)| (tape.tensor(k), tape.tensor(v))).unzip();
        Ok(PrefixState { len, keys, values })
    }

    fn run(
        &self,
        tape: &mut Tape,
        vars: &BackboneVars,
        inputs: Var,
        prefix: Option<&PrefixState>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let offset = prefix.map_or(0, |p| p.len);
        let shape = tape.shape(inputs).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::Dimension {
                op: "backbone input",
                lhs: shape,
                rhs: vec![d],
            });
        }
        let len = shape[0];
        if offset + len > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len: offset + len,
                max: self.config.max_seq_len,
            });
        }

        let pos = tape.slice_rows(vars.pos_emb, offset, len)?;
        let mut h = tape.add(inputs, pos)?;
        let mut captured = Vec::with_capacity(vars.layers.len());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for (l, p) in vars.layers.iter().enumerate() {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *p;

            let a = tape.layer_norm(h, ln1_g, ln1_b, LN_EPS)?;
            let q = tape.matmul(a, wq)?;
            let q = tape.add_bias(q, bq)?;
            let k = tape.matmul(a, wk)?;
            let k = tape.add_bias(k, bk)?;
            let v = tape.matmul(a, wv)?;
            let v = tape.add_bias(v, bv)?;
            captured.push((k, v));

            let (k_all, v_all) = match prefix {
                Some(pre) if pre.len > 0 => {
                    let pk = tape.leaf(pre.keys[l].clone());
                    let pv = tape.leaf(pre.values[l].clone());
                    (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
                }
                _ => (k, v),
            };

            let qh = tape.split_heads(q, heads)?;
            let kh = tape.split_heads(k_all, heads)?;
            let vh = tape.split_heads(v_all, heads)?;
            let mut outs = Vec::with_capacity(heads);
            for i in 0..heads {
                let s = tape.matmul_t(qh[i], kh[i])?;
                let s = tape.scale(s, inv_sqrt);
                let w = tape.causal_softmax_rows(s, offset)?;
                outs.push(tape.matmul(w, vh[i])?);
            }
            let att = tape.concat_last_dim(&outs)?;
            let att = tape.matmul(att, wo)?;
            let att = tape.add_bias(att, bo)?;
            h = tape.add(h, att)?;

            let m = tape.layer_norm(h, ln2_g, ln2_b, LN_EPS)?;
            let f = tape.matmul(m, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            h = tape.add(h, f)?;
        }
        let out = tape.layer_norm(h, vars.final_gain, vars.final_bias, LN_EPS)?;
        Ok((out, captured))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 32,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 16,
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn single_row_keeps_shape() {
        let bb = Backbone::init_random(small(), 1).unwrap();
        let y = bb.forward_tensor(&random_input(1, 8, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 8]);
    }

    #[test]
    fn zero_layers_is_pos_plus_final_norm() {
        let cfg = BackboneConfig { num_layers: 0, ..small() };
        let bb = Backbone::init_random(cfg, 3).unwrap();
        let x = random_input(3, 8, 4);
        let y = bb.forward_tensor(&x).unwrap();
        let pos = &bb.store().get(ParamId(1)).tensor;
        for i in 0..3 {
            let row: Vec<f64> = x.row(i).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (got, v) in y.row(i).iter().zip(&row) {
                let expect = (v - mean) / (var + LN_EPS).sqrt();
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn later_positions_do_not_affect_earlier_outputs() {
        let bb = Backbone::init_random(small(), 5).unwrap();
        let x = random_input(6, 8, 6);
        let base = bb.forward_tensor(&x).unwrap();
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[4 * 8..] {
            *v += 0.7;
        }
        let out = bb.forward_tensor(&x2).unwrap();
        assert_eq!(&base.data()[..4 * 8], &out.data()[..4 * 8]);
        assert_ne!(&base.data()[4 * 8..], &out.data()[4 * 8..]);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let bb = Backbone::init_random(small(), 1).unwrap();
        assert!(matches!(
            bb.forward_tensor(&random_input(17, 8, 2)),
            Err(Error::SequenceLength { len: 17, max: 16 })
        ));
    }

    #[test]
    fn init_is_deterministic_and_frozen() {
        let a = Backbone::init_random(small(), 9).unwrap();
        let b = Backbone::init_random(small(), 9).unwrap();
        assert_eq!(a.serialize(), b.serialize());
        assert!(a.store().iter().all(|(_, p)| p.frozen));
        assert_ne!(a.serialize(), Backbone::init_random(small(), 10).unwrap().serialize());
    }

    #[test]
    fn weights_survive_a_file_round_trip() {
        let bb = Backbone::init_random(small(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.tllmw");
        bb.save_weights(&path).unwrap();
        let back = Backbone::load_weights(&path).unwrap();
        assert_eq!(back.serialize(), bb.serialize());
        for ((_, p), (_, q)) in bb.store().iter().zip(back.store().iter()) {
            assert_eq!(p.tensor.data(), q.tensor.data());
            assert!(q.frozen);
        }
    }

    #[test]
    fn dimension_mismatch_in_file_names_the_parameter() {
        let bb = Backbone::init_random(small(), 1).unwrap();
        let mut named: Vec<NamedTensor> = bb
            .store()
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                tensor: p.tensor.clone(),
            })
            .collect();
        named[3].tensor = Tensor::zeros(vec![9]);
        match Backbone::from_named(small(), named) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "layers.0.ln1.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prefix_route_matches_full_pass() {
        let bb = Backbone::init_random(small(), 12).unwrap();
        let prompt = random_input(5, 8, 13);
        let patches = random_input(4, 8, 14);
        let mut rows = prompt.data().to_vec();
        rows.extend_from_slice(patches.data());
        let full = bb.forward_tensor(&Tensor::new(vec![9, 8], rows).unwrap()).unwrap();

        let state = bb.prefix_state(&prompt).unwrap();
        let mut tape = Tape::new();
        let vars = bb.bind(&mut tape);
        let x = tape.leaf(patches);
        let y = bb.forward_with_prefix(&mut tape, &vars, &state, x).unwrap();
        for (a, b) in tape.value(y).iter().zip(&full.data()[5 * 8..]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
