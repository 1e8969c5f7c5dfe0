//! Output projection from backbone hidden states to the forecast horizon.

use crate::reprogram::RevinState;
use crate::rng::SplitMix64;
use crate::{Error, ParamId, ParameterStore, Result, Tape, Tensor, Var};

/// Learnable RevIN affine terms, applied inversely after projection.
pub const AFFINE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct OutputHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub num_patches: usize,
    pub hidden_dim: usize,
    pub horizon: usize,
}

impl OutputHead {
    pub fn init(
        store: &mut ParameterStore,
        num_patches: usize,
        hidden_dim: usize,
        horizon: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let fan_in = num_patches * hidden_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * horizon).map(|_| rng.uniform(-bound, bound)).collect();
        let weight = store.add("head.weight", Tensor::new(vec![fan_in, horizon], w)?, false)?;
        let b = (0..horizon).map(|_| rng.uniform(-bound, bound)).collect();
        let bias = store.add("head.bias", Tensor::new(vec![horizon], b)?, false)?;
        Ok(Self {
            weight,
            bias,
            num_patches,
            hidden_dim,
            horizon,
        })
    }
}

/// How to map normalized outputs back to input units.
#[derive(Debug, Clone, Copy)]
pub struct Denormalize {
    pub state: RevinState,
    /// `(gain, bias)` of a learnable RevIN affine, if enabled.
    pub affine: Option<(Var, Var)>,
}

/// Drops the first `prompt_len` rows of `hidden`, flattens the remaining
/// `P×D` row-major, applies `weight`/`bias`, and denormalizes. Returns `[1×H]`.
pub fn project(
    tape: &mut Tape,
    hidden: Var,
    prompt_len: usize,
    head: &OutputHead,
    weight: Var,
    bias: Var,
    denorm: &Denormalize,
) -> Result<Var> {
    let shape = tape.shape(hidden).to_vec();
    let expected = prompt_len + head.num_patches;
    if shape.len() != 2 || shape[0] != expected || shape[1] != head.hidden_dim {
        return Err(Error::contract(format!(
            "head expects [{expected}x{}] hidden states (prompt {prompt_len} + {} patches), got {shape:?}",
            head.hidden_dim, head.num_patches
        )));
    }
    let patches = if prompt_len > 0 {
        tape.slice_rows(hidden, prompt_len, head.num_patches)?
    } else {
        hidden
    };
    let flat = tape.reshape(patches, vec![1, head.num_patches * head.hidden_dim])?;
    let y = tape.matmul(flat, weight)?;
    let mut y = tape.add_bias(y, bias)?;
    if let Some((gain, b)) = denorm.affine {
        y = tape.affine_inverse(y, gain, b, AFFINE_EPS)?;
    }
    Ok(tape.affine(y, denorm.state.scale(), denorm.state.mean))
}
