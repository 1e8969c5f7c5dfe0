//! Directional finite-difference checks: for a random unit direction `v`
//! over all trainable parameters, `∇L·v` must match the central difference
//! of `L` along `v`.

use timellm::backbone::{Backbone, BackboneConfig};
use timellm::model::{Ablations, ModelConfig, PromptSpec, TimeLlmModel};
use timellm::reprogram::PatchConfig;
use timellm::rng::SplitMix64;
use timellm::train::{LossKind, PreparedSample, SMAPE_GUARD};
use timellm::Tape;

fn model(seed: u64, ablations: Ablations, affine: bool) -> TimeLlmModel {
    let bcfg = BackboneConfig {
        vocab_size: 256,
        hidden_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 24,
        max_seq_len: 320,
    };
    let cfg = ModelConfig {
        lookback: 24,
        horizon: 5,
        patch: PatchConfig { patch_len: 6, stride: 3 },
        d_model: 8,
        heads: 2,
        prototypes: 6,
        revin_affine: affine,
        ablations,
        ..Default::default()
    };
    let backbone = Backbone::init_random(bcfg, seed + 100).unwrap();
    TimeLlmModel::new(cfg, backbone, PromptSpec::new("directional check"), seed).unwrap()
}

fn sample(model: &TimeLlmModel, seed: u64) -> PreparedSample {
    let mut rng = SplitMix64::new(seed);
    let input: Vec<f64> = (0..24).map(|t| (t as f64 * 0.4).cos() * 3.0 + rng.normal(1.0, 0.5)).collect();
    let target = (0..5).map(|_| rng.normal(1.0, 2.0)).collect();
    PreparedSample { window: model.prepare(&input).unwrap(), target }
}

fn loss_and_grad(model: &mut TimeLlmModel, s: &PreparedSample, loss: LossKind) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let y = model.forward_prepared(&mut tape, &bound, &s.window, None).unwrap();
    let l = match loss {
        LossKind::Mse => tape.mse_scalar(y, &s.target).unwrap(),
        LossKind::Smape => tape.smape_scalar(y, &s.target, SMAPE_GUARD).unwrap(),
    };
    tape.backward(l).unwrap();
    let store = model.trainable_mut();
    store.zero_grads();
    store.accumulate_grads(&tape).unwrap();
    let grads = store
        .iter()
        .map(|(_, p)| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        .collect();
    (tape.value(l)[0], grads)
}

fn shifted(model: &mut TimeLlmModel, base: &[Vec<f64>], dir: &[Vec<f64>], h: f64) {
    let moved: Vec<Vec<f64>> =
        base.iter().zip(dir).map(|(b, d)| b.iter().zip(d).map(|(x, v)| x + h * v).collect()).collect();
    model.trainable_mut().restore(&moved).unwrap();
}

fn check(mut m: TimeLlmModel, seed: u64, loss: LossKind) {
    let s = sample(&m, seed);
    let (_, grads) = loss_and_grad(&mut m, &s, loss);
    let base = m.trainable().snapshot();
    let mut rng = SplitMix64::new(seed ^ 0xd1ec);
    let mut dir: Vec<Vec<f64>> = base.iter().map(|p| p.iter().map(|_| rng.normal(0.0, 1.0)).collect()).collect();
    let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().flatten().for_each(|v| *v /= norm);
    let analytic: f64 = grads.iter().flatten().zip(dir.iter().flatten()).map(|(g, v)| g * v).sum();

    let h = 1e-4;
    let mut at = |x: f64| {
        shifted(&mut m, &base, &dir, x);
        loss_and_grad(&mut m, &s, loss).0
    };
    let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
    assert!(rel < 1e-5, "seed {seed} {loss:?}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
}

#[test]
fn full_model_mse() {
    for seed in 0..6 {
        check(model(seed, Ablations::default(), seed % 2 == 1), seed, LossKind::Mse);
    }
}

#[test]
fn full_model_smape() {
    for seed in 0..4 {
        check(model(seed, Ablations::default(), true), seed, LossKind::Smape);
    }
}

#[test]
fn every_variant() {
    for (i, id) in Ablations::VARIANTS.iter().enumerate() {
        let a = Ablations::variant(id).unwrap();
        check(model(20 + i as u64, a, false), 20 + i as u64, LossKind::Mse);
    }
}
