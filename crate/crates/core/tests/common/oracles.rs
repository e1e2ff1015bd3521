use splitfrozen::lora::{Optimizer, Projection, TrainConfig};
use splitfrozen::numerics::{Head, ParamId, Tensor2D, ToyConfig, ToyModel};
use splitfrozen::rng;

use super::reference::{bits, to_m, RefModel};

/// Random small config, adapter start layer, batch size and learning rate.
pub fn random_toy(seed: u64) -> (ToyConfig, usize, usize, f64) {
    let mut r = rng::seeded(rng::derive(seed, 77));
    let mut pick = |n: usize| rng::index(&mut r, n);
    let depth = 1 + pick(4);
    let attention = pick(2) == 0;
    let cfg = ToyConfig {
        hidden: Some([6, 8, 16][pick(3)]),
        seq_len: if attention { 1 + pick(3) } else { 1 },
        attention,
        lora_rank: 1 + pick(4),
        lora_alpha: [None, Some(2.0), Some(16.0)][pick(3)],
        ..ToyConfig::new(depth, [4, 8, 12][pick(3)], 2 + pick(4), seed)
    };
    let from = pick(depth + 1);
    (cfg, from, 1 + pick(5), [0.01, 0.1, 0.5][pick(3)])
}

/// Adapters on `from..` plus a head, all with non-zero random values.
pub fn randomized_model(cfg: &ToyConfig, from: usize, seed: u64) -> ToyModel {
    let mut m = ToyModel::new(cfg.clone()).unwrap();
    m.attach_shared_adapters(from).unwrap();
    let mut r = rng::seeded(rng::derive(seed, 99));
    let mut adapters = Vec::new();
    for layer in from..cfg.depth {
        for &p in Projection::ALL.iter() {
            if let Some(a) = m.adapter(layer, p) {
                let mut a = a.clone();
                a.up = Tensor2D::randn(a.up.rows(), a.up.cols(), 0.3, &mut r);
                adapters.push((layer, a));
            }
        }
    }
    for (layer, a) in adapters {
        m.set_adapter(layer, a).unwrap();
    }
    m.set_head(Head {
        weight: Tensor2D::randn(cfg.classes, cfg.width, 0.5, &mut r),
        bias: Tensor2D::randn(1, cfg.classes, 0.1, &mut r),
    })
    .unwrap();
    m
}

pub fn random_batch(cfg: &ToyConfig, samples: usize, seed: u64) -> (Tensor2D, Vec<u32>) {
    let mut r = rng::seeded(rng::derive(seed, 5));
    let x = Tensor2D::randn(samples * cfg.seq_len, cfg.width, 1.0, &mut r);
    let y = (0..samples).map(|_| rng::index(&mut r, cfg.classes) as u32).collect();
    (x, y)
}

/// Two SGD steps through the B/W split vs the fused reference. `Err`
/// describes the first bit-level difference.
pub fn fused_oracle_case(seed: u64) -> Result<(), String> {
    let (cfg, from, samples, lr) = random_toy(seed);
    let mut model = randomized_model(&cfg, from, seed);
    let mut oracle = RefModel::from_model(&model);
    let mut opt: Optimizer<ParamId> = Optimizer::new(TrainConfig::sgd(lr));
    let depth = cfg.depth;
    for step in 0..2 {
        let (x, y) = random_batch(&cfg, samples, seed * 10 + step);
        let acts = model.forward_prefix(&x, from, depth, true).map_err(|e| e.to_string())?;
        let head = model.loss_and_grad(&acts, &y).map_err(|e| e.to_string())?;
        let (dx, mut ctx) = model.backward_b(&head.grad, from, depth).map_err(|e| e.to_string())?;
        ctx.head = Some(head.ctx);
        model.backward_w(&ctx, &mut opt).map_err(|e| e.to_string())?;
        let (loss, g) = oracle.sgd_step(&to_m(&x), &y, from, lr);
        if loss.to_bits() != head.loss.to_bits() {
            return Err(format!("seed {seed} step {step}: loss {} vs {loss}", head.loss));
        }
        if bits(dx.data()) != bits(&g.d) {
            return Err(format!("seed {seed} step {step}: input gradient differs"));
        }
        for id in model.trainable_params() {
            if bits(model.param(id).unwrap().data()) != bits(&oracle.param(id).d) {
                return Err(format!("seed {seed} step {step}: {id:?} differs"));
            }
        }
    }
    Ok(())
}

pub const FD_EPS: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic adapter and head gradients and
/// central differences, over every trainable parameter element.
pub fn finite_difference_case(seed: u64) -> f64 {
    let cfg = ToyConfig {
        seq_len: 3,
        attention: true,
        ..ToyConfig::new(3, 8, 3, seed)
    };
    let mut model = randomized_model(&cfg, 0, seed);
    let (x, y) = random_batch(&cfg, 4, seed);
    let acts = model.forward_prefix(&x, 0, 3, true).unwrap();
    let head = model.loss_and_grad(&acts, &y).unwrap();
    let (_, mut ctx) = model.backward_b(&head.grad, 0, 3).unwrap();
    ctx.head = Some(head.ctx);
    let grads = model.weight_gradients(&ctx).unwrap();
    let mut worst: f64 = 0.0;
    for id in model.trainable_params() {
        let analytic = &grads[&id];
        for i in 0..analytic.data().len() {
            let orig = model.param(id).unwrap().data()[i];
            model.param_mut(id).unwrap().data_mut()[i] = orig + FD_EPS;
            let up = model.eval_loss(&x, 0, &y).unwrap();
            model.param_mut(id).unwrap().data_mut()[i] = orig - FD_EPS;
            let down = model.eval_loss(&x, 0, &y).unwrap();
            model.param_mut(id).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Composed device prefix + server suffix equals the whole forward at every cut.
pub fn split_case(seed: u64) -> Result<(), String> {
    let (cfg, from, samples, _) = random_toy(seed);
    let model = randomized_model(&cfg, from, seed);
    let (x, _) = random_batch(&cfg, samples, seed);
    let whole = model.forward(&x, 0, cfg.depth).unwrap();
    for cut in 0..=from {
        let dev = model.frozen_prefix(cut).unwrap().forward(&x).unwrap();
        let composed = model.forward(&dev, cut, cfg.depth).unwrap();
        if bits(composed.data()) != bits(whole.data()) {
            return Err(format!("seed {seed}: cut {cut} differs"));
        }
    }
    // Arbitrary cuts through adapted layers, server side only.
    for cut in 0..=cfg.depth {
        let lower = model.forward(&x, 0, cut).unwrap();
        let composed = model.forward(&lower, cut, cfg.depth).unwrap();
        if bits(composed.data()) != bits(whole.data()) {
            return Err(format!("seed {seed}: range split at {cut} differs"));
        }
    }
    Ok(())
}
