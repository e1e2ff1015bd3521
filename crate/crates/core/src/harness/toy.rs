//! Toy-scale training runs, one per scheme.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::datapart::{DeviceShard, ToyDataset};
use crate::error::{Error, Result};
use crate::lora::{Optimizer, TrainConfig};
use crate::numerics::{train_step, ParamId, Tensor2D, ToyConfig, ToyModel};
use crate::protocol::{
    round_seed, run_rounds, DeviceSession, DeviceWorker, ElemType, EngineConfig, Loopback, Recorder, ServerEngine,
};
use crate::rng;

/// Loss trajectory of one toy run.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    /// Sample-weighted mean training loss per round.
    pub train_losses: Vec<f64>,
    /// Mean loss of the final model on the held-out set.
    pub final_loss: f64,
}

/// Everything a toy run needs besides the scheme.
pub struct ToySetup<'a> {
    pub toy: &'a ToyConfig,
    pub train: &'a TrainConfig,
    pub data: &'a ToyDataset,
    pub test: &'a ToyDataset,
    pub shards: &'a [DeviceShard],
    pub rounds: u32,
    pub pooled_batch_size: usize,
    pub local_batch_size: usize,
    pub elem: ElemType,
    pub seed: u64,
}

impl ToySetup<'_> {
    fn eval(&self, model: &ToyModel) -> Result<f64> {
        model.eval_loss(&self.test.inputs, 0, &self.test.labels)
    }

    fn local_order(&self, shard: &DeviceShard, round: u32) -> Vec<usize> {
        let mut idx = shard.sample_indices.clone();
        let tag = (u64::from(round) << 32) | u64::from(shard.device_id);
        rng::shuffle(&mut rng::seeded(rng::derive(self.seed, tag)), &mut idx);
        idx
    }
}

fn weighted_mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Device prefixes over the protocol engine. Depths are clamped so at least
/// one layer stays on the server.
pub fn run_splitfrozen(s: &ToySetup, depths: &[usize], record: Option<&Path>) -> Result<ToyRun> {
    if depths.len() != s.shards.len() {
        return Err(Error::Config(format!(
            "{} depths for {} shards",
            depths.len(),
            s.shards.len()
        )));
    }
    let max_depth = s.toy.depth.saturating_sub(1);
    let base = ToyModel::new(s.toy.clone())?;
    let mut workers = Vec::with_capacity(s.shards.len());
    for (shard, &d) in s.shards.iter().zip(depths) {
        let (inputs, labels) = s.data.gather(&shard.sample_indices);
        workers.push(DeviceWorker {
            session: DeviceSession::new(shard.device_id, base.frozen_prefix(d.min(max_depth))?, s.elem),
            inputs,
            labels,
            sample_ids: shard.sample_indices.iter().map(|&i| i as u64).collect(),
            local_batch_size: s.local_batch_size,
        });
    }
    let cfg = EngineConfig {
        pooled_batch_size: s.pooled_batch_size,
        shuffle_seed: s.seed,
    };
    let mut engine = ServerEngine::new(base, s.train.clone(), cfg)?;
    let reports = match record {
        Some(path) => {
            let mut rec = Recorder::new(Loopback::new(), BufWriter::new(File::create(path)?));
            let reports = run_rounds(&mut engine, &mut workers, s.rounds, &mut rec)?;
            let (_, mut log) = rec.into_parts();
            std::io::Write::flush(&mut log)?;
            reports
        }
        None => run_rounds(&mut engine, &mut workers, s.rounds, &mut Loopback::new())?,
    };
    Ok(ToyRun {
        train_losses: reports.iter().map(|r| r.mean_loss).collect(),
        final_loss: s.eval(engine.model())?,
    })
}

/// All data on one machine, adapters on every layer.
pub fn run_cenlora(s: &ToySetup) -> Result<ToyRun> {
    let mut model = ToyModel::new(s.toy.clone())?;
    model.attach_shared_adapters(0)?;
    let mut opt: Optimizer<ParamId> = Optimizer::new(s.train.clone());
    let mut all: Vec<usize> = s
        .shards
        .iter()
        .flat_map(|sh| sh.sample_indices.iter().copied())
        .collect();
    all.sort_unstable();
    let mut train_losses = Vec::new();
    for round in 0..s.rounds {
        let mut ids = all.clone();
        rng::shuffle(&mut rng::seeded(round_seed(s.seed, round)), &mut ids);
        let mut sum = 0.0;
        for chunk in ids.chunks(s.pooled_batch_size.max(1)) {
            let (x, y) = s.data.gather(chunk);
            sum += train_step(&mut model, &x, &y, 0, &mut opt)? * chunk.len() as f64;
        }
        train_losses.push(weighted_mean(sum, ids.len()));
    }
    Ok(ToyRun {
        train_losses,
        final_loss: s.eval(&model)?,
    })
}

/// Replaces `global`'s values of `ids` with the shard-size-weighted mean over `locals`.
fn average_into(global: &mut ToyModel, locals: &[(ToyModel, usize)], ids: &[ParamId]) -> Result<()> {
    let total: usize = locals.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Ok(());
    }
    for &id in ids {
        let mut acc: Option<Tensor2D> = None;
        for (m, n) in locals {
            let p = m
                .param(id)
                .ok_or_else(|| Error::Invariant(format!("missing parameter {id:?}")))?
                .scale(*n as f64 / total as f64);
            match acc.as_mut() {
                Some(a) => a.add_assign(&p)?,
                None => acc = Some(p),
            }
        }
        if let (Some(a), Some(slot)) = (acc, global.param_mut(id)) {
            *slot = a;
        }
    }
    Ok(())
}

/// One local pass per device per round, then sample-weighted averaging of
/// adapters and head.
pub fn run_fedlora(s: &ToySetup) -> Result<ToyRun> {
    let mut global = ToyModel::new(s.toy.clone())?;
    global.attach_shared_adapters(0)?;
    let ids = global.trainable_params();
    let mut train_losses = Vec::new();
    for round in 0..s.rounds {
        let mut locals = Vec::with_capacity(s.shards.len());
        let (mut sum, mut n) = (0.0, 0);
        for shard in s.shards {
            let mut local = global.clone();
            let mut opt: Optimizer<ParamId> = Optimizer::new(s.train.clone());
            for chunk in s.local_order(shard, round).chunks(s.local_batch_size.max(1)) {
                let (x, y) = s.data.gather(chunk);
                sum += train_step(&mut local, &x, &y, 0, &mut opt)? * chunk.len() as f64;
                n += chunk.len();
            }
            local.clear_caches();
            locals.push((local, shard.len()));
        }
        average_into(&mut global, &locals, &ids)?;
        train_losses.push(weighted_mean(sum, n));
    }
    Ok(ToyRun {
        train_losses,
        final_loss: s.eval(&global)?,
    })
}

/// Trainable device prefix of `cut` layers, server suffix trained
/// sequentially per device, device adapters averaged after each round.
pub fn run_splitlora(s: &ToySetup, cut: usize) -> Result<ToyRun> {
    let depth = s.toy.depth;
    let cut = cut.clamp(1, depth.saturating_sub(1).max(1));
    let mut server = ToyModel::new(s.toy.clone())?;
    server.attach_adapters(cut..depth)?;
    let mut device = ToyModel::new(s.toy.clone())?;
    device.attach_adapters(0..cut)?;
    let device_ids: Vec<ParamId> = device
        .trainable_params()
        .into_iter()
        .filter(|id| !matches!(id, ParamId::HeadWeight | ParamId::HeadBias))
        .collect();
    let mut server_opt: Optimizer<ParamId> = Optimizer::new(s.train.clone());
    let mut train_losses = Vec::new();
    for round in 0..s.rounds {
        let mut locals = Vec::with_capacity(s.shards.len());
        let (mut sum, mut n) = (0.0, 0);
        for shard in s.shards {
            let mut local = device.clone();
            let mut opt: Optimizer<ParamId> = Optimizer::new(s.train.clone());
            for chunk in s.local_order(shard, round).chunks(s.local_batch_size.max(1)) {
                let (x, y) = s.data.gather(chunk);
                let smashed = local.forward_prefix(&x, 0, cut, true)?;
                let acts = server.forward_prefix(&smashed, cut, depth, true)?;
                let head = server.loss_and_grad(&acts, &y)?;
                let (grad, mut ctx) = server.backward_b(&head.grad, cut, depth)?;
                ctx.head = Some(head.ctx);
                server.backward_w(&ctx, &mut server_opt)?;
                let (_, dctx) = local.backward_b(&grad, 0, cut)?;
                local.backward_w(&dctx, &mut opt)?;
                sum += head.loss * chunk.len() as f64;
                n += chunk.len();
            }
            local.clear_caches();
            locals.push((local, shard.len()));
        }
        average_into(&mut device, &locals, &device_ids)?;
        server.clear_caches();
        train_losses.push(weighted_mean(sum, n));
    }
    let mut merged = server;
    for layer in 0..cut {
        for &proj in s.toy.adapter_targets() {
            if let Some(a) = device.adapter(layer, proj) {
                merged.set_adapter(layer, a.clone())?;
            }
        }
    }
    Ok(ToyRun {
        train_losses,
        final_loss: s.eval(&merged)?,
    })
}
