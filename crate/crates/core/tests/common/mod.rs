#![allow(dead_code)]

pub mod oracles;
pub mod reference;

use splitfrozen::datapart::{partition, PartitionSpec, ToyDataset};
use splitfrozen::lora::{Optimizer, TrainConfig};
use splitfrozen::numerics::{train_step, ParamId, Tensor2D, ToyConfig, ToyModel};
use splitfrozen::protocol::{
    round_seed, run_rounds, DeviceSession, DeviceWorker, ElemType, EngineConfig, Loopback, RoundReport, ServerEngine,
};
use splitfrozen::rng;

pub struct Scenario {
    pub toy: ToyConfig,
    pub data: ToyDataset,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub rounds: u32,
    pub local_batch: usize,
}

impl Scenario {
    pub fn small(seed: u64) -> Self {
        let toy = ToyConfig {
            seq_len: 2,
            attention: true,
            ..ToyConfig::new(4, 8, 3, 100 + seed)
        };
        let data = ToyDataset::synthetic(90, 3, 8, 2, 7).unwrap();
        Self {
            toy,
            data,
            train: TrainConfig::sgd(0.05),
            engine: EngineConfig {
                pooled_batch_size: 16,
                shuffle_seed: 31,
            },
            rounds: 3,
            local_batch: 5,
        }
    }

    /// Distributed run: shards from `spec`, device `i` gets `depths[i]` layers.
    pub fn distributed(&self, spec: &PartitionSpec, depths: &[usize], elem: ElemType) -> (Vec<RoundReport>, ToyModel) {
        let base = ToyModel::new(self.toy.clone()).unwrap();
        let shards = partition(&self.data.labels, spec).unwrap();
        let mut workers: Vec<DeviceWorker> = shards
            .iter()
            .zip(depths)
            .map(|(s, &d)| {
                let (inputs, labels) = self.data.gather(&s.sample_indices);
                DeviceWorker {
                    session: DeviceSession::new(s.device_id, base.frozen_prefix(d).unwrap(), elem),
                    inputs,
                    labels,
                    sample_ids: s.sample_indices.iter().map(|&i| i as u64).collect(),
                    local_batch_size: self.local_batch,
                }
            })
            .collect();
        let mut engine = ServerEngine::new(base, self.train.clone(), self.engine).unwrap();
        let reports = run_rounds(&mut engine, &mut workers, self.rounds, &mut Loopback::new()).unwrap();
        (reports, engine.into_model())
    }

    /// Plain single-machine loop: whole dataset through the frozen prefix,
    /// seeded permutation of sample ids, one LoRA step per mini-batch.
    pub fn centralized(&self, cut: usize) -> (Vec<Vec<f64>>, ToyModel) {
        let mut model = ToyModel::new(self.toy.clone()).unwrap();
        model.attach_shared_adapters(cut).unwrap();
        let mut opt: Optimizer<ParamId> = Optimizer::new(self.train.clone());
        let mut losses = Vec::new();
        for r in 0..self.rounds {
            let mut ids: Vec<usize> = (0..self.data.len()).collect();
            rng::shuffle(&mut rng::seeded(round_seed(self.engine.shuffle_seed, r)), &mut ids);
            let mut round = Vec::new();
            for chunk in ids.chunks(self.engine.pooled_batch_size) {
                let (x, y) = self.data.gather(chunk);
                let acts = model.forward(&x, 0, cut).unwrap();
                round.push(train_step(&mut model, &acts, &y, cut, &mut opt).unwrap());
            }
            losses.push(round);
        }
        (losses, model)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Largest elementwise difference over all trainable parameters.
pub fn max_param_diff(a: &ToyModel, b: &ToyModel) -> f64 {
    let ids = a.trainable_params();
    assert_eq!(ids, b.trainable_params(), "parameter sets differ");
    ids.iter()
        .map(|&id| a.param(id).unwrap().max_abs_diff(b.param(id).unwrap()))
        .fold(0.0, f64::max)
}

pub fn reference_depths() -> Vec<usize> {
    (0..10).map(|i| if i < 3 { 1 } else { 3 }).collect()
}

pub fn tensor_hash(t: &Tensor2D) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(t.to_le_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn reference_cluster() -> splitfrozen::scheduler::ClusterSpec {
    use splitfrozen::costmodel::{ChannelProfile, DeviceProfile, ModelProfile, ServerProfile, WorkloadSpec};
    use splitfrozen::scheduler::{ChannelTopology, ClusterSpec};
    let gpu = 82.6e12;
    ClusterSpec {
        devices: (0..10)
            .map(|i| DeviceProfile {
                device_id: i,
                peak_flops: if i < 3 { 0.1 * gpu } else { 0.2 * gpu },
                assigned_layers: 0,
            })
            .collect(),
        channel: ChannelProfile {
            rate: 600e6,
            per_message_overhead: 0.0,
        },
        topology: ChannelTopology::PerDevice,
        server: ServerProfile {
            peak_flops: 330.4e12,
            max_shared_layer_start: 0,
        },
        model: ModelProfile::gpt2_small(),
        workload: WorkloadSpec {
            batch_size: 72,
            seq_len: 128,
            lora_rank: 4,
            rounds: 6,
        },
        utilization: 0.35,
        layer_bounds: Some((1, 3)),
        splitlora_cut: 3,
    }
}

/// A random small cluster and a depth vector for it (allocated or arbitrary).
pub fn random_cluster(seed: u64) -> (splitfrozen::scheduler::ClusterSpec, Vec<usize>) {
    use splitfrozen::costmodel::{ChannelProfile, DeviceProfile, ModelProfile, ServerProfile, WorkloadSpec};
    use splitfrozen::scheduler::{allocate_layers, ChannelTopology, ClusterSpec};
    let mut r = rng::seeded(seed);
    let mut pick = |n: usize| rng::index(&mut r, n);
    let layers = 2 + pick(11);
    let d = [64, 128, 256][pick(3)];
    let n = 1 + pick(6);
    let tiers = [1e11, 2e11, 4e11, 8e11];
    let devices = (0..n as u32)
        .map(|i| DeviceProfile {
            device_id: i * 3 + 1,
            peak_flops: tiers[pick(4)],
            assigned_layers: 0,
        })
        .collect();
    let lo = pick(2);
    let hi = lo + pick(layers.min(4) - lo + 1);
    let mut c = ClusterSpec {
        devices,
        channel: ChannelProfile {
            rate: [1e7, 1e8, 6e8, 1e9][pick(4)],
            per_message_overhead: [0.0, 1e-4][pick(2)],
        },
        topology: [ChannelTopology::Shared, ChannelTopology::PerDevice][pick(2)],
        server: ServerProfile {
            peak_flops: [1e12, 1e13][pick(2)],
            max_shared_layer_start: 0,
        },
        model: ModelProfile {
            name: "fuzz".into(),
            num_layers: layers,
            hidden_dim: d,
            num_heads: 4,
            ffn_dim: 4 * d,
            vocab_size: 1000,
            bytes_per_activation_element: 4,
        },
        workload: WorkloadSpec {
            batch_size: 1 + pick(8),
            seq_len: 8 + pick(57),
            lora_rank: 1 + pick(8),
            rounds: 1 + pick(4),
        },
        utilization: 0.1 + 0.9 * (pick(1000) as f64 / 999.0),
        layer_bounds: Some((lo, hi)),
        splitlora_cut: 1 + pick(layers),
    };
    let depths = if pick(2) == 0 {
        allocate_layers(&c).unwrap()
    } else {
        (0..n).map(|_| pick(layers + 1)).collect()
    };
    if pick(4) == 0 {
        c.workload.rounds = 1;
    }
    (c, depths)
}
