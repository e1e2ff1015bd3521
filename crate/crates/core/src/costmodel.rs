//! Analytic cost model for transformer layers.
//!
//! FLOP convention: one multiply-add counts as 2 FLOPs. LayerNorm, softmax,
//! residual adds and embeddings are not counted. LoRA adapters sit on the
//! four attention projections (Q, K, V, O) of every adapted layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FLOPS_PER_MAC: f64 = 2.0;

/// Number of adapted projections per layer (Q, K, V, O), each `d -> d`.
pub const ADAPTED_PROJECTIONS: usize = 4;

/// Adapter parameters travel as f32 when synchronised.
pub const ADAPTER_PARAM_BYTES: usize = 4;

fn default_bytes_per_element() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_activation_element: usize,
}

impl ModelProfile {
    pub fn gpt2_small() -> Self {
        Self {
            name: "gpt2-small".into(),
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vocab_size: 50257,
            bytes_per_activation_element: 4,
        }
    }

    pub fn llama32_1b() -> Self {
        Self {
            name: "llama-3.2-1b".into(),
            num_layers: 16,
            hidden_dim: 2048,
            num_heads: 32,
            ffn_dim: 8192,
            vocab_size: 128_256,
            bytes_per_activation_element: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("bytes_per_activation_element", self.bytes_per_activation_element),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(Error::InvalidProfile(format!("model.{field} must be > 0")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidProfile(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub device_id: u32,
    /// FLOP/s.
    pub peak_flops: f64,
    /// Length of the frozen prefix the device runs.
    pub assigned_layers: usize,
}

impl DeviceProfile {
    pub fn validate(&self, model: &ModelProfile) -> Result<()> {
        if !(self.peak_flops > 0.0 && self.peak_flops.is_finite()) {
            return Err(Error::InvalidProfile(format!(
                "device {}: peak_flops must be > 0",
                self.device_id
            )));
        }
        if self.assigned_layers > model.num_layers {
            return Err(Error::InvalidProfile(format!(
                "device {}: assigned_layers {} exceeds num_layers {}",
                self.device_id, self.assigned_layers, model.num_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelProfile {
    /// bits/s.
    pub rate: f64,
    /// Seconds added to every message.
    #[serde(default)]
    pub per_message_overhead: f64,
}

impl ChannelProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::InvalidProfile("channel.rate must be > 0".into()));
        }
        if !(self.per_message_overhead >= 0.0 && self.per_message_overhead.is_finite()) {
            return Err(Error::InvalidProfile(
                "channel.per_message_overhead must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerProfile {
    pub peak_flops: f64,
    /// Deepest device cut; layers at or above it are the shared layers.
    #[serde(default)]
    pub max_shared_layer_start: usize,
}

impl ServerProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops > 0.0 && self.peak_flops.is_finite()) {
            return Err(Error::InvalidProfile("server.peak_flops must be > 0".into()));
        }
        Ok(())
    }
}

fn default_batch_size() -> usize {
    72
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seq_len: usize,
    /// LoRA rank R. Zero is accepted by the cost functions (no adapters).
    pub lora_rank: usize,
    /// Microbatches each device contributes per epoch.
    pub rounds: usize,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.lora_rank == 0 {
            return Err(Error::InvalidProfile(
                "workload.batch_size, seq_len and lora_rank must be > 0".into(),
            ));
        }
        Ok(())
    }

    fn tokens(&self) -> f64 {
        (self.batch_size * self.seq_len) as f64
    }
}

/// Forward FLOPs of one transformer layer for a whole batch:
/// `batch * seq * (24 d^2 + 4 d seq)`.
pub fn forward_flops_per_layer(m: &ModelProfile, w: &WorkloadSpec) -> f64 {
    let d = m.hidden_dim as f64;
    let s = w.seq_len as f64;
    w.tokens() * (24.0 * d * d + 4.0 * d * s)
}

/// Extra forward FLOPs of the adapters on one layer:
/// `batch * seq * sum over projections of 2 R (d_in + d_out)`.
pub fn lora_flops_per_layer(m: &ModelProfile, w: &WorkloadSpec) -> f64 {
    let d = m.hidden_dim as f64;
    let r = w.lora_rank as f64;
    let per_projection = FLOPS_PER_MAC * r * (d + d);
    w.tokens() * ADAPTED_PROJECTIONS as f64 * per_projection
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFlops {
    /// Input-gradient pass.
    pub grad: f64,
    /// Weight gradients of the frozen base weights (never materialised).
    pub weight_frozen: f64,
    /// Weight gradients of both adapter factors.
    pub weight_lora: f64,
}

impl BackwardFlops {
    pub fn total(&self) -> f64 {
        self.grad + self.weight_frozen + self.weight_lora
    }
}

pub fn backward_flops_per_layer(m: &ModelProfile, w: &WorkloadSpec) -> BackwardFlops {
    BackwardFlops {
        grad: forward_flops_per_layer(m, w),
        weight_frozen: 0.0,
        weight_lora: 2.0 * lora_flops_per_layer(m, w),
    }
}

/// Forward + adapters + B + W for one LoRA-fine-tuned layer.
pub fn finetune_flops_per_layer(m: &ModelProfile, w: &WorkloadSpec) -> f64 {
    forward_flops_per_layer(m, w) + lora_flops_per_layer(m, w) + backward_flops_per_layer(m, w).total()
}

/// Bytes of the activation tensor a device ships. Independent of the cut depth.
pub fn activation_bytes(m: &ModelProfile, w: &WorkloadSpec) -> f64 {
    (w.batch_size * w.seq_len * m.hidden_dim * m.bytes_per_activation_element) as f64
}

pub fn adapter_params_per_layer(m: &ModelProfile, w: &WorkloadSpec) -> usize {
    ADAPTED_PROJECTIONS * w.lora_rank * (m.hidden_dim + m.hidden_dim)
}

pub fn adapter_bytes(m: &ModelProfile, w: &WorkloadSpec, layers: usize) -> f64 {
    (adapter_params_per_layer(m, w) * layers * ADAPTER_PARAM_BYTES) as f64
}

pub fn stage_time(flops: f64, capacity: f64) -> f64 {
    flops / capacity
}

pub fn xmit_time(bytes: f64, ch: &ChannelProfile) -> f64 {
    bytes * 8.0 / ch.rate + ch.per_message_overhead
}
