//! Device and server state machines for split training with frozen device
//! prefixes.
//!
//! A device registers its prefix depth once, then only runs forward passes
//! and ships activations (with labels and global sample ids). The server
//! brings every batch up to the deepest device cut on arrival, and at the end
//! of a round pools all samples, shuffles them canonically and takes one
//! LoRA step per pooled mini-batch. The pool is sorted by sample id before
//! the seeded shuffle, so the trajectory is independent of partition and
//! arrival order.

mod transport;
mod wire;

use std::collections::{BTreeMap, BTreeSet};

pub use transport::{read_log, Direction, Loopback, Recorder, StreamTransport, Transport};
pub use wire::{
    decode, decode_body, decode_header, encode, read_frame, ActivationBatch, BatchHeader, ElemType, Message,
    RoundSummary, HEADER_LEN, MAX_BODY_LEN, WIRE_MAGIC, WIRE_VERSION,
};

use crate::datapart::{self, Keyed};
use crate::error::{Error, Result};
use crate::lora::{Optimizer, TrainConfig};
use crate::numerics::{self, FrozenPrefix, ParamId, Tensor2D, ToyModel};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    Forwarding,
    Transmitting,
    Done,
}

/// Device side: a frozen prefix and nothing trainable.
#[derive(Debug, Clone)]
pub struct DeviceSession {
    device_id: u32,
    prefix: FrozenPrefix,
    elem: ElemType,
    state: SessionState,
    registered: bool,
    next_batch_id: u32,
}

impl DeviceSession {
    pub fn new(device_id: u32, prefix: FrozenPrefix, elem: ElemType) -> Self {
        Self {
            device_id,
            prefix,
            elem,
            state: SessionState::Idle,
            registered: false,
            next_batch_id: 0,
        }
    }

    pub fn device_id(&self) -> u32 {
        self.device_id
    }

    pub fn assigned_layers(&self) -> usize {
        self.prefix.layers()
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn is_registered(&self) -> bool {
        self.registered
    }

    pub fn prefix(&self) -> &FrozenPrefix {
        &self.prefix
    }

    fn transition(&mut self, to: SessionState) -> Result<()> {
        use SessionState::*;
        let ok = matches!(
            (self.state, to),
            (Idle, Forwarding) | (Forwarding, Transmitting) | (Transmitting, Idle) | (Forwarding, Idle) | (Idle, Done)
        );
        if !ok {
            return Err(Error::Protocol(format!(
                "device {}: illegal transition {:?} -> {to:?}",
                self.device_id, self.state
            )));
        }
        self.state = to;
        Ok(())
    }

    /// The one-time layer-count metadata message.
    pub fn register(&mut self) -> Result<Message> {
        if self.registered {
            return Err(Error::Protocol(format!("device {} already registered", self.device_id)));
        }
        if self.state == SessionState::Done {
            return Err(Error::Protocol(format!("device {} is done", self.device_id)));
        }
        self.registered = true;
        Ok(Message::Register {
            device_id: self.device_id,
            assigned_layers: self.prefix.layers() as u32,
        })
    }

    /// Frozen forward of one local mini-batch. `input` holds `seq_len` rows per sample.
    pub fn forward_and_send(
        &mut self,
        round: u32,
        input: &Tensor2D,
        sample_ids: &[u64],
        labels: &[u32],
    ) -> Result<ActivationBatch> {
        if !self.registered {
            return Err(Error::Protocol(format!(
                "device {} sent data before registering",
                self.device_id
            )));
        }
        let seq = self.prefix.seq_len();
        if input.rows() != sample_ids.len() * seq || labels.len() != sample_ids.len() {
            return Err(Error::ShapeMismatch {
                op: "device batch",
                lhs: input.shape(),
                rhs: (sample_ids.len() * seq, labels.len()),
            });
        }
        self.transition(SessionState::Forwarding)?;
        let acts = match self.prefix.forward(input) {
            Ok(a) => a,
            Err(e) => {
                self.transition(SessionState::Idle)?;
                return Err(e);
            }
        };
        self.transition(SessionState::Transmitting)?;
        let header = BatchHeader {
            device_id: self.device_id,
            round,
            batch_id: self.next_batch_id,
            produced_at_layer: self.prefix.layers() as u32,
        };
        let batch = ActivationBatch::from_tensor(header, seq, &acts, sample_ids.to_vec(), labels.to_vec(), self.elem);
        self.transition(SessionState::Idle)?;
        self.next_batch_id += 1;
        batch
    }

    pub fn finish(&mut self) -> Result<()> {
        self.transition(SessionState::Done)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Samples per optimizer step.
    pub pooled_batch_size: usize,
    /// Base seed; round `r` shuffles with `rng::derive(shuffle_seed, r)`.
    pub shuffle_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            pooled_batch_size: 72,
            shuffle_seed: 0,
        }
    }
}

/// One sample's activations at the shared depth.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSample {
    pub sample_id: u64,
    pub label: u32,
    pub acts: Tensor2D,
}

impl Keyed for PooledSample {
    fn key(&self) -> u64 {
        self.sample_id
    }
}

/// What one round of server training did.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    /// Loss of every pooled mini-batch, in update order.
    pub losses: Vec<f64>,
    /// Sample ids in the order they were trained on.
    pub order: Vec<u64>,
    /// Sample-weighted mean of `losses`.
    pub mean_loss: f64,
}

impl RoundReport {
    pub fn summary(&self) -> RoundSummary {
        RoundSummary {
            round: self.round,
            steps: self.losses.len() as u32,
            samples: self.order.len() as u32,
            mean_loss: self.mean_loss,
        }
    }
}

/// Shuffle seed used for `round` under base seed `base`.
pub fn round_seed(base: u64, round: u32) -> u64 {
    rng::derive(base, round as u64)
}

/// Server side: the full model, the device registry and the trainer.
pub struct ServerEngine {
    model: ToyModel,
    optimizer: Optimizer<ParamId>,
    cfg: EngineConfig,
    registry: BTreeMap<u32, usize>,
    shared_layer_start: usize,
    training_started: bool,
    round: u32,
    buffer: Vec<PooledSample>,
    ended: BTreeSet<u32>,
    additional_forward_layers: u64,
    shutdown: bool,
}

impl ServerEngine {
    /// `model` must carry no adapters yet; they are attached on the shared
    /// layers once the first batch arrives and registration closes.
    pub fn new(model: ToyModel, train: TrainConfig, cfg: EngineConfig) -> Result<Self> {
        train.validate()?;
        if model.adapters().next().is_some() {
            return Err(Error::Config("server model must start without adapters".into()));
        }
        if cfg.pooled_batch_size == 0 {
            return Err(Error::Config("pooled_batch_size must be >= 1".into()));
        }
        Ok(Self {
            model,
            optimizer: Optimizer::new(train),
            cfg,
            registry: BTreeMap::new(),
            shared_layer_start: 0,
            training_started: false,
            round: 0,
            buffer: Vec::new(),
            ended: BTreeSet::new(),
            additional_forward_layers: 0,
            shutdown: false,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn into_model(self) -> ToyModel {
        self.model
    }

    pub fn shared_layer_start(&self) -> usize {
        self.shared_layer_start
    }

    pub fn registry(&self) -> &BTreeMap<u32, usize> {
        &self.registry
    }

    pub fn current_round(&self) -> u32 {
        self.round
    }

    pub fn buffered(&self) -> &[PooledSample] {
        &self.buffer
    }

    pub fn is_shutdown(&self) -> bool {
        self.shutdown
    }

    /// Layers the server runs on behalf of `device_id` before the shared part.
    pub fn additional_forward_layers(&self, device_id: u32) -> Option<usize> {
        self.registry.get(&device_id).map(|&l| self.shared_layer_start - l)
    }

    /// Sum over ingested samples of additional-forward layers executed.
    pub fn additional_forward_sample_layers(&self) -> u64 {
        self.additional_forward_layers
    }

    pub fn accept_registration(&mut self, device_id: u32, assigned_layers: usize) -> Result<()> {
        if self.training_started {
            return Err(Error::Protocol(format!(
                "device {device_id} registered after training started"
            )));
        }
        if self.registry.contains_key(&device_id) {
            return Err(Error::Protocol(format!(
                "duplicate registration for device {device_id}"
            )));
        }
        if assigned_layers > self.model.depth() {
            return Err(Error::Protocol(format!(
                "device {device_id} claims {assigned_layers} layers, model has {}",
                self.model.depth()
            )));
        }
        self.registry.insert(device_id, assigned_layers);
        self.shared_layer_start = self.registry.values().copied().max().unwrap_or(0);
        Ok(())
    }

    fn start_training(&mut self) -> Result<()> {
        if !self.training_started {
            if self.registry.is_empty() {
                return Err(Error::Protocol("no registered devices".into()));
            }
            self.model.attach_shared_adapters(self.shared_layer_start)?;
            self.training_started = true;
        }
        Ok(())
    }

    /// Decodes a batch and runs the additional forward up to the shared depth.
    pub fn ingest(&mut self, batch: &ActivationBatch) -> Result<()> {
        let depth = *self
            .registry
            .get(&batch.device_id)
            .ok_or_else(|| Error::Protocol(format!("batch from unregistered device {}", batch.device_id)))?;
        let produced = batch.produced_at_layer as usize;
        if produced > self.shared_layer_start {
            return Err(Error::Protocol(format!(
                "batch produced at layer {produced}, shared layers start at {}",
                self.shared_layer_start
            )));
        }
        if produced != depth {
            return Err(Error::Protocol(format!(
                "device {} registered {depth} layers but sent layer-{produced} activations",
                batch.device_id
            )));
        }
        if batch.round != self.round {
            return Err(Error::Protocol(format!(
                "batch for round {} while server is in round {}",
                batch.round, self.round
            )));
        }
        if batch.seq as usize != self.model.config().seq_len {
            return Err(Error::Protocol(format!("batch seq {} does not match model", batch.seq)));
        }
        self.start_training()?;
        let acts = batch.to_tensor()?;
        let acts = self.model.forward(&acts, produced, self.shared_layer_start)?;
        let seq = batch.seq as usize;
        for (i, (&sample_id, &label)) in batch.sample_ids.iter().zip(&batch.labels).enumerate() {
            self.buffer.push(PooledSample {
                sample_id,
                label,
                acts: acts.slice_rows(i * seq, (i + 1) * seq),
            });
        }
        self.additional_forward_layers += ((self.shared_layer_start - produced) * batch.sample_ids.len()) as u64;
        Ok(())
    }

    /// Pools the round buffer, shuffles it and takes one step per pooled mini-batch.
    pub fn round_step(&mut self, shuffle_seed: u64) -> Result<RoundReport> {
        if self.buffer.is_empty() {
            return Err(Error::Protocol(format!("round {} has no buffered samples", self.round)));
        }
        let pool = datapart::pooled_shuffle(vec![std::mem::take(&mut self.buffer)], shuffle_seed)?;
        let from = self.shared_layer_start;
        let mut losses = Vec::new();
        let mut weighted = 0.0;
        for chunk in pool.chunks(self.cfg.pooled_batch_size) {
            let parts: Vec<Tensor2D> = chunk.iter().map(|s| s.acts.clone()).collect();
            let x = Tensor2D::concat_rows(&parts)?;
            let labels: Vec<u32> = chunk.iter().map(|s| s.label).collect();
            let loss = numerics::train_step(&mut self.model, &x, &labels, from, &mut self.optimizer)?;
            weighted += loss * chunk.len() as f64;
            losses.push(loss);
        }
        let report = RoundReport {
            round: self.round,
            losses,
            order: pool.iter().map(|s| s.sample_id).collect(),
            mean_loss: weighted / pool.len() as f64,
        };
        self.round += 1;
        self.ended.clear();
        Ok(report)
    }

    /// Handles one uplink message. Returns a report when it completes a round.
    pub fn handle(&mut self, msg: Message) -> Result<Option<RoundReport>> {
        if self.shutdown {
            return Err(Error::Protocol("message after shutdown".into()));
        }
        match msg {
            Message::Register {
                device_id,
                assigned_layers,
            } => self
                .accept_registration(device_id, assigned_layers as usize)
                .map(|_| None),
            Message::Activations(b) => self.ingest(&b).map(|_| None),
            Message::RoundEnd { device_id, round } => {
                if !self.registry.contains_key(&device_id) {
                    return Err(Error::Protocol(format!(
                        "round end from unregistered device {device_id}"
                    )));
                }
                if round != self.round {
                    return Err(Error::Protocol(format!(
                        "device {device_id} ended round {round}, server is in round {}",
                        self.round
                    )));
                }
                self.ended.insert(device_id);
                if self.ended.len() == self.registry.len() {
                    let seed = round_seed(self.cfg.shuffle_seed, round);
                    return self.round_step(seed).map(Some);
                }
                Ok(None)
            }
            Message::RoundSummary(_) => Err(Error::Protocol("server received a round summary".into())),
            Message::Shutdown => {
                self.shutdown = true;
                Ok(None)
            }
        }
    }
}

/// A device session with its local shard.
#[derive(Debug, Clone)]
pub struct DeviceWorker {
    pub session: DeviceSession,
    /// `seq_len` rows per sample, in `sample_ids` order.
    pub inputs: Tensor2D,
    pub labels: Vec<u32>,
    pub sample_ids: Vec<u64>,
    pub local_batch_size: usize,
}

impl DeviceWorker {
    /// Every uplink message of one round: activation batches, then the round end.
    pub fn round_messages(&mut self, round: u32) -> Result<Vec<Message>> {
        let seq = self.session.prefix().seq_len();
        let n = self.sample_ids.len();
        let step = self.local_batch_size.max(1);
        let mut out = Vec::new();
        for start in (0..n).step_by(step) {
            let end = (start + step).min(n);
            let x = self.inputs.slice_rows(start * seq, end * seq);
            let b = self
                .session
                .forward_and_send(round, &x, &self.sample_ids[start..end], &self.labels[start..end])?;
            out.push(Message::Activations(b));
        }
        out.push(Message::RoundEnd {
            device_id: self.session.device_id(),
            round,
        });
        Ok(out)
    }
}

/// Runs registration plus `rounds` rounds over a non-blocking transport
/// (e.g. [`Loopback`] or a [`Recorder`] around it), draining it after every round.
pub fn run_rounds(
    engine: &mut ServerEngine,
    workers: &mut [DeviceWorker],
    rounds: u32,
    transport: &mut dyn Transport,
) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::new();
    for w in workers.iter_mut() {
        transport.send(&w.session.register()?)?;
    }
    for round in 0..rounds {
        for w in workers.iter_mut() {
            for m in w.round_messages(round)? {
                transport.send(&m)?;
            }
        }
        while let Some(m) = transport.recv()? {
            reports.extend(engine.handle(m)?);
        }
    }
    for w in workers.iter_mut() {
        w.session.finish()?;
    }
    transport.send(&Message::Shutdown)?;
    while let Some(m) = transport.recv()? {
        reports.extend(engine.handle(m)?);
    }
    Ok(reports)
}

/// Server loop for a blocking transport: handles messages until shutdown or end of stream.
pub fn serve(engine: &mut ServerEngine, transport: &mut dyn Transport) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::new();
    while !engine.is_shutdown() {
        match transport.recv()? {
            Some(m) => reports.extend(engine.handle(m)?),
            None => break,
        }
    }
    Ok(reports)
}

/// Feeds the uplink messages of a recorded log into `engine`.
pub fn replay(engine: &mut ServerEngine, log: &[(Direction, Message)], dir: Direction) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::new();
    for (d, m) in log {
        if *d == dir {
            reports.extend(engine.handle(m.clone())?);
        }
    }
    Ok(reports)
}
