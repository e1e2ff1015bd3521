use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use crate::error::{Error, Result};
use crate::lora::{self, LoRAAdapter, Optimizer, Projection};
use crate::rng;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn default_seq_len() -> usize {
    1
}
fn default_rank() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub depth: usize,
    pub width: usize,
    /// Inner width of the MLP. Defaults to `2 * width`.
    #[serde(default)]
    pub hidden: Option<usize>,
    pub classes: usize,
    /// Rows per sample. Attention mixes rows of one sample only.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub attention: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    /// Defaults to `lora_rank` (scale 1).
    #[serde(default)]
    pub lora_alpha: Option<f64>,
}

impl ToyConfig {
    pub fn new(depth: usize, width: usize, classes: usize, seed: u64) -> Self {
        Self {
            depth,
            width,
            hidden: None,
            classes,
            seq_len: 1,
            attention: false,
            seed,
            lora_rank: 4,
            lora_alpha: None,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(2 * self.width)
    }

    pub fn alpha(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64)
    }

    /// Projections that receive adapters: Q/K/V/O with attention, the two MLP projections otherwise.
    pub fn adapter_targets(&self) -> &'static [Projection] {
        if self.attention {
            &[
                Projection::Query,
                Projection::Key,
                Projection::Value,
                Projection::Output,
            ]
        } else {
            &[Projection::Up, Projection::Down]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.classes == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "toy.depth, width, classes and seq_len must be > 0".into(),
            ));
        }
        if self.hidden_width() == 0 || self.lora_rank == 0 {
            return Err(Error::Config("toy.hidden and lora_rank must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
}

/// Frozen weights of one block. Linear maps use the `y = x W^T + b` convention.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn: Option<AttnWeights>,
    pub fc1: Tensor2D,
    pub b1: Tensor2D,
    pub fc2: Tensor2D,
    pub b2: Tensor2D,
}

impl BlockWeights {
    fn init(cfg: &ToyConfig, rng: &mut rng::Rng) -> Self {
        let d = cfg.width;
        let h = cfg.hidden_width();
        let sd = (1.0 / d as f64).sqrt();
        // Residual-branch outputs are scaled down so activations stay O(1) with depth.
        let res = (1.0 / (2.0 * cfg.depth as f64)).sqrt();
        let attn = cfg.attention.then(|| AttnWeights {
            wq: Tensor2D::randn(d, d, sd, rng),
            wk: Tensor2D::randn(d, d, sd, rng),
            wv: Tensor2D::randn(d, d, sd, rng),
            wo: Tensor2D::randn(d, d, sd * res, rng),
        });
        let fc1 = Tensor2D::randn(h, d, sd, rng);
        let b1 = Tensor2D::randn(1, h, 0.02, rng);
        let fc2 = Tensor2D::randn(d, h, (1.0 / h as f64).sqrt() * res, rng);
        let b2 = Tensor2D::randn(1, d, 0.02, rng);
        Self { attn, fc1, b1, fc2, b2 }
    }

    /// Tensors in canonical order (attention q, k, v, o first when present).
    pub fn tensors(&self) -> Vec<&Tensor2D> {
        let mut out = Vec::new();
        if let Some(a) = &self.attn {
            out.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
        }
        out.extend([&self.fc1, &self.b1, &self.fc2, &self.b2]);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.attn {
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
        }
        out.extend([&mut self.fc1, &mut self.b1, &mut self.fc2, &mut self.b2]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub(crate) fn zeros_like(cfg: &ToyConfig) -> Self {
        let d = cfg.width;
        let h = cfg.hidden_width();
        Self {
            attn: cfg.attention.then(|| AttnWeights {
                wq: Tensor2D::zeros(d, d),
                wk: Tensor2D::zeros(d, d),
                wv: Tensor2D::zeros(d, d),
                wo: Tensor2D::zeros(d, d),
            }),
            fc1: Tensor2D::zeros(h, d),
            b1: Tensor2D::zeros(1, h),
            fc2: Tensor2D::zeros(d, h),
            b2: Tensor2D::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `classes x width`.
    pub weight: Tensor2D,
    /// `1 x classes`.
    pub bias: Tensor2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    HeadWeight,
    HeadBias,
    AdapterDown { layer: usize, proj: Projection },
    AdapterUp { layer: usize, proj: Projection },
}

#[derive(Debug, Clone)]
struct AttnCache {
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    probs: Vec<Tensor2D>,
    ctx: Tensor2D,
}

/// Everything the input-gradient phase needs from the forward pass of one block.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Tensor2D,
    attn: Option<AttnCache>,
    mid: Tensor2D,
    pre: Tensor2D,
    act: Tensor2D,
}

/// Input and upstream gradient of one adapted projection, recorded during B.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterContext {
    pub layer: usize,
    pub proj: Projection,
    pub input: Tensor2D,
    pub upstream: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadContext {
    pub pooled: Tensor2D,
    pub dlogits: Tensor2D,
}

/// Output of the input-gradient phase: what the weight-update phase consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardContexts {
    step: u64,
    pub adapters: Vec<AdapterContext>,
    pub head: Option<HeadContext>,
}

impl BackwardContexts {
    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub loss: f64,
    /// Gradient of the loss w.r.t. the activations fed to the head.
    pub grad: Tensor2D,
    pub ctx: HeadContext,
}

fn project(x: &Tensor2D, w: &Tensor2D, bias: Option<&Tensor2D>, adapter: Option<&LoRAAdapter>) -> Result<Tensor2D> {
    let mut y = x.matmul_t(w)?;
    if let Some(b) = bias {
        y = y.add_row(b)?;
    }
    if let Some(a) = adapter {
        y.add_assign(&lora::adapter_forward(a, x)?)?;
    }
    Ok(y)
}

/// `upstream * W` plus the adapter's input-gradient term.
fn project_back(w: &Tensor2D, adapter: Option<&LoRAAdapter>, upstream: &Tensor2D) -> Result<Tensor2D> {
    let mut g = upstream.matmul(w)?;
    if let Some(a) = adapter {
        g.add_assign(&lora::adapter_input_grad(a, upstream)?)?;
    }
    Ok(g)
}

fn softmax_rows(s: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let row = s.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.set(r, c, e);
            total += e;
        }
        for c in 0..s.cols() {
            out.set(r, c, out.get(r, c) / total);
        }
    }
    out
}

type Adapters = BTreeMap<Projection, LoRAAdapter>;

fn block_forward(
    block: &BlockWeights,
    adapters: Option<&Adapters>,
    x: &Tensor2D,
    seq_len: usize,
    keep: bool,
) -> Result<(Tensor2D, Option<LayerCache>)> {
    let ad = |p: Projection| adapters.and_then(|m| m.get(&p));
    let (mid, attn_cache) = match &block.attn {
        Some(w) => {
            let q = project(x, &w.wq, None, ad(Projection::Query))?;
            let k = project(x, &w.wk, None, ad(Projection::Key))?;
            let v = project(x, &w.wv, None, ad(Projection::Value))?;
            let inv = 1.0 / (x.cols() as f64).sqrt();
            let samples = x.rows() / seq_len;
            let mut probs = Vec::with_capacity(samples);
            let mut ctx = Tensor2D::zeros(x.rows(), x.cols());
            for s in 0..samples {
                let (lo, hi) = (s * seq_len, (s + 1) * seq_len);
                let qs = q.slice_rows(lo, hi);
                let ks = k.slice_rows(lo, hi);
                let vs = v.slice_rows(lo, hi);
                let p = softmax_rows(&qs.matmul_t(&ks)?.scale(inv));
                ctx.write_rows(lo, &p.matmul(&vs)?);
                probs.push(p);
            }
            let o = project(&ctx, &w.wo, None, ad(Projection::Output))?;
            let mid = x.add(&o)?;
            let cache = keep.then_some(AttnCache { q, k, v, probs, ctx });
            (mid, cache)
        }
        None => (x.clone(), None),
    };
    let pre = project(&mid, &block.fc1, Some(&block.b1), ad(Projection::Up))?;
    let act = pre.map(gelu);
    let out = mid.add(&project(&act, &block.fc2, Some(&block.b2), ad(Projection::Down))?)?;
    let cache = keep.then(|| LayerCache {
        input: x.clone(),
        attn: attn_cache,
        mid,
        pre,
        act,
    });
    Ok((out, cache))
}

fn block_backward(
    layer: usize,
    block: &BlockWeights,
    adapters: Option<&Adapters>,
    cache: &LayerCache,
    dy: &Tensor2D,
    seq_len: usize,
    contexts: &mut Vec<AdapterContext>,
) -> Result<Tensor2D> {
    let ad = |p: Projection| adapters.and_then(|m| m.get(&p));
    let mut record = |proj: Projection, input: &Tensor2D, upstream: &Tensor2D| {
        if ad(proj).is_some() {
            contexts.push(AdapterContext {
                layer,
                proj,
                input: input.clone(),
                upstream: upstream.clone(),
            });
        }
    };

    // MLP: out = mid + fc2(gelu(fc1(mid)))
    record(Projection::Down, &cache.act, dy);
    let d_act = project_back(&block.fc2, ad(Projection::Down), dy)?;
    let d_pre = d_act.hadamard(&cache.pre.map(gelu_grad))?;
    record(Projection::Up, &cache.mid, &d_pre);
    let d_mid = dy.add(&project_back(&block.fc1, ad(Projection::Up), &d_pre)?)?;

    let (w, ac) = match (&block.attn, &cache.attn) {
        (Some(w), Some(ac)) => (w, ac),
        _ => return Ok(d_mid),
    };
    // Attention: mid = x + O(softmax(q k^T / sqrt(d)) v)
    record(Projection::Output, &ac.ctx, &d_mid);
    let d_ctx = project_back(&w.wo, ad(Projection::Output), &d_mid)?;
    let inv = 1.0 / (cache.input.cols() as f64).sqrt();
    let rows = cache.input.rows();
    let cols = cache.input.cols();
    let mut dq = Tensor2D::zeros(rows, cols);
    let mut dk = Tensor2D::zeros(rows, cols);
    let mut dv = Tensor2D::zeros(rows, cols);
    for (s, p) in ac.probs.iter().enumerate() {
        let (lo, hi) = (s * seq_len, (s + 1) * seq_len);
        let dcs = d_ctx.slice_rows(lo, hi);
        let qs = ac.q.slice_rows(lo, hi);
        let ks = ac.k.slice_rows(lo, hi);
        let vs = ac.v.slice_rows(lo, hi);
        dv.write_rows(lo, &p.t_matmul(&dcs)?);
        let dp = dcs.matmul_t(&vs)?;
        let mut ds = Tensor2D::zeros(seq_len, seq_len);
        for i in 0..seq_len {
            let mut dot = 0.0;
            for j in 0..seq_len {
                dot += dp.get(i, j) * p.get(i, j);
            }
            for j in 0..seq_len {
                ds.set(i, j, p.get(i, j) * (dp.get(i, j) - dot) * inv);
            }
        }
        dq.write_rows(lo, &ds.matmul(&ks)?);
        dk.write_rows(lo, &ds.t_matmul(&qs)?);
    }
    record(Projection::Query, &cache.input, &dq);
    record(Projection::Key, &cache.input, &dk);
    record(Projection::Value, &cache.input, &dv);
    let mut dx = d_mid;
    dx.add_assign(&project_back(&w.wq, ad(Projection::Query), &dq)?)?;
    dx.add_assign(&project_back(&w.wk, ad(Projection::Key), &dk)?)?;
    dx.add_assign(&project_back(&w.wv, ad(Projection::Value), &dv)?)?;
    Ok(dx)
}

/// Read-only view of the first `layers` frozen blocks, as deployed on a device.
#[derive(Debug, Clone)]
pub struct FrozenPrefix {
    blocks: Arc<Vec<BlockWeights>>,
    layers: usize,
    width: usize,
    seq_len: usize,
}

impl FrozenPrefix {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks[..self.layers]
    }

    /// Forward through all prefix layers. Nothing is retained.
    pub fn forward(&self, input: &Tensor2D) -> Result<Tensor2D> {
        check_input(input, 0, self.width, self.seq_len)?;
        let mut x = input.clone();
        for block in self.blocks() {
            x = block_forward(block, None, &x, self.seq_len, false)?.0;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("device forward"));
        }
        Ok(x)
    }
}

fn check_input(input: &Tensor2D, layer: usize, width: usize, seq_len: usize) -> Result<()> {
    if input.cols() != width {
        return Err(Error::DimensionMismatch {
            layer,
            expected: width,
            actual: input.cols(),
        });
    }
    if !input.rows().is_multiple_of(seq_len) {
        return Err(Error::ShapeMismatch {
            op: "rows must be a multiple of seq_len",
            lhs: input.shape(),
            rhs: (seq_len, width),
        });
    }
    Ok(())
}

/// Toy layered model: frozen residual blocks, optional LoRA adapters and a
/// trainable classifier head on mean-pooled rows.
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyConfig,
    blocks: Arc<Vec<BlockWeights>>,
    adapters: Vec<Adapters>,
    head: Head,
    caches: Vec<Option<LayerCache>>,
    next_step: u64,
    pending: BTreeSet<u64>,
}

impl ToyModel {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(cfg.seed);
        let blocks = (0..cfg.depth).map(|_| BlockWeights::init(&cfg, &mut rng)).collect();
        Ok(Self::from_parts(cfg, blocks))
    }

    pub(crate) fn from_parts(cfg: ToyConfig, blocks: Vec<BlockWeights>) -> Self {
        let head = Head {
            weight: Tensor2D::zeros(cfg.classes, cfg.width),
            bias: Tensor2D::zeros(1, cfg.classes),
        };
        Self {
            adapters: vec![BTreeMap::new(); cfg.depth],
            caches: vec![None; cfg.depth],
            blocks: Arc::new(blocks),
            head,
            cfg,
            next_step: 0,
            pending: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn set_head(&mut self, head: Head) -> Result<()> {
        if head.weight.shape() != self.head.weight.shape() || head.bias.shape() != self.head.bias.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_head",
                lhs: self.head.weight.shape(),
                rhs: head.weight.shape(),
            });
        }
        self.head = head;
        Ok(())
    }

    pub fn adapter(&self, layer: usize, proj: Projection) -> Option<&LoRAAdapter> {
        self.adapters.get(layer).and_then(|m| m.get(&proj))
    }

    pub fn adapters(&self) -> impl Iterator<Item = (usize, &LoRAAdapter)> {
        self.adapters
            .iter()
            .enumerate()
            .flat_map(|(l, m)| m.values().map(move |a| (l, a)))
    }

    /// Layers carrying at least one adapter.
    pub fn adapted_layers(&self) -> Vec<usize> {
        (0..self.depth()).filter(|&l| !self.adapters[l].is_empty()).collect()
    }

    pub fn set_adapter(&mut self, layer: usize, adapter: LoRAAdapter) -> Result<()> {
        if layer >= self.depth() {
            return Err(Error::LayerRange {
                from: layer,
                to: layer + 1,
                depth: self.depth(),
            });
        }
        let (d_in, d_out) = self.projection_dims(adapter.target);
        if adapter.d_in() != d_in || adapter.d_out() != d_out {
            return Err(Error::ShapeMismatch {
                op: "set_adapter",
                lhs: (d_out, d_in),
                rhs: (adapter.d_out(), adapter.d_in()),
            });
        }
        if !self.cfg.attention && !matches!(adapter.target, Projection::Up | Projection::Down) {
            return Err(Error::Config(format!(
                "projection {} does not exist in this block type",
                adapter.target
            )));
        }
        self.adapters[layer].insert(adapter.target, adapter);
        Ok(())
    }

    pub fn projection_dims(&self, proj: Projection) -> (usize, usize) {
        let d = self.cfg.width;
        let h = self.cfg.hidden_width();
        match proj {
            Projection::Up => (d, h),
            Projection::Down => (h, d),
            _ => (d, d),
        }
    }

    /// Attaches fresh adapters on the config's target projections of `layers`.
    pub fn attach_adapters(&mut self, layers: impl IntoIterator<Item = usize>) -> Result<()> {
        let rank = self.cfg.lora_rank;
        let alpha = self.cfg.alpha();
        for layer in layers {
            for &proj in self.cfg.adapter_targets() {
                let (d_in, d_out) = self.projection_dims(proj);
                let seed = rng::derive(self.cfg.seed, 0x1000 + (layer as u64) * 16 + proj.code() as u64);
                let a = lora::adapter_init_scaled(rank, d_in, d_out, alpha, proj, seed)?;
                self.set_adapter(layer, a)?;
            }
        }
        Ok(())
    }

    /// Adapters on every layer from `from_layer` up (the shared layers).
    pub fn attach_shared_adapters(&mut self, from_layer: usize) -> Result<()> {
        self.attach_adapters(from_layer..self.depth())
    }

    pub fn frozen_prefix(&self, layers: usize) -> Result<FrozenPrefix> {
        if layers > self.depth() {
            return Err(Error::LayerRange {
                from: 0,
                to: layers,
                depth: self.depth(),
            });
        }
        if let Some(l) = (0..layers).find(|&l| !self.adapters[l].is_empty()) {
            return Err(Error::Config(format!(
                "layer {l} carries adapters and cannot be part of a frozen prefix"
            )));
        }
        Ok(FrozenPrefix {
            blocks: Arc::clone(&self.blocks),
            layers,
            width: self.cfg.width,
            seq_len: self.cfg.seq_len,
        })
    }

    fn check_range(&self, from: usize, to: usize) -> Result<()> {
        if from > to || to > self.depth() {
            return Err(Error::LayerRange {
                from,
                to,
                depth: self.depth(),
            });
        }
        Ok(())
    }

    /// Forward through layers `from..to` without retaining anything.
    pub fn forward(&self, input: &Tensor2D, from: usize, to: usize) -> Result<Tensor2D> {
        self.check_range(from, to)?;
        check_input(input, from, self.cfg.width, self.cfg.seq_len)?;
        let mut x = input.clone();
        for l in from..to {
            x = block_forward(&self.blocks[l], Some(&self.adapters[l]), &x, self.cfg.seq_len, false)?.0;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("forward"));
        }
        Ok(x)
    }

    /// Forward through layers `from..to`. With `cache` set, each layer keeps
    /// what its input-gradient pass needs until [`ToyModel::backward_b`] consumes it.
    pub fn forward_prefix(&mut self, input: &Tensor2D, from: usize, to: usize, cache: bool) -> Result<Tensor2D> {
        if !cache {
            return self.forward(input, from, to);
        }
        self.check_range(from, to)?;
        check_input(input, from, self.cfg.width, self.cfg.seq_len)?;
        let mut x = input.clone();
        for l in from..to {
            let (y, c) = block_forward(&self.blocks[l], Some(&self.adapters[l]), &x, self.cfg.seq_len, true)?;
            self.caches[l] = c;
            x = y;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("forward"));
        }
        Ok(x)
    }

    pub fn has_cache(&self, layer: usize) -> bool {
        self.caches.get(layer).is_some_and(Option::is_some)
    }

    pub fn clear_caches(&mut self) {
        self.caches.iter_mut().for_each(|c| *c = None);
    }

    fn pool(&self, acts: &Tensor2D) -> Result<Tensor2D> {
        check_input(acts, self.depth(), self.cfg.width, self.cfg.seq_len)?;
        let seq = self.cfg.seq_len;
        let samples = acts.rows() / seq;
        let mut pooled = Tensor2D::zeros(samples, acts.cols());
        for s in 0..samples {
            for c in 0..acts.cols() {
                let mut acc = 0.0;
                for r in s * seq..(s + 1) * seq {
                    acc += acts.get(r, c);
                }
                pooled.set(s, c, acc / seq as f64);
            }
        }
        Ok(pooled)
    }

    pub fn logits(&self, acts: &Tensor2D) -> Result<Tensor2D> {
        self.pool(acts)?.matmul_t(&self.head.weight)?.add_row(&self.head.bias)
    }

    /// Mean cross-entropy of the head on top-layer activations, with the
    /// gradient w.r.t. those activations (the head's input-gradient phase).
    pub fn loss_and_grad(&self, acts: &Tensor2D, labels: &[u32]) -> Result<HeadOutput> {
        let pooled = self.pool(acts)?;
        let n = pooled.rows();
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "labels",
                lhs: (n, 1),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= self.cfg.classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                self.cfg.classes
            )));
        }
        let logits = pooled.matmul_t(&self.head.weight)?.add_row(&self.head.bias)?;
        let probs = softmax_rows(&logits);
        let mut loss = 0.0;
        let mut dlogits = Tensor2D::zeros(n, self.cfg.classes);
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y as usize];
            for c in 0..self.cfg.classes {
                let target = if c == y as usize { 1.0 } else { 0.0 };
                dlogits.set(i, c, (probs.get(i, c) - target) / n as f64);
            }
        }
        loss /= n as f64;
        let d_pooled = dlogits.matmul(&self.head.weight)?;
        let seq = self.cfg.seq_len;
        let grad = Tensor2D::from_fn(acts.rows(), acts.cols(), |r, c| d_pooled.get(r / seq, c) / seq as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(HeadOutput {
            loss,
            grad,
            ctx: HeadContext { pooled, dlogits },
        })
    }

    pub fn eval_loss(&self, input: &Tensor2D, from: usize, labels: &[u32]) -> Result<f64> {
        let acts = self.forward(input, from, self.depth())?;
        Ok(self.loss_and_grad(&acts, labels)?.loss)
    }

    /// Input-gradient phase over layers `from..to`: propagates `loss_grad`
    /// (w.r.t. the output of layer `to - 1`) down to the input of layer
    /// `from` and records per-adapter contexts. No weight is touched.
    pub fn backward_b(&mut self, loss_grad: &Tensor2D, from: usize, to: usize) -> Result<(Tensor2D, BackwardContexts)> {
        self.check_range(from, to)?;
        if let Some(l) = (from..to).find(|&l| self.caches[l].is_none()) {
            return Err(Error::BackwardWithoutForward(l));
        }
        let mut contexts = Vec::new();
        let mut grad = loss_grad.clone();
        for l in (from..to).rev() {
            let cache = self.caches[l].take().expect("checked above");
            grad = block_backward(
                l,
                &self.blocks[l],
                Some(&self.adapters[l]),
                &cache,
                &grad,
                self.cfg.seq_len,
                &mut contexts,
            )?;
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("backward"));
        }
        let step = self.next_step;
        self.next_step += 1;
        self.pending.insert(step);
        Ok((
            grad,
            BackwardContexts {
                step,
                adapters: contexts,
                head: None,
            },
        ))
    }

    /// Weight gradients implied by a set of B-phase contexts, in parameter order.
    pub fn weight_gradients(&self, ctx: &BackwardContexts) -> Result<BTreeMap<ParamId, Tensor2D>> {
        let mut grads: BTreeMap<ParamId, Tensor2D> = BTreeMap::new();
        let mut accumulate = |id: ParamId, g: Tensor2D| -> Result<()> {
            match grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(id, g);
                    Ok(())
                }
            }
        };
        if let Some(h) = &ctx.head {
            accumulate(ParamId::HeadWeight, h.dlogits.t_matmul(&h.pooled)?)?;
            accumulate(ParamId::HeadBias, h.dlogits.sum_rows())?;
        }
        for c in &ctx.adapters {
            let a = self
                .adapter(c.layer, c.proj)
                .ok_or_else(|| Error::PhaseOrder(format!("no adapter at layer {} {}", c.layer, c.proj)))?;
            let g = lora::adapter_grads(a, &c.input, &c.upstream)?;
            accumulate(
                ParamId::AdapterDown {
                    layer: c.layer,
                    proj: c.proj,
                },
                g.grad_down,
            )?;
            accumulate(
                ParamId::AdapterUp {
                    layer: c.layer,
                    proj: c.proj,
                },
                g.grad_up,
            )?;
        }
        Ok(grads)
    }

    /// Weight-update phase: consumes the contexts of one completed B phase.
    pub fn backward_w(&mut self, ctx: &BackwardContexts, opt: &mut Optimizer<ParamId>) -> Result<()> {
        if !self.pending.contains(&ctx.step) {
            return Err(Error::PhaseOrder(format!(
                "step {} has no pending input-gradient phase (already applied or never run)",
                ctx.step
            )));
        }
        let grads = self.weight_gradients(ctx)?;
        opt.begin_step();
        for (id, g) in &grads {
            let p = self
                .param_mut(*id)
                .ok_or_else(|| Error::PhaseOrder(format!("unknown parameter {id:?}")))?;
            opt.apply(id, p, g)?;
        }
        self.pending.remove(&ctx.step);
        Ok(())
    }

    /// Combines the contexts of two B phases belonging to the same update
    /// (e.g. a server range and a device range of one split step).
    pub fn merge_contexts(&mut self, mut a: BackwardContexts, b: BackwardContexts) -> Result<BackwardContexts> {
        if !self.pending.remove(&b.step) || !self.pending.contains(&a.step) {
            return Err(Error::PhaseOrder("merging contexts that are not pending".into()));
        }
        a.adapters.extend(b.adapters);
        if b.head.is_some() {
            a.head = b.head;
        }
        Ok(a)
    }

    pub fn trainable_params(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::HeadWeight, ParamId::HeadBias];
        for (layer, m) in self.adapters.iter().enumerate() {
            for &proj in m.keys() {
                ids.push(ParamId::AdapterDown { layer, proj });
                ids.push(ParamId::AdapterUp { layer, proj });
            }
        }
        ids.sort();
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor2D> {
        match id {
            ParamId::HeadWeight => Some(&self.head.weight),
            ParamId::HeadBias => Some(&self.head.bias),
            ParamId::AdapterDown { layer, proj } => self.adapter(layer, proj).map(|a| &a.down),
            ParamId::AdapterUp { layer, proj } => self.adapter(layer, proj).map(|a| &a.up),
        }
    }

    /// Mutable access to trainable parameters only; frozen block weights are never exposed.
    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor2D> {
        match id {
            ParamId::HeadWeight => Some(&mut self.head.weight),
            ParamId::HeadBias => Some(&mut self.head.bias),
            ParamId::AdapterDown { layer, proj } => self.adapters.get_mut(layer)?.get_mut(&proj).map(|a| &mut a.down),
            ParamId::AdapterUp { layer, proj } => self.adapters.get_mut(layer)?.get_mut(&proj).map(|a| &mut a.up),
        }
    }

    pub fn num_base_params(&self) -> usize {
        self.blocks.iter().map(BlockWeights::num_params).sum()
    }

    pub fn num_adapter_params(&self) -> usize {
        self.adapters().map(|(_, a)| a.num_params()).sum()
    }
}

/// Forward, head loss, input-gradient phase and weight-update phase on one
/// batch that enters the model at layer `from`. Returns the batch loss.
pub fn train_step(
    model: &mut ToyModel,
    batch: &Tensor2D,
    labels: &[u32],
    from: usize,
    opt: &mut Optimizer<ParamId>,
) -> Result<f64> {
    let depth = model.depth();
    let acts = model.forward_prefix(batch, from, depth, true)?;
    let head = model.loss_and_grad(&acts, labels)?;
    let (_, mut ctx) = model.backward_b(&head.grad, from, depth)?;
    ctx.head = Some(head.ctx);
    model.backward_w(&ctx, opt)?;
    Ok(head.loss)
}
