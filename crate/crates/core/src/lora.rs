//! Low-rank adapters and the optimizers that train them.
//!
//! An adapter on a projection `y = x W^T` contributes `(alpha / R) * (x A^T) B^T`,
//! where `A` ("down", `R x d_in`) starts Gaussian and `B` ("up", `d_out x R`)
//! starts at zero, so a fresh adapter leaves the model output unchanged.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::rng;

/// Which projection of a block an adapter is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::Up,
        Projection::Down,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
            Projection::Up => "fc1",
            Projection::Down => "fc2",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAAdapter {
    /// `R x d_in`.
    pub down: Tensor2D,
    /// `d_out x R`.
    pub up: Tensor2D,
    pub rank: usize,
    pub scale_alpha: f64,
    pub target: Projection,
}

impl LoRAAdapter {
    pub fn scale(&self) -> f64 {
        self.scale_alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.down.cols()
    }

    pub fn d_out(&self) -> usize {
        self.up.rows()
    }

    pub fn num_params(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.cols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "adapter input",
                lhs: x.shape(),
                rhs: self.down.shape(),
            });
        }
        Ok(())
    }
}

/// Fresh adapter with `alpha = rank` (scale 1). `down ~ N(0, 1/rank)` (variance), `up = 0`.
pub fn adapter_init(rank: usize, d_in: usize, d_out: usize, target: Projection, seed: u64) -> Result<LoRAAdapter> {
    adapter_init_scaled(rank, d_in, d_out, rank as f64, target, seed)
}

pub fn adapter_init_scaled(
    rank: usize,
    d_in: usize,
    d_out: usize,
    scale_alpha: f64,
    target: Projection,
    seed: u64,
) -> Result<LoRAAdapter> {
    if rank == 0 {
        return Err(Error::InvalidProfile("adapter rank must be >= 1".into()));
    }
    let mut rng = rng::seeded(seed);
    let std = (1.0 / rank as f64).sqrt();
    Ok(LoRAAdapter {
        down: Tensor2D::randn(rank, d_in, std, &mut rng),
        up: Tensor2D::zeros(d_out, rank),
        rank,
        scale_alpha,
        target,
    })
}

/// `(alpha/R) * (x A^T) B^T`.
pub fn adapter_forward(a: &LoRAAdapter, x: &Tensor2D) -> Result<Tensor2D> {
    a.check_input(x)?;
    let mid = x.matmul_t(&a.down)?;
    Ok(mid.matmul_t(&a.up)?.scale(a.scale()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub grad_down: Tensor2D,
    pub grad_up: Tensor2D,
}

/// Gradients of `sum(upstream * adapter_forward(a, x))` w.r.t. both factors.
pub fn adapter_grads(a: &LoRAAdapter, x: &Tensor2D, upstream: &Tensor2D) -> Result<AdapterGrads> {
    a.check_input(x)?;
    let s = a.scale();
    let mid = x.matmul_t(&a.down)?;
    let grad_up = upstream.t_matmul(&mid)?.scale(s);
    let back = upstream.matmul(&a.up)?;
    let grad_down = back.t_matmul(x)?.scale(s);
    Ok(AdapterGrads { grad_down, grad_up })
}

/// Contribution of the adapter to the input gradient: `(alpha/R) * (upstream B) A`.
pub fn adapter_input_grad(a: &LoRAAdapter, upstream: &Tensor2D) -> Result<Tensor2D> {
    Ok(upstream.matmul(&a.up)?.matmul(&a.down)?.scale(a.scale()))
}

/// `base + (alpha/R) * B A`. Applying it twice adds the delta twice.
pub fn merge(a: &LoRAAdapter, base: &Tensor2D) -> Result<Tensor2D> {
    if base.shape() != (a.d_out(), a.d_in()) {
        return Err(Error::ShapeMismatch {
            op: "merge",
            lhs: base.shape(),
            rhs: (a.d_out(), a.d_in()),
        });
    }
    base.add(&a.up.matmul(&a.down)?.scale(a.scale()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

fn default_lr() -> f64 {
    5e-5
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adamw
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            optimizer: default_optimizer(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            optimizer: OptimizerKind::Sgd,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1/beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter optimizer state, keyed by a caller-chosen ordered id.
#[derive(Debug, Clone)]
pub struct Optimizer<K: Ord + Clone> {
    cfg: TrainConfig,
    step: u64,
    moments: BTreeMap<K, Moments>,
}

impl<K: Ord + Clone> Optimizer<K> {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Marks the start of an update step (advances Adam's bias correction).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn apply(&mut self, key: &K, param: &mut Tensor2D, grad: &Tensor2D) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                lhs: param.shape(),
                rhs: grad.shape(),
            });
        }
        let lr = self.cfg.learning_rate;
        match self.cfg.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adamw => {
                let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let n = grad.data().len();
                let st = self.moments.entry(key.clone()).or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
                for i in 0..n {
                    let g = grad.data()[i];
                    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                    let m_hat = st.m[i] / c1;
                    let v_hat = st.v[i] / c2;
                    let p = &mut param.data_mut()[i];
                    *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                }
            }
        }
        if !param.is_finite() {
            return Err(Error::NonFinite("optimizer update"));
        }
        Ok(())
    }
}
