//! Split learning with device-side frozen layers.
//!
//! Devices run a frozen prefix of a layered model forward-only and ship the
//! activations to a server, which catches shallow devices up to a common
//! depth, pools and shuffles everything it received, and fine-tunes the
//! remaining layers with LoRA adapters.
//!
//! The crate contains:
//!
//! * [`costmodel`]: analytic FLOP / byte / time accounting for transformer layers.
//! * [`numerics`] and [`lora`]: a small f64 tensor core and toy transformer
//!   with a backward pass split into an input-gradient phase and a
//!   weight-update phase.
//! * [`datapart`]: IID and Dirichlet partitioning plus the canonical pooled shuffle.
//! * [`protocol`]: device / server state machines and the framed wire format.
//! * [`scheduler`]: layer allocation and the discrete-event pipeline simulator,
//!   including the CenLoRA / FedLoRA / SplitLoRA baselines.
//! * [`harness`]: config loading, experiment runs, CSV/JSON reports and SVG Gantt charts.

pub mod costmodel;
pub mod datapart;
pub mod error;
pub mod harness;
pub mod lora;
pub mod numerics;
pub mod protocol;
pub mod rng;
pub mod scheduler;

pub use error::{Error, Result};
