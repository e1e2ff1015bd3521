//! Layer allocation and discrete-event simulation of one training epoch.
//!
//! Resources are the devices, the uplink (one shared channel or one link per
//! device) and a single server lane. Every simulated phase is an event with a
//! start and a duration on one resource; derived quantities (makespan, idle
//! time) are always recomputed from the event list.

mod gantt;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use gantt::render_svg;
pub use sim::{simulate, simulate_baseline, simulate_splitfrozen, SchemeResult};

use crate::costmodel::{self, ChannelProfile, DeviceProfile, ModelProfile, ServerProfile, WorkloadSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelTopology {
    /// One link shared by every device, FIFO by readiness, ties by device id.
    #[default]
    Shared,
    /// Each device owns a link of the configured rate.
    PerDevice,
}

fn default_utilization() -> f64 {
    1.0
}

fn default_splitlora_cut() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub devices: Vec<DeviceProfile>,
    pub channel: ChannelProfile,
    #[serde(default)]
    pub topology: ChannelTopology,
    pub server: ServerProfile,
    pub model: ModelProfile,
    pub workload: WorkloadSpec,
    /// Fraction of peak FLOP/s actually achieved, applied to every processor.
    #[serde(default = "default_utilization")]
    pub utilization: f64,
    /// Inclusive allocation bounds. Defaults to `[1, num_layers / 4]`.
    #[serde(default)]
    pub layer_bounds: Option<(usize, usize)>,
    /// Device-side depth of the SplitLoRA baseline.
    #[serde(default = "default_splitlora_cut")]
    pub splitlora_cut: usize,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::InvalidProfile("cluster needs at least one device".into()));
        }
        if !(self.utilization > 0.0 && self.utilization <= 1.0) {
            return Err(Error::InvalidProfile(format!(
                "utilization must be in (0, 1], got {}",
                self.utilization
            )));
        }
        self.model.validate()?;
        self.channel.validate()?;
        self.server.validate()?;
        self.workload.validate()?;
        let mut ids: Vec<u32> = self.devices.iter().map(|d| d.device_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidProfile("duplicate device_id".into()));
        }
        for d in &self.devices {
            d.validate(&self.model)?;
        }
        if self.splitlora_cut > self.model.num_layers {
            return Err(Error::InvalidProfile("splitlora_cut exceeds num_layers".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> (usize, usize) {
        self.layer_bounds.unwrap_or((1, self.model.num_layers / 4))
    }

    pub fn device_capacity(&self, i: usize) -> f64 {
        self.devices[i].peak_flops * self.utilization
    }

    pub fn server_capacity(&self) -> f64 {
        self.server.peak_flops * self.utilization
    }

    /// Time for device `i` to run a `layers`-deep frozen prefix on one microbatch
    /// and ship the result.
    pub fn stage_time(&self, i: usize, layers: usize) -> f64 {
        let fwd = costmodel::forward_flops_per_layer(&self.model, &self.workload);
        costmodel::stage_time(layers as f64 * fwd, self.device_capacity(i))
            + costmodel::xmit_time(costmodel::activation_bytes(&self.model, &self.workload), &self.channel)
    }

    /// The depths currently recorded on the device profiles.
    pub fn assigned_depths(&self) -> Vec<usize> {
        self.devices.iter().map(|d| d.assigned_layers).collect()
    }
}

/// Upper bound on depth vectors examined by [`allocate_layers`].
pub const MAX_ALLOCATION_CANDIDATES: usize = 2_000_000;

/// Chooses a frozen-prefix depth per device.
///
/// Devices of equal capacity form a tier and get equal depths; deeper
/// prefixes go to faster tiers, and the fastest tier takes the upper bound.
/// Among those vectors the one with the smallest spread of per-device stage
/// time (prefix forward + activation transmission) wins. Spreads within
/// 1e-9 relative count as ties, broken toward smaller total depth, then
/// toward smaller depths on the slower tiers.
pub fn allocate_layers(cluster: &ClusterSpec) -> Result<Vec<usize>> {
    cluster.validate()?;
    let (lo, hi) = cluster.bounds();
    if lo > hi || hi > cluster.model.num_layers {
        return Err(Error::Allocation(format!(
            "infeasible layer bounds [{lo}, {hi}] for a {}-layer model",
            cluster.model.num_layers
        )));
    }
    if let Some(max) = (cluster.server.max_shared_layer_start > 0).then_some(cluster.server.max_shared_layer_start) {
        if hi > max {
            return Err(Error::Allocation(format!(
                "upper bound {hi} exceeds the server's max_shared_layer_start {max}"
            )));
        }
    }

    // Tiers by descending capacity; each keeps a representative device index.
    let mut tiers: Vec<(f64, usize)> = Vec::new();
    let mut order: Vec<usize> = (0..cluster.devices.len()).collect();
    order.sort_by(|&a, &b| cluster.devices[b].peak_flops.total_cmp(&cluster.devices[a].peak_flops));
    for i in order {
        let cap = cluster.devices[i].peak_flops;
        if tiers.last().is_none_or(|&(c, _)| c != cap) {
            tiers.push((cap, i));
        }
    }

    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    let mut examined = 0usize;
    let mut depths = vec![hi; tiers.len()];
    search(cluster, &tiers, 1, lo, &mut depths, &mut best, &mut examined)?;
    let (_, _, tier_depths) = best.expect("the all-max vector is always a candidate");
    Ok(cluster
        .devices
        .iter()
        .map(|d| {
            let t = tiers.iter().position(|&(c, _)| c == d.peak_flops).unwrap();
            tier_depths[t]
        })
        .collect())
}

fn search(
    cluster: &ClusterSpec,
    tiers: &[(f64, usize)],
    k: usize,
    lo: usize,
    depths: &mut Vec<usize>,
    best: &mut Option<(f64, usize, Vec<usize>)>,
    examined: &mut usize,
) -> Result<()> {
    if k == tiers.len() {
        *examined += 1;
        if *examined > MAX_ALLOCATION_CANDIDATES {
            return Err(Error::Allocation("allocation search space too large".into()));
        }
        let times: Vec<f64> = tiers
            .iter()
            .zip(depths.iter())
            .map(|(&(_, i), &l)| cluster.stage_time(i, l))
            .collect();
        let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = times.iter().copied().fold(f64::INFINITY, f64::min);
        let spread = max - min;
        let total: usize = depths.iter().sum();
        let better = match best {
            None => true,
            Some((s, t, d)) => {
                let tol = 1e-9 * s.abs().max(spread.abs()).max(f64::MIN_POSITIVE);
                if (spread - *s).abs() <= tol {
                    (total, depths.iter().rev().collect::<Vec<_>>()) < (*t, d.iter().rev().collect::<Vec<_>>())
                } else {
                    spread < *s
                }
            }
        };
        if better {
            *best = Some((spread, total, depths.clone()));
        }
        return Ok(());
    }
    for l in lo..=depths[k - 1] {
        depths[k] = l;
        search(cluster, tiers, k + 1, lo, depths, best, examined)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    /// Device-side forward.
    F,
    /// Transmission over a link.
    X,
    /// Server forward bridging a shallow device to the shared layers.
    AF,
    /// Server forward through the shared layers.
    SF,
    /// Input-gradient backward.
    B,
    /// Weight-gradient / update backward.
    W,
    /// Adapter parameter synchronisation.
    Sync,
}

impl EventKind {
    /// Position in the per-microbatch precedence chain.
    pub fn chain_rank(self) -> Option<u8> {
        match self {
            EventKind::F => Some(0),
            EventKind::X => Some(1),
            EventKind::AF => Some(2),
            EventKind::SF => Some(3),
            EventKind::B => Some(4),
            EventKind::W => Some(5),
            EventKind::Sync => None,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Resource {
    Server,
    Channel,
    Link(u32),
    Device(u32),
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Server => write!(f, "server"),
            Resource::Channel => write!(f, "channel"),
            Resource::Link(i) => write!(f, "link:{i}"),
            Resource::Device(i) => write!(f, "device:{i}"),
        }
    }
}

impl FromStr for Resource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown resource {s:?}"));
        match s {
            "server" => Ok(Resource::Server),
            "channel" => Ok(Resource::Channel),
            _ => {
                let (kind, id) = s.split_once(':').ok_or_else(bad)?;
                let id: u32 = id.parse().map_err(|_| bad())?;
                match kind {
                    "link" => Ok(Resource::Link(id)),
                    "device" => Ok(Resource::Device(id)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl From<Resource> for String {
    fn from(r: Resource) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Resource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub kind: EventKind,
    pub resource: Resource,
    /// Device whose microbatch this event belongs to.
    pub device: u32,
    /// Microbatch index within the device (round index for `Sync`).
    pub microbatch: u32,
    pub start: f64,
    pub duration: f64,
    /// Indices of events that must finish before this one starts.
    #[serde(default)]
    pub deps: Vec<usize>,
}

impl ScheduleEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    fn label(&self, idx: usize) -> String {
        format!(
            "#{idx} {}(device {}, mb {}) on {} [{:.6}, {:.6}]",
            self.kind,
            self.device,
            self.microbatch,
            self.resource,
            self.start,
            self.end()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// B and W are separate events; W fills otherwise idle server time.
    ZeroBubble,
    /// W runs immediately after its B as one unit.
    Fused,
    /// Every event runs alone, one after another.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSchedule {
    pub mode: ScheduleMode,
    pub events: Vec<ScheduleEvent>,
}

impl PipelineSchedule {
    pub fn makespan(&self) -> f64 {
        self.events.iter().map(ScheduleEvent::end).fold(0.0, f64::max)
    }

    pub fn resources(&self) -> Vec<Resource> {
        let mut r: Vec<Resource> = self.events.iter().map(|e| e.resource).collect();
        r.sort();
        r.dedup();
        r
    }

    pub fn busy_time(&self, r: Resource) -> f64 {
        self.events.iter().filter(|e| e.resource == r).map(|e| e.duration).sum()
    }

    /// Idle time of `r` over `[0, makespan]`.
    pub fn bubble_time(&self, r: Resource) -> f64 {
        (self.makespan() - self.busy_time(r)).max(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Absolute slack for floating comparisons of event times.
const TIME_EPS: f64 = 1e-12;

fn slack(t: f64) -> f64 {
    TIME_EPS * t.abs().max(1.0)
}

/// Returns one message per violated rule; empty means valid.
pub fn validate_schedule(s: &PipelineSchedule) -> Vec<String> {
    let mut out = Vec::new();
    let ev = &s.events;
    for (i, e) in ev.iter().enumerate() {
        if !(e.duration >= 0.0 && e.duration.is_finite() && e.start >= 0.0 && e.start.is_finite()) {
            out.push(format!("invalid time on {}", e.label(i)));
        }
        for &d in &e.deps {
            match ev.get(d) {
                None => out.push(format!("{} depends on missing event #{d}", e.label(i))),
                Some(p) if p.end() > e.start + slack(e.start) => out.push(format!(
                    "{} starts before its dependency {} ends",
                    e.label(i),
                    p.label(d)
                )),
                _ => {}
            }
        }
    }

    let mut by_res: Vec<usize> = (0..ev.len()).collect();
    by_res.sort_by(|&a, &b| {
        ev[a]
            .resource
            .cmp(&ev[b].resource)
            .then(ev[a].start.total_cmp(&ev[b].start))
            .then(a.cmp(&b))
    });
    for w in by_res.windows(2) {
        let (a, b) = (&ev[w[0]], &ev[w[1]]);
        if a.resource == b.resource && a.end() > b.start + slack(b.start) && b.duration > 0.0 && a.duration > 0.0 {
            out.push(format!("overlap: {} and {}", a.label(w[0]), b.label(w[1])));
        }
    }

    // Per microbatch: first occurrence of each kind follows the F, X, AF, SF, B, W chain,
    // and every W is preceded by a B of the same microbatch on the same resource.
    let mut groups: std::collections::BTreeMap<(u32, u32), Vec<usize>> = Default::default();
    for (i, e) in ev.iter().enumerate() {
        if e.kind != EventKind::Sync {
            groups.entry((e.device, e.microbatch)).or_default().push(i);
        }
    }
    for idx in groups.values() {
        let mut first: [Option<usize>; 6] = [None; 6];
        for &i in idx {
            let r = ev[i].kind.chain_rank().unwrap() as usize;
            if first[r].is_none_or(|j| ev[i].start < ev[j].start) {
                first[r] = Some(i);
            }
        }
        let present: Vec<usize> = first.iter().flatten().copied().collect();
        for w in present.windows(2) {
            let (a, b) = (&ev[w[0]], &ev[w[1]]);
            if a.end() > b.start + slack(b.start) {
                out.push(format!(
                    "chain order: {} must finish before {}",
                    a.label(w[0]),
                    b.label(w[1])
                ));
            }
        }
        for &i in idx {
            let e = &ev[i];
            if e.kind == EventKind::W {
                let ok = idx.iter().any(|&j| {
                    ev[j].kind == EventKind::B
                        && ev[j].resource == e.resource
                        && ev[j].end() <= e.start + slack(e.start)
                });
                if !ok {
                    out.push(format!("{} has no completed B on the same resource", e.label(i)));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    SplitFrozen,
    CenLoRA,
    FedLoRA,
    SplitLoRA,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::SplitFrozen, Scheme::CenLoRA, Scheme::FedLoRA, Scheme::SplitLoRA];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::SplitFrozen => "splitfrozen",
            Scheme::CenLoRA => "cenlora",
            Scheme::FedLoRA => "fedlora",
            Scheme::SplitLoRA => "splitlora",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownScheme(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn reference_cluster() -> ClusterSpec {
        let gpu = 82.6e12;
        let devices = (0..10)
            .map(|i| DeviceProfile {
                device_id: i,
                peak_flops: if i < 3 { 0.1 * gpu } else { 0.2 * gpu },
                assigned_layers: 0,
            })
            .collect();
        ClusterSpec {
            devices,
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

    #[test]
    fn reference_fleet_allocation() {
        let d = allocate_layers(&reference_cluster()).unwrap();
        assert_eq!(d, vec![1, 1, 1, 3, 3, 3, 3, 3, 3, 3]);
    }

    #[test]
    fn homogeneous_fleet_gets_equal_depths() {
        let mut c = reference_cluster();
        c.devices.iter_mut().for_each(|d| d.peak_flops = 1e13);
        let d = allocate_layers(&c).unwrap();
        assert!(d.iter().all(|&l| l == 3));
    }

    #[test]
    fn infeasible_bounds() {
        let mut c = reference_cluster();
        c.layer_bounds = Some((3, 1));
        assert!(matches!(allocate_layers(&c), Err(Error::Allocation(_))));
        c.layer_bounds = Some((1, 13));
        assert!(allocate_layers(&c).is_err());
        c.layer_bounds = None;
        assert_eq!(c.bounds(), (1, 3));
    }

    #[test]
    fn resource_strings_round_trip() {
        for r in [
            Resource::Server,
            Resource::Channel,
            Resource::Link(3),
            Resource::Device(12),
        ] {
            assert_eq!(r.to_string().parse::<Resource>().unwrap(), r);
        }
        assert!("gpu:1".parse::<Resource>().is_err());
        assert!("link:x".parse::<Resource>().is_err());
    }

    #[test]
    fn scheme_names() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!(matches!("fedavg".parse::<Scheme>(), Err(Error::UnknownScheme(_))));
    }

    #[test]
    fn overlap_is_reported_once_with_both_events() {
        let ev = |start: f64| ScheduleEvent {
            kind: EventKind::F,
            resource: Resource::Device(0),
            device: 0,
            microbatch: start as u32,
            start,
            duration: 1.0,
            deps: vec![],
        };
        let s = PipelineSchedule {
            mode: ScheduleMode::ZeroBubble,
            events: vec![ev(0.0), ev(0.5)],
        };
        let v = validate_schedule(&s);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("#0") && v[0].contains("#1"), "{v:?}");
    }

    #[test]
    fn w_without_b_is_reported() {
        let s = PipelineSchedule {
            mode: ScheduleMode::ZeroBubble,
            events: vec![ScheduleEvent {
                kind: EventKind::W,
                resource: Resource::Server,
                device: 0,
                microbatch: 0,
                start: 0.0,
                duration: 1.0,
                deps: vec![],
            }],
        };
        assert_eq!(validate_schedule(&s).len(), 1);
    }
}
