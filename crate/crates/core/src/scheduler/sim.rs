use std::collections::BTreeMap;

use super::{
    allocate_layers, ChannelTopology, ClusterSpec, EventKind, PipelineSchedule, Resource, ScheduleEvent, ScheduleMode,
    Scheme,
};
use crate::costmodel;
use crate::error::{Error, Result};

/// One simulated epoch of one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeResult {
    pub scheme: Scheme,
    pub schedule: PipelineSchedule,
    /// Device prefix depths (SplitFrozen), the cut (SplitLoRA) or the full depth.
    pub depths: Vec<usize>,
    /// Fleet-average device FLOPs per training sample.
    pub device_flops_per_sample: f64,
    /// Busiest device's compute plus its own transmissions, in seconds.
    pub device_time: f64,
    /// Makespan in seconds.
    pub total_time: f64,
    /// Bytes moved over links during the epoch.
    pub channel_bytes: f64,
}

struct Task {
    resource: Resource,
    device: u32,
    microbatch: u32,
    segments: Vec<(EventKind, f64)>,
    deps: Vec<usize>,
}

impl Task {
    fn priority(&self) -> u8 {
        match self.segments[0].0 {
            EventKind::AF => 0,
            EventKind::SF => 1,
            EventKind::B => 2,
            EventKind::W => 3,
            EventKind::Sync => 1,
            EventKind::F | EventKind::X => 0,
        }
    }
}

struct Graph {
    mode: ScheduleMode,
    tasks: Vec<Task>,
}

impl Graph {
    fn new(mode: ScheduleMode) -> Self {
        Self {
            mode,
            tasks: Vec::new(),
        }
    }

    /// Adds a phase after `deps`; returns the new frontier. Zero-length phases
    /// are omitted and the frontier passes through unchanged.
    fn add(
        &mut self,
        kind: EventKind,
        resource: Resource,
        device: u32,
        mb: u32,
        dur: f64,
        deps: &[usize],
    ) -> Vec<usize> {
        if dur <= 0.0 {
            return deps.to_vec();
        }
        self.tasks.push(Task {
            resource,
            device,
            microbatch: mb,
            segments: vec![(kind, dur)],
            deps: deps.to_vec(),
        });
        vec![self.tasks.len() - 1]
    }

    /// B then W. Fused mode keeps them as one unit, so nothing can run in between.
    fn add_backward(
        &mut self,
        resource: Resource,
        device: u32,
        mb: u32,
        b: f64,
        w: f64,
        deps: &[usize],
    ) -> (Vec<usize>, Vec<usize>) {
        if self.mode == ScheduleMode::Fused && b > 0.0 && w > 0.0 {
            self.tasks.push(Task {
                resource,
                device,
                microbatch: mb,
                segments: vec![(EventKind::B, b), (EventKind::W, w)],
                deps: deps.to_vec(),
            });
            let id = vec![self.tasks.len() - 1];
            return (id.clone(), id);
        }
        let after_b = self.add(EventKind::B, resource, device, mb, b, deps);
        let after_w = self.add(EventKind::W, resource, device, mb, w, &after_b);
        (after_b, after_w)
    }

    fn run(self) -> PipelineSchedule {
        let n = self.tasks.len();
        let mut events = Vec::new();
        let mut last_event = vec![0usize; n];
        let commit = |t: &Task, start: f64, events: &mut Vec<ScheduleEvent>, last_event: &[usize]| -> (usize, f64) {
            let mut at = start;
            let mut deps: Vec<usize> = t.deps.iter().map(|&d| last_event[d]).collect();
            for &(kind, duration) in &t.segments {
                events.push(ScheduleEvent {
                    kind,
                    resource: t.resource,
                    device: t.device,
                    microbatch: t.microbatch,
                    start: at,
                    duration,
                    deps: std::mem::take(&mut deps),
                });
                deps = vec![events.len() - 1];
                at += duration;
            }
            (events.len() - 1, at)
        };

        if self.mode == ScheduleMode::Sequential {
            let mut t = 0.0;
            for (k, task) in self.tasks.iter().enumerate() {
                let (last, end) = commit(task, t, &mut events, &last_event);
                last_event[k] = last;
                t = end;
            }
            return PipelineSchedule {
                mode: self.mode,
                events,
            };
        }

        let mut pending: Vec<usize> = self.tasks.iter().map(|t| t.deps.len()).collect();
        let mut children = vec![Vec::new(); n];
        for (k, t) in self.tasks.iter().enumerate() {
            for &d in &t.deps {
                children[d].push(k);
            }
        }
        let mut ready_at = vec![0.0f64; n];
        let mut ready: Vec<usize> = (0..n).filter(|&k| pending[k] == 0).collect();
        let mut free: BTreeMap<Resource, f64> = BTreeMap::new();
        while !ready.is_empty() {
            let est = |k: usize| ready_at[k].max(free.get(&self.tasks[k].resource).copied().unwrap_or(0.0));
            let (pos, &k) = ready
                .iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| {
                    let (ta, tb) = (&self.tasks[a], &self.tasks[b]);
                    est(a)
                        .total_cmp(&est(b))
                        .then(ta.priority().cmp(&tb.priority()))
                        .then(ta.device.cmp(&tb.device))
                        .then(ta.microbatch.cmp(&tb.microbatch))
                        .then(a.cmp(&b))
                })
                .expect("ready is non-empty");
            let start = est(k);
            ready.swap_remove(pos);
            let (last, end) = commit(&self.tasks[k], start, &mut events, &last_event);
            last_event[k] = last;
            free.insert(self.tasks[k].resource, end);
            for &c in &children[k] {
                ready_at[c] = ready_at[c].max(end);
                pending[c] -= 1;
                if pending[c] == 0 {
                    ready.push(c);
                }
            }
        }
        PipelineSchedule {
            mode: self.mode,
            events,
        }
    }
}

struct Costs {
    fwd: f64,
    lora: f64,
    grad: f64,
    w_lora: f64,
    act_xmit: f64,
    act_bytes: f64,
    layers: usize,
    rounds: u32,
}

impl Costs {
    fn of(c: &ClusterSpec) -> Self {
        let bw = costmodel::backward_flops_per_layer(&c.model, &c.workload);
        let act_bytes = costmodel::activation_bytes(&c.model, &c.workload);
        Self {
            fwd: costmodel::forward_flops_per_layer(&c.model, &c.workload),
            lora: costmodel::lora_flops_per_layer(&c.model, &c.workload),
            grad: bw.grad + bw.weight_frozen,
            w_lora: bw.weight_lora,
            act_xmit: costmodel::xmit_time(act_bytes, &c.channel),
            act_bytes,
            layers: c.model.num_layers,
            rounds: c.workload.rounds as u32,
        }
    }

    fn finetune(&self) -> f64 {
        self.fwd + self.lora + self.grad + self.w_lora
    }
}

fn link(c: &ClusterSpec, device: u32) -> Resource {
    match c.topology {
        ChannelTopology::Shared => Resource::Channel,
        ChannelTopology::PerDevice => Resource::Link(device),
    }
}

fn device_time(c: &ClusterSpec, s: &PipelineSchedule) -> f64 {
    c.devices
        .iter()
        .map(|d| {
            s.events
                .iter()
                .filter(|e| e.device == d.device_id && e.resource != Resource::Server)
                .map(|e| e.duration)
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn finish(
    c: &ClusterSpec,
    scheme: Scheme,
    schedule: PipelineSchedule,
    depths: Vec<usize>,
    flops: f64,
    bytes: f64,
) -> SchemeResult {
    SchemeResult {
        scheme,
        device_time: device_time(c, &schedule),
        total_time: schedule.makespan(),
        schedule,
        depths,
        device_flops_per_sample: flops / c.workload.batch_size as f64,
        channel_bytes: bytes,
    }
}

/// SplitFrozen epoch: every device forwards `depths[i]` frozen layers and
/// ships activations for each of its `workload.rounds` microbatches; the
/// server runs AF, SF, B and W per microbatch, preferring AF > SF > B > W.
pub fn simulate_splitfrozen(c: &ClusterSpec, depths: &[usize], mode: ScheduleMode) -> Result<SchemeResult> {
    c.validate()?;
    if depths.len() != c.devices.len() {
        return Err(Error::Allocation(format!(
            "{} depths for {} devices",
            depths.len(),
            c.devices.len()
        )));
    }
    let k = Costs::of(c);
    if let Some(&bad) = depths.iter().find(|&&l| l > k.layers) {
        return Err(Error::Allocation(format!("depth {bad} exceeds {} layers", k.layers)));
    }
    let start = *depths.iter().max().unwrap();
    if c.server.max_shared_layer_start > 0 && start > c.server.max_shared_layer_start {
        return Err(Error::Allocation(format!(
            "shared layers would start at {start}, server allows at most {}",
            c.server.max_shared_layer_start
        )));
    }
    let shared = (k.layers - start) as f64;
    let cs = c.server_capacity();
    let mut g = Graph::new(mode);
    for mb in 0..k.rounds {
        for (i, d) in c.devices.iter().enumerate() {
            let id = d.device_id;
            let f = g.add(
                EventKind::F,
                Resource::Device(id),
                id,
                mb,
                depths[i] as f64 * k.fwd / c.device_capacity(i),
                &[],
            );
            let x = g.add(EventKind::X, link(c, id), id, mb, k.act_xmit, &f);
            let af = g.add(
                EventKind::AF,
                Resource::Server,
                id,
                mb,
                (start - depths[i]) as f64 * k.fwd / cs,
                &x,
            );
            let sf = g.add(
                EventKind::SF,
                Resource::Server,
                id,
                mb,
                shared * (k.fwd + k.lora) / cs,
                &af,
            );
            g.add_backward(
                Resource::Server,
                id,
                mb,
                shared * k.grad / cs,
                shared * k.w_lora / cs,
                &sf,
            );
        }
    }
    let mean_depth = depths.iter().sum::<usize>() as f64 / depths.len() as f64;
    let bytes = k.act_bytes * (c.devices.len() as u32 * k.rounds) as f64;
    Ok(finish(
        c,
        Scheme::SplitFrozen,
        g.run(),
        depths.to_vec(),
        mean_depth * k.fwd,
        bytes,
    ))
}

/// Adds the adapter exchange closing round `mb`: every device uploads after
/// `after[i]`, and downloads once all uploads are in. Returns per-device frontiers.
fn sync_round(g: &mut Graph, c: &ClusterSpec, mb: u32, after: &[Vec<usize>], dur: f64) -> Vec<Vec<usize>> {
    let mut ups = Vec::new();
    for (d, a) in c.devices.iter().zip(after) {
        ups.extend(g.add(EventKind::Sync, link(c, d.device_id), d.device_id, mb, dur, a));
    }
    c.devices
        .iter()
        .map(|d| g.add(EventKind::Sync, link(c, d.device_id), d.device_id, mb, dur, &ups))
        .collect()
}

/// Baseline epoch. FedLoRA: each device fine-tunes the full model and
/// averages adapters after every microbatch. SplitLoRA: each device
/// fine-tunes `splitlora_cut` layers, exchanging activations and gradients
/// with the server, and averages its adapters after every microbatch.
/// CenLoRA: one device-sized share fine-tuned centrally on the weakest
/// device's capacity (no communication).
pub fn simulate_baseline(c: &ClusterSpec, scheme: Scheme, mode: ScheduleMode) -> Result<SchemeResult> {
    c.validate()?;
    let k = Costs::of(c);
    let l = k.layers as f64;
    let mut g = Graph::new(mode);
    let n = c.devices.len();
    match scheme {
        Scheme::SplitFrozen => Err(Error::Config("splitfrozen is not a baseline".into())),
        Scheme::CenLoRA => {
            let (i, d) = c
                .devices
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    a.1.peak_flops
                        .total_cmp(&b.1.peak_flops)
                        .then(a.1.device_id.cmp(&b.1.device_id))
                })
                .unwrap();
            let cap = c.device_capacity(i);
            let r = Resource::Device(d.device_id);
            for mb in 0..k.rounds {
                let f = g.add(EventKind::F, r, d.device_id, mb, l * (k.fwd + k.lora) / cap, &[]);
                g.add_backward(r, d.device_id, mb, l * k.grad / cap, l * k.w_lora / cap, &f);
            }
            Ok(finish(c, scheme, g.run(), vec![k.layers], l * k.finetune(), 0.0))
        }
        Scheme::FedLoRA => {
            let sync_bytes = costmodel::adapter_bytes(&c.model, &c.workload, k.layers);
            let sync = costmodel::xmit_time(sync_bytes, &c.channel);
            let mut front = vec![Vec::new(); n];
            for mb in 0..k.rounds {
                let mut done = Vec::new();
                for (i, d) in c.devices.iter().enumerate() {
                    let (id, cap, r) = (d.device_id, c.device_capacity(i), Resource::Device(d.device_id));
                    let f = g.add(EventKind::F, r, id, mb, l * (k.fwd + k.lora) / cap, &front[i]);
                    let (_, w) = g.add_backward(r, id, mb, l * k.grad / cap, l * k.w_lora / cap, &f);
                    done.push(w);
                }
                front = sync_round(&mut g, c, mb, &done, sync);
            }
            let bytes = 2.0 * sync_bytes * (n as u32 * k.rounds) as f64;
            Ok(finish(c, scheme, g.run(), vec![k.layers; n], l * k.finetune(), bytes))
        }
        Scheme::SplitLoRA => {
            let cut = c.splitlora_cut;
            let (dl, sl) = (cut as f64, (k.layers - cut) as f64);
            let cs = c.server_capacity();
            let sync_bytes = costmodel::adapter_bytes(&c.model, &c.workload, cut);
            let sync = costmodel::xmit_time(sync_bytes, &c.channel);
            let mut front = vec![Vec::new(); n];
            for mb in 0..k.rounds {
                let mut done = Vec::new();
                for (i, d) in c.devices.iter().enumerate() {
                    let (id, cap, r) = (d.device_id, c.device_capacity(i), Resource::Device(d.device_id));
                    let f = g.add(EventKind::F, r, id, mb, dl * (k.fwd + k.lora) / cap, &front[i]);
                    let up = g.add(EventKind::X, link(c, id), id, mb, k.act_xmit, &f);
                    let sf = g.add(EventKind::SF, Resource::Server, id, mb, sl * (k.fwd + k.lora) / cs, &up);
                    let (b, _) = g.add_backward(Resource::Server, id, mb, sl * k.grad / cs, sl * k.w_lora / cs, &sf);
                    let down = g.add(EventKind::X, link(c, id), id, mb, k.act_xmit, &b);
                    let (_, w) = g.add_backward(r, id, mb, dl * k.grad / cap, dl * k.w_lora / cap, &down);
                    done.push(w);
                }
                front = sync_round(&mut g, c, mb, &done, sync);
            }
            let bytes = (2.0 * k.act_bytes + 2.0 * sync_bytes) * (n as u32 * k.rounds) as f64;
            Ok(finish(c, scheme, g.run(), vec![cut; n], dl * k.finetune(), bytes))
        }
    }
}

/// Any scheme. SplitFrozen uses the depths on the device profiles when any
/// is non-zero, otherwise [`allocate_layers`].
pub fn simulate(c: &ClusterSpec, scheme: Scheme, mode: ScheduleMode) -> Result<SchemeResult> {
    match scheme {
        Scheme::SplitFrozen => {
            let depths = if c.devices.iter().any(|d| d.assigned_layers > 0) {
                c.assigned_depths()
            } else {
                allocate_layers(c)?
            };
            simulate_splitfrozen(c, &depths, mode)
        }
        other => simulate_baseline(c, other, mode),
    }
}
