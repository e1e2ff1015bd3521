//! Report rows, ratio columns and CSV/JSON writers.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::scheduler::{PipelineSchedule, Scheme, SchemeResult};

/// Bumped whenever a CSV column is added, removed or renamed.
pub const REPORT_VERSION: u32 = 1;
pub const FLOP_CONVENTION: &str = "one multiply-add = 2 FLOPs";
pub const TIME_UNIT: &str = "simulated seconds per epoch";

pub const CSV_COLUMNS: [&str; 12] = [
    "scheme",
    "data_mode",
    "seed",
    "device_flops_per_sample",
    "device_time_s",
    "total_time_s",
    "final_loss",
    "device_flops_ratio_vs_fedlora",
    "device_flops_reduction_pct_vs_fedlora",
    "best_baseline",
    "total_time_ratio_vs_best_baseline",
    "total_time_reduction_pct_vs_best_baseline",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scheme: Scheme,
    pub data_mode: String,
    pub seed: u64,
    pub device_flops_per_sample: f64,
    pub device_time_s: f64,
    pub total_time_s: f64,
    pub final_loss: f64,
    pub device_flops_ratio_vs_fedlora: Option<f64>,
    pub device_flops_reduction_pct_vs_fedlora: Option<f64>,
    /// Fastest baseline scheme in the same (data mode, seed) group.
    pub best_baseline: Option<Scheme>,
    pub total_time_ratio_vs_best_baseline: Option<f64>,
    pub total_time_reduction_pct_vs_best_baseline: Option<f64>,
}

impl ReportRow {
    pub fn new(sim: &SchemeResult, data_mode: &str, seed: u64, final_loss: f64) -> Self {
        Self {
            scheme: sim.scheme,
            data_mode: data_mode.to_string(),
            seed,
            device_flops_per_sample: sim.device_flops_per_sample,
            device_time_s: sim.device_time,
            total_time_s: sim.total_time,
            final_loss,
            device_flops_ratio_vs_fedlora: None,
            device_flops_reduction_pct_vs_fedlora: None,
            best_baseline: None,
            total_time_ratio_vs_best_baseline: None,
            total_time_reduction_pct_vs_best_baseline: None,
        }
    }
}

pub fn reduction_pct(ratio: f64) -> f64 {
    (1.0 - ratio) * 100.0
}

struct Baselines {
    fedlora_flops: Option<f64>,
    best: Option<(Scheme, f64)>,
}

/// FedLoRA device FLOPs and the fastest baseline within `r`'s (data mode, seed) group.
fn baselines(rows: &[ReportRow], r: &ReportRow) -> Baselines {
    let group = rows.iter().filter(|o| o.data_mode == r.data_mode && o.seed == r.seed);
    Baselines {
        fedlora_flops: group
            .clone()
            .find(|o| o.scheme == Scheme::FedLoRA)
            .map(|o| o.device_flops_per_sample),
        best: group
            .filter(|o| o.scheme != Scheme::SplitFrozen)
            .min_by(|a, b| a.total_time_s.total_cmp(&b.total_time_s).then(a.scheme.cmp(&b.scheme)))
            .map(|o| (o.scheme, o.total_time_s)),
    }
}

/// Fills the ratio columns from the raw columns of each (data mode, seed) group.
pub fn fill_ratios(rows: &mut [ReportRow]) {
    let all: Vec<Baselines> = rows.iter().map(|r| baselines(rows, r)).collect();
    for (r, b) in rows.iter_mut().zip(all) {
        let flops = b.fedlora_flops.map(|f| r.device_flops_per_sample / f);
        r.device_flops_ratio_vs_fedlora = flops;
        r.device_flops_reduction_pct_vs_fedlora = flops.map(reduction_pct);
        r.best_baseline = b.best.map(|(s, _)| s);
        let time = b.best.map(|(_, t)| r.total_time_s / t);
        r.total_time_ratio_vs_best_baseline = time;
        r.total_time_reduction_pct_vs_best_baseline = time.map(reduction_pct);
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# report_version={REPORT_VERSION}; flops: {FLOP_CONVENTION}; times: {TIME_UNIT}"
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.scheme.name().to_string(),
            r.data_mode.clone(),
            r.seed.to_string(),
            r.device_flops_per_sample.to_string(),
            r.device_time_s.to_string(),
            r.total_time_s.to_string(),
            r.final_loss.to_string(),
            opt(r.device_flops_ratio_vs_fedlora),
            opt(r.device_flops_reduction_pct_vs_fedlora),
            opt(r.best_baseline.map(Scheme::name)),
            opt(r.total_time_ratio_vs_best_baseline),
            opt(r.total_time_reduction_pct_vs_best_baseline),
        ])?;
    }
    let body = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    out.push_str(&String::from_utf8_lossy(&body));
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub scheme: Scheme,
    pub data_mode: String,
    pub seed: u64,
    pub train_losses: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleEntry {
    pub scheme: Scheme,
    pub depths: Vec<usize>,
    pub device_flops_per_sample: f64,
    pub device_time_s: f64,
    pub total_time_s: f64,
    pub channel_bytes: f64,
    pub schedule: PipelineSchedule,
}

impl From<&SchemeResult> for ScheduleEntry {
    fn from(r: &SchemeResult) -> Self {
        Self {
            scheme: r.scheme,
            depths: r.depths.clone(),
            device_flops_per_sample: r.device_flops_per_sample,
            device_time_s: r.device_time,
            total_time_s: r.total_time,
            channel_bytes: r.channel_bytes,
            schedule: r.schedule.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub report_version: u32,
    pub name: String,
    pub flop_convention: &'static str,
    pub time_unit: &'static str,
    pub rows: Vec<ReportRow>,
    pub trajectories: Vec<Trajectory>,
    pub schedules: Vec<ScheduleEntry>,
}

impl Report {
    pub fn new(name: &str) -> Self {
        Self {
            report_version: REPORT_VERSION,
            name: name.to_string(),
            flop_convention: FLOP_CONVENTION,
            time_unit: TIME_UNIT,
            rows: Vec::new(),
            trajectories: Vec::new(),
            schedules: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Ratio columns that do not recompute from the raw columns within `tol`.
pub fn check_ratios(rows: &[ReportRow], tol: f64) -> Vec<String> {
    let mut bad = Vec::new();
    for r in rows {
        let b = baselines(rows, r);
        let mut check = |name: &str, stored: Option<f64>, expect: Option<f64>| {
            let ok = match (stored, expect) {
                (Some(a), Some(b)) => (a - b).abs() <= tol * b.abs().max(1.0),
                (None, None) => true,
                _ => false,
            };
            if !ok {
                bad.push(format!(
                    "{} {} seed {}: {name} {stored:?} vs {expect:?}",
                    r.scheme, r.data_mode, r.seed
                ));
            }
        };
        let flops = b.fedlora_flops.map(|f| r.device_flops_per_sample / f);
        let time = b.best.map(|(_, t)| r.total_time_s / t);
        check("device_flops_ratio", r.device_flops_ratio_vs_fedlora, flops);
        check(
            "device_flops_reduction",
            r.device_flops_reduction_pct_vs_fedlora,
            flops.map(reduction_pct),
        );
        check("total_time_ratio", r.total_time_ratio_vs_best_baseline, time);
        check(
            "total_time_reduction",
            r.total_time_reduction_pct_vs_best_baseline,
            time.map(reduction_pct),
        );
    }
    bad
}
