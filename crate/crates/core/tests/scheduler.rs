mod common;

use common::{random_cluster, reference_cluster};
use proptest::prelude::*;
use splitfrozen::costmodel::DeviceProfile;
use splitfrozen::scheduler::{
    allocate_layers, render_svg, simulate, simulate_baseline, simulate_splitfrozen, validate_schedule,
    PipelineSchedule, Resource, ScheduleMode, Scheme,
};

const FUZZ: u64 = 1000;

fn close_le(a: f64, b: f64) -> bool {
    a <= b + 1e-9 * b.abs().max(1.0)
}

#[test]
fn fuzzed_schedules_are_valid() {
    for seed in 0..FUZZ {
        let (c, depths) = random_cluster(seed);
        for mode in [ScheduleMode::ZeroBubble, ScheduleMode::Fused, ScheduleMode::Sequential] {
            let r = simulate_splitfrozen(&c, &depths, mode).unwrap();
            assert_eq!(
                validate_schedule(&r.schedule),
                Vec::<String>::new(),
                "seed {seed} {mode:?}"
            );
            for b in [Scheme::CenLoRA, Scheme::FedLoRA, Scheme::SplitLoRA] {
                let r = simulate_baseline(&c, b, mode).unwrap();
                assert_eq!(
                    validate_schedule(&r.schedule),
                    Vec::<String>::new(),
                    "seed {seed} {b} {mode:?}"
                );
            }
        }
    }
}

#[test]
fn pipelining_never_loses_and_only_ties_on_one_microbatch() {
    for seed in 0..FUZZ {
        let (c, depths) = random_cluster(seed);
        let p = simulate_splitfrozen(&c, &depths, ScheduleMode::ZeroBubble).unwrap();
        let s = simulate_splitfrozen(&c, &depths, ScheduleMode::Sequential).unwrap();
        let (mp, ms) = (p.schedule.makespan(), s.schedule.makespan());
        assert!(close_le(mp, ms), "seed {seed}: {mp} > {ms}");
        let microbatches = c.devices.len() * c.workload.rounds;
        if microbatches == 1 {
            assert!((mp - ms).abs() <= 1e-12 * ms, "seed {seed}");
        } else {
            assert!(
                mp < ms * (1.0 - 1e-9),
                "seed {seed}: {mp} vs {ms} with {microbatches} microbatches"
            );
        }
        for r in p.schedule.resources() {
            let (a, b) = (p.schedule.busy_time(r), s.schedule.busy_time(r));
            assert!((a - b).abs() <= 1e-9 * a.max(1e-12), "work not conserved on {r}");
        }
    }
}

#[test]
fn zero_bubble_never_idles_the_server_more_than_fused() {
    for seed in 0..FUZZ {
        let (c, depths) = random_cluster(seed);
        let zb = simulate_splitfrozen(&c, &depths, ScheduleMode::ZeroBubble).unwrap();
        let fused = simulate_splitfrozen(&c, &depths, ScheduleMode::Fused).unwrap();
        let (a, b) = (
            zb.schedule.bubble_time(Resource::Server),
            fused.schedule.bubble_time(Resource::Server),
        );
        assert!(close_le(a, b), "seed {seed}: {a} > {b}");
    }
}

#[test]
fn allocation_is_capacity_monotone() {
    for seed in 0..FUZZ {
        let (c, _) = random_cluster(seed);
        let d = allocate_layers(&c).unwrap();
        let (lo, hi) = c.bounds();
        for (i, a) in c.devices.iter().enumerate() {
            assert!((lo..=hi).contains(&d[i]));
            for (j, b) in c.devices.iter().enumerate() {
                if a.peak_flops >= b.peak_flops {
                    assert!(d[i] >= d[j], "seed {seed}: {d:?}");
                }
            }
        }
    }
}

/// Brute force over every depth pair for two devices.
fn brute_force_pair(c: &splitfrozen::scheduler::ClusterSpec) -> (usize, usize) {
    let (lo, hi) = c.bounds();
    let mut best = None;
    for a in lo..=hi {
        for b in lo..=hi {
            let spread = (c.stage_time(0, a) - c.stage_time(1, b)).abs();
            let key = (spread, a + b, a);
            if best.is_none_or(|(s, t, x, _): (f64, usize, usize, usize)| (key.0, key.1, key.2) < (s, t, x)) {
                best = Some((spread, a + b, a, b));
            }
        }
    }
    let (_, _, a, b) = best.unwrap();
    (a, b)
}

#[test]
fn two_devices_one_and_three_times() {
    let mut c = reference_cluster();
    c.devices = vec![
        DeviceProfile {
            device_id: 0,
            peak_flops: 1e12,
            assigned_layers: 0,
        },
        DeviceProfile {
            device_id: 1,
            peak_flops: 3e12,
            assigned_layers: 0,
        },
    ];
    // Pure compute: make transmission negligible.
    c.channel.rate = 1e18;
    let d = allocate_layers(&c).unwrap();
    assert_eq!(d, vec![1, 3]);
    let (a, b) = brute_force_pair(&c);
    assert_eq!((d[0], d[1]), (a, b));
}

#[test]
fn identical_spec_identical_schedule() {
    let c = reference_cluster();
    for s in Scheme::ALL {
        let a = simulate(&c, s, ScheduleMode::ZeroBubble).unwrap();
        let b = simulate(&c.clone(), s, ScheduleMode::ZeroBubble).unwrap();
        assert_eq!(a.schedule, b.schedule);
    }
}

#[test]
fn json_and_svg_round_trip() {
    let r = simulate(&reference_cluster(), Scheme::SplitFrozen, ScheduleMode::ZeroBubble).unwrap();
    let json = r.schedule.to_json().unwrap();
    let back = PipelineSchedule::from_json(&json).unwrap();
    assert_eq!(back, r.schedule);
    assert_eq!(render_svg(&back), render_svg(&r.schedule));
    assert_eq!(back.makespan(), r.schedule.makespan());
}

#[test]
fn device_flop_ratios() {
    let c = reference_cluster();
    let get = |s| {
        simulate(&c, s, ScheduleMode::ZeroBubble)
            .unwrap()
            .device_flops_per_sample
    };
    let fed = get(Scheme::FedLoRA);
    let sf = get(Scheme::SplitFrozen) / fed;
    let sl = get(Scheme::SplitLoRA) / fed;
    assert!((0.05..=0.12).contains(&sf), "{sf}");
    assert!((sl - 0.25).abs() <= 0.02, "{sl}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn validity_under_arbitrary_depths(seed in 0u64..10_000, depth_seed in any::<u64>()) {
        let (c, _) = random_cluster(seed);
        let mut r = splitfrozen::rng::seeded(depth_seed);
        let depths: Vec<usize> = (0..c.devices.len())
            .map(|_| splitfrozen::rng::index(&mut r, c.model.num_layers + 1))
            .collect();
        let s = simulate_splitfrozen(&c, &depths, ScheduleMode::ZeroBubble).unwrap();
        prop_assert!(validate_schedule(&s.schedule).is_empty());
        let recomputed = s.schedule.events.iter().map(|e| e.start + e.duration).fold(0.0, f64::max);
        prop_assert_eq!(recomputed, s.schedule.makespan());
    }
}
