use proptest::prelude::*;
use ringada_core::baselines::SchemeKind;
use ringada_core::domain::*;
use ringada_core::sim::*;

fn ids(n: u32) -> Vec<DeviceId> {
    (1..=n).map(DeviceId).collect()
}

fn four_device_ring() -> (LayerAssignment, Cluster) {
    (
        LayerAssignment::from_sizes(&ids(4), &[4, 5, 2, 3]).unwrap(),
        Cluster::uniform(4, 1.0, 1.0, u64::MAX),
    )
}

fn unit_cost() -> CostModel {
    CostModel::unit(1.0, 2.0, 1)
}

fn spec(layers: usize) -> LMSpec {
    LMSpec {
        num_layers: layers,
        hidden_dim: 16,
        bottleneck_dim: 4,
        num_heads: 2,
        vocab_size: 32,
        seq_len: 16,
        num_classes: 2,
        scalar_bytes: 4,
    }
}

#[test]
fn single_device_iteration_matches_hand_timeline() {
    let a = LayerAssignment::single(DeviceId(1), 2).unwrap();
    let c = Cluster::uniform(1, 1.0, 1.0, u64::MAX);
    let log = simulate_iteration(&a, &unit_cost(), &c, 2, DeviceId(1), 0, 0.0).unwrap();
    // emb 1, two blocks 2, head 1, head update 2, two blocks backward 4
    assert_eq!(log.makespan(), 10.0);
    let kinds: Vec<_> = log
        .events
        .iter()
        .map(|e| (e.task.kind, e.start, e.end))
        .collect();
    assert_eq!(
        kinds,
        vec![
            (TaskKind::FwCompute, 0.0, 1.0),
            (TaskKind::FwCompute, 1.0, 3.0),
            (TaskKind::FwCompute, 3.0, 4.0),
            (TaskKind::HeadUpdateCompute, 4.0, 6.0),
            (TaskKind::BwCompute, 6.0, 10.0),
        ]
    );
}

#[test]
fn worked_example_forward_and_backward_paths() {
    let (a, c) = four_device_ring();
    let log = simulate_pipeline(&a, &unit_cost(), &c, 3, DeviceId(1), 1).unwrap();
    let u = |n| DeviceId(n);
    assert_eq!(log.forward_path(0), vec![u(1), u(2), u(3), u(4), u(1)]);
    assert_eq!(log.backward_path(0), vec![u(1), u(4)]);
    let bw: Vec<_> = log
        .events
        .iter()
        .filter(|e| e.task.kind == TaskKind::BwCompute)
        .collect();
    assert_eq!(bw.len(), 1);
    assert_eq!((bw[0].task.layer_begin, bw[0].task.layer_end), (12, 14));
}

#[test]
fn iteration_equals_single_batch_pipeline_shifted() {
    let (a, c) = four_device_ring();
    let p = simulate_pipeline(&a, &unit_cost(), &c, 5, DeviceId(2), 1).unwrap();
    let it = simulate_iteration(&a, &unit_cost(), &c, 5, DeviceId(2), 0, 0.0).unwrap();
    assert_eq!(p, it);
    let moved = simulate_iteration(&a, &unit_cost(), &c, 5, DeviceId(2), 7, 100.0).unwrap();
    assert_eq!(moved.events.len(), p.events.len());
    assert!(moved
        .events
        .iter()
        .all(|e| e.task.batch == 7 && e.start >= 100.0));
    assert_eq!(moved.makespan(), 100.0 + p.makespan());
}

#[test]
fn full_depth_two_devices_is_serial_traversal() {
    // u1 holds layer 1 and initiates, u2 holds layer 2; all costs and transfers take unit time
    // except backward computes (2).
    let a = LayerAssignment::from_sizes(&ids(2), &[1, 1]).unwrap();
    let c = Cluster::uniform(2, 1.0, 1.0, u64::MAX);
    let log = simulate_pipeline(&a, &unit_cost(), &c, 2, DeviceId(1), 2).unwrap();
    let batch0 = [
        (0.0, 1.0),   // emb
        (1.0, 2.0),   // fw layer 1 on u1
        (2.0, 3.0),   // u1 -> u2
        (3.0, 4.0),   // fw layer 2 on u2
        (4.0, 5.0),   // u2 -> u1
        (5.0, 6.0),   // head
        (6.0, 8.0),   // head update
        (8.0, 9.0),   // u1 -> u2 gradient
        (9.0, 11.0),  // bw layer 2
        (11.0, 12.0), // u2 -> u1 gradient
        (12.0, 14.0), // bw layer 1
    ];
    let mut expected: Vec<(f64, f64)> = batch0.to_vec();
    expected.extend(batch0.iter().map(|(s, e)| (s + 14.0, e + 14.0)));
    let mut got: Vec<(f64, f64)> = log.events.iter().map(|e| (e.start, e.end)).collect();
    got.sort_by(|x, y| x.0.total_cmp(&y.0));
    assert_eq!(got, expected);
    assert_eq!(log.makespan(), 28.0);
}

#[test]
fn frozen_bottom_devices_overlap_batches() {
    let (a, c) = four_device_ring();
    let one = simulate_pipeline(&a, &unit_cost(), &c, 3, DeviceId(1), 1)
        .unwrap()
        .makespan();
    let two = simulate_pipeline(&a, &unit_cost(), &c, 3, DeviceId(1), 2)
        .unwrap()
        .makespan();
    let eight = simulate_pipeline(&a, &unit_cost(), &c, 3, DeviceId(1), 8)
        .unwrap()
        .makespan();
    assert!(two < 2.0 * one, "{two} vs {one}");
    assert!(eight < 8.0 * one, "{eight} vs {one}");
}

#[test]
fn simulator_rejects_bad_inputs() {
    let (a, c) = four_device_ring();
    assert!(simulate_pipeline(&a, &unit_cost(), &c, 3, DeviceId(1), 0).is_err());
    assert!(simulate_pipeline(&a, &unit_cost(), &c, 15, DeviceId(1), 1).is_err());
    assert!(simulate_pipeline(&a, &unit_cost(), &c, 3, DeviceId(9), 1).is_err());
    let mut profiles: Vec<DeviceProfile> = c.profiles().cloned().collect();
    profiles[0].link_rates.clear();
    // a cluster with a missing link is refused up front
    assert!(Cluster::new(profiles).is_err());
}

fn event(
    kind: TaskKind,
    place: Place,
    batch: u64,
    layers: (usize, usize),
    start: f64,
    end: f64,
) -> Event {
    Event {
        start,
        end,
        task: Task {
            kind,
            place,
            batch,
            layer_begin: layers.0,
            layer_end: layers.1,
            duration: end - start,
        },
    }
}

#[test]
fn overlapping_computes_are_flagged() {
    let a = LayerAssignment::single(DeviceId(1), 2).unwrap();
    let c = Cluster::uniform(1, 1.0, 1.0, u64::MAX);
    let mut log = simulate_pipeline(&a, &unit_cost(), &c, 2, DeviceId(1), 1).unwrap();
    assert!(validate_schedule(&log, &a, 2).is_empty());
    log.events.push(event(
        TaskKind::FwCompute,
        Place::Device(DeviceId(1)),
        1,
        (0, 0),
        0.5,
        1.5,
    ));
    let log = EventLog::new(log.events, 1);
    let v = validate_schedule(&log, &a, 2);
    assert!(v.iter().any(|v| v.rule == Rule::R3), "{v:?}");
}

#[test]
fn forwarding_ahead_of_backward_is_flagged() {
    let a = LayerAssignment::single(DeviceId(1), 1).unwrap();
    let d = Place::Device(DeviceId(1));
    let batch = |b: u64, t: f64| {
        vec![
            event(TaskKind::FwCompute, d, b, (0, 0), t, t + 1.0),
            event(TaskKind::FwCompute, d, b, (1, 1), t + 1.0, t + 2.0),
            event(TaskKind::FwCompute, d, b, (2, 2), t + 2.0, t + 3.0),
            event(TaskKind::HeadUpdateCompute, d, b, (2, 2), t + 3.0, t + 4.0),
            event(TaskKind::BwCompute, d, b, (1, 1), t + 4.0, t + 5.0),
        ]
    };
    let ok: Vec<Event> = batch(0, 0.0).into_iter().chain(batch(1, 5.0)).collect();
    assert!(validate_schedule(&EventLog::new(ok, 1), &a, 1).is_empty());

    // batch 1 forwards through the block while batch 0 still awaits its backward
    let mut bad = batch(0, 0.0);
    bad[4] = event(TaskKind::BwCompute, d, 0, (1, 1), 10.0, 11.0);
    bad.extend(batch(1, 4.0));
    let v = validate_schedule(&EventLog::new(bad, 1), &a, 1);
    assert!(v.iter().any(|v| v.rule == Rule::R1), "{v:?}");
    assert!(v.iter().any(|v| v.rule == Rule::Version), "{v:?}");
}

#[test]
fn backward_below_stop_or_on_frozen_device_is_flagged() {
    let (a, c) = four_device_ring();
    let log = simulate_pipeline(&a, &unit_cost(), &c, 3, DeviceId(1), 1).unwrap();
    // the same log checked against a shallower depth reaches below the stop layer
    let v = validate_schedule(&log, &a, 1);
    assert!(v.iter().any(|v| v.rule == Rule::R2), "{v:?}");
    let mut events = log.events.clone();
    let end = log.makespan();
    events.push(event(
        TaskKind::BwCompute,
        Place::Device(DeviceId(2)),
        0,
        (5, 9),
        end,
        end + 1.0,
    ));
    let v = validate_schedule(&EventLog::new(events, 1), &a, 3);
    assert!(v.iter().any(|v| v.rule == Rule::R2), "{v:?}");
}

#[test]
fn backward_before_loss_is_flagged() {
    let a = LayerAssignment::single(DeviceId(1), 1).unwrap();
    let d = Place::Device(DeviceId(1));
    let events = vec![
        event(TaskKind::FwCompute, d, 0, (0, 0), 0.0, 1.0),
        event(TaskKind::FwCompute, d, 0, (1, 1), 1.0, 2.0),
        event(TaskKind::FwCompute, d, 0, (2, 2), 2.0, 3.0),
        event(TaskKind::BwCompute, d, 0, (1, 1), 3.0, 4.0),
        event(TaskKind::HeadUpdateCompute, d, 0, (2, 2), 4.0, 5.0),
    ];
    let v = validate_schedule(&EventLog::new(events, 1), &a, 1);
    assert!(v.iter().any(|v| v.rule == Rule::R5), "{v:?}");
}

#[test]
fn text_export_round_trips() {
    let (a, c) = four_device_ring();
    let log = simulate_pipeline(&a, &CostModel::unit(0.3, 0.7, 3), &c, 6, DeviceId(3), 4).unwrap();
    let text = log.to_text();
    assert!(text.lines().nth(2).unwrap().split_whitespace().count() == 7);
    let back = EventLog::parse(&text).unwrap();
    assert_eq!(back.to_text(), text);
    assert!(validate_schedule(&back, &a, 6).is_empty());
    assert!(text.contains(" u1->u2 "));
}

#[test]
fn malformed_text_reports_line() {
    let err = EventLog::parse("# header\n0 1 fw_compute u1 0 0\n").unwrap_err();
    assert_eq!(
        err,
        SimError::Parse {
            line: 2,
            reason: "expected 7 columns, found 6".into()
        }
    );
    assert!(EventLog::parse("0 1 warp u1 0 0 0\n").is_err());
    assert!(EventLog::parse("0 1 fw_compute x1 0 0 0\n").is_err());
}

#[test]
fn pure_forward_device_holds_only_static_weights() {
    let (a, c) = four_device_ring();
    let sp = spec(14);
    let log = simulate_pipeline(&a, &unit_cost(), &c, 3, DeviceId(1), 4).unwrap();
    let v = ValidatedLog::new(log, &a, 3).unwrap();
    let m = account_memory(&v, &sp, 8, SchemeKind::RingAda);
    // u2 and u3 sit entirely below the stop layer and are not the initiator
    for u in [2, 3] {
        let d = &m.devices[&DeviceId(u)];
        assert_eq!(d.peak_bytes, d.static_bytes);
    }
    assert!(m.devices[&DeviceId(4)].peak_bytes > m.devices[&DeviceId(4)].static_bytes);
}

#[test]
fn single_full_depth_holds_every_layer() {
    let sp = spec(4);
    let a = LayerAssignment::single(DeviceId(1), 4).unwrap();
    let c = Cluster::uniform(1, 1.0, 1.0, u64::MAX);
    let log = simulate_pipeline(&a, &unit_cost(), &c, 4, DeviceId(1), 3).unwrap();
    let m = account_memory(
        &ValidatedLog::new(log, &a, 4).unwrap(),
        &sp,
        8,
        SchemeKind::Single,
    );
    let n = sp.hidden_dim;
    let f = 4 * n;
    let block = 4 * (n * n + n) + (n * f + f) + (f * n + n) + 4 * n;
    let adapter = 2 * n * sp.bottleneck_dim;
    let emb = (sp.vocab_size + sp.seq_len) * n;
    let head = n * sp.num_classes + sp.num_classes;
    let static_bytes = ((4 * (block + adapter) + emb + head) * 4) as u64;
    let boundary = (8 * sp.seq_len * n * 4) as u64;
    let d = &m.devices[&DeviceId(1)];
    assert_eq!(d.static_bytes, static_bytes);
    // four cached block inputs plus the head input, one batch at a time
    assert_eq!(d.peak_bytes, static_bytes + 5 * boundary);
}

#[test]
fn memory_ordering_single_pipeline_ring() {
    let sp = spec(12);
    let a = LayerAssignment::from_sizes(&ids(4), &[3, 3, 3, 3]).unwrap();
    let c = Cluster::uniform(4, 1.0, 1.0, u64::MAX);
    let cost = unit_cost();
    let ring = simulate_pipeline(&a, &cost, &c, 2, DeviceId(1), 8).unwrap();
    let ring = account_memory(
        &ValidatedLog::new(ring, &a, 2).unwrap(),
        &sp,
        8,
        SchemeKind::RingAda,
    );
    let pipe = simulate_pipeline_with(
        &a,
        &cost,
        &c,
        12,
        DeviceId(1),
        8,
        PipelinePolicy::stashed(4),
    )
    .unwrap();
    let pipe = account_memory(
        &ValidatedLog::new(pipe, &a, 12).unwrap(),
        &sp,
        8,
        SchemeKind::PipeAdapter,
    );
    let sa = LayerAssignment::single(DeviceId(1), 12).unwrap();
    let single = simulate_pipeline(&sa, &cost, &c, 12, DeviceId(1), 8).unwrap();
    let single = account_memory(
        &ValidatedLog::new(single, &sa, 12).unwrap(),
        &sp,
        8,
        SchemeKind::Single,
    );
    let s = single.peak(DeviceId(1)).unwrap();
    for u in ids(4) {
        let (r, p) = (ring.peak(u).unwrap(), pipe.peak(u).unwrap());
        assert!(r < p && p < s, "{u}: {r} {p} {s}");
    }
}

#[test]
fn makespan_ordering_on_a_partially_frozen_config() {
    let a = LayerAssignment::from_sizes(&ids(4), &[3, 3, 3, 3]).unwrap();
    let c = Cluster::uniform(4, 1.0, 10.0, u64::MAX);
    let cost = unit_cost();
    let ring = simulate_pipeline(&a, &cost, &c, 3, DeviceId(1), 8)
        .unwrap()
        .makespan();
    let pipe = simulate_pipeline_with(
        &a,
        &cost,
        &c,
        12,
        DeviceId(1),
        8,
        PipelinePolicy::stashed(4),
    )
    .unwrap()
    .makespan();
    let sa = LayerAssignment::single(DeviceId(1), 12).unwrap();
    let single = simulate_pipeline(&sa, &cost, &c, 12, DeviceId(1), 8)
        .unwrap()
        .makespan();
    assert!(ring <= pipe && pipe <= single, "{ring} {pipe} {single}");
    let one = simulate_pipeline(&sa, &cost, &c, 12, DeviceId(1), 1)
        .unwrap()
        .makespan();
    assert_eq!(single, 8.0 * one);
}

#[test]
fn stashed_pipeline_overlaps_and_validates() {
    let a = LayerAssignment::from_sizes(&ids(4), &[3, 3, 3, 3]).unwrap();
    let c = Cluster::uniform(4, 1.0, 10.0, u64::MAX);
    let log = simulate_pipeline_with(
        &a,
        &unit_cost(),
        &c,
        12,
        DeviceId(2),
        8,
        PipelinePolicy::stashed(4),
    )
    .unwrap();
    assert!(validate_schedule(&log, &a, 12).is_empty());
    let strict = simulate_pipeline(&a, &unit_cost(), &c, 12, DeviceId(2), 8).unwrap();
    assert!(log.makespan() < strict.makespan());
    // the strict ring log breaks nothing, but a stashed log fails the strict window
    let mut tight = log.clone();
    tight.window = 1;
    let v = validate_schedule(&tight, &a, 12);
    assert!(v.iter().any(|v| v.rule == Rule::R1));
}

/// Random cluster, assignment, cost model and workload.
#[derive(Debug, Clone)]
struct Scenario {
    assignment: LayerAssignment,
    cluster: Cluster,
    cost: CostModel,
    depth: usize,
    initiator: DeviceId,
    batches: usize,
    window: usize,
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (1u32..=8)
        .prop_flat_map(|u| {
            (
                Just(u),
                prop::collection::vec(1usize..=4, u as usize),
                prop::collection::vec(0.25f64..4.0, u as usize),
                prop::collection::vec(0.5f64..50.0, (u * u) as usize),
                prop::collection::vec(0.05f64..3.0, 8),
                1u64..200,
                1usize..=16,
                any::<prop::sample::Index>(),
                any::<prop::sample::Index>(),
                any::<prop::sample::Index>(),
            )
        })
        .prop_map(
            |(u, sizes, speeds, rates, times, bytes, batches, depth_ix, init_ix, win_ix)| {
                let devices = ids(u);
                let assignment = LayerAssignment::from_sizes(&devices, &sizes).unwrap();
                let l: usize = sizes.iter().sum();
                let profiles = devices
                    .iter()
                    .map(|&d| DeviceProfile {
                        device_id: d,
                        compute_speed: speeds[(d.0 - 1) as usize],
                        memory_budget: u64::MAX,
                        link_rates: devices
                            .iter()
                            .filter(|&&p| p != d)
                            .map(|&p| (p, rates[((d.0 - 1) * u + p.0 - 1) as usize]))
                            .collect(),
                    })
                    .collect();
                let cost = CostModel {
                    fw_time: PhaseTimes {
                        emb: times[0],
                        trm: times[1],
                        trm_with_adapter: times[2],
                        hed: times[3],
                    },
                    bw_time: PhaseTimes {
                        emb: times[4],
                        trm: times[5],
                        trm_with_adapter: times[6],
                        hed: times[7],
                    },
                    activation_msg_bytes: bytes,
                    gradient_msg_bytes: bytes + 1,
                    head_params_bytes: bytes,
                };
                Scenario {
                    assignment,
                    cluster: Cluster::new(profiles).unwrap(),
                    cost,
                    depth: depth_ix.index(l) + 1,
                    initiator: devices[init_ix.index(devices.len())],
                    batches,
                    window: win_ix.index(u as usize) + 1,
                }
            },
        )
}

fn run(s: &Scenario) -> EventLog {
    simulate_pipeline_with(
        &s.assignment,
        &s.cost,
        &s.cluster,
        s.depth,
        s.initiator,
        s.batches,
        PipelinePolicy::stashed(s.window),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn simulated_logs_always_validate(s in scenario()) {
        let log = run(&s);
        let v = validate_schedule(&log, &s.assignment, s.depth);
        prop_assert!(v.is_empty(), "{}", v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n"));
        prop_assert_eq!(run(&s), log);
    }

    #[test]
    fn faster_hardware_never_lengthens_the_schedule(s in scenario(), which in any::<prop::sample::Index>(), factor in 1.0f64..4.0) {
        let before = run(&s).makespan();
        let mut profiles: Vec<DeviceProfile> = s.cluster.profiles().cloned().collect();
        let i = which.index(profiles.len());
        profiles[i].compute_speed *= factor;
        if let Some((_, r)) = profiles[i].link_rates.iter_mut().next() {
            *r *= factor;
        }
        let faster = Scenario { cluster: Cluster::new(profiles).unwrap(), ..s };
        let after = run(&faster).makespan();
        prop_assert!(after <= before * (1.0 + 1e-12), "{after} > {before}");
    }

    #[test]
    fn memory_peak_covers_static_weights(s in scenario()) {
        let log = run(&s);
        let sp = spec(s.assignment.num_layers());
        let v = ValidatedLog::new(log, &s.assignment, s.depth).unwrap();
        for scheme in [SchemeKind::RingAda, SchemeKind::PipeAdapter] {
            let m = account_memory(&v, &sp, 4, scheme);
            for d in m.devices.values() {
                prop_assert!(d.peak_bytes >= d.static_bytes);
            }
        }
    }

    #[test]
    fn backward_moved_to_time_zero_is_caught(s in scenario(), which in any::<prop::sample::Index>()) {
        let log = run(&s);
        let bws: Vec<usize> = log.events.iter().enumerate()
            .filter(|(_, e)| e.task.kind == TaskKind::BwCompute)
            .map(|(i, _)| i)
            .collect();
        prop_assume!(!bws.is_empty());
        let mut events = log.events.clone();
        let e = &mut events[bws[which.index(bws.len())]];
        e.start = 0.0;
        e.end = e.task.duration;
        let broken = EventLog::new(events, log.window);
        prop_assert!(!validate_schedule(&broken, &s.assignment, s.depth).is_empty());
    }
}
