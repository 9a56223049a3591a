use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::domain::{stop_layer, DeviceId, LayerAssignment};

use super::log::{Event, EventLog, Place, TaskKind};

const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    /// Timestamps consistent with durations, log sorted, places match kinds.
    WellFormed,
    /// Gated device forwards at most `window` batches ahead of its backward.
    R1,
    /// Backward stays at or above the stop layer and off pure-forward devices.
    R2,
    /// One compute task per device at a time.
    R3,
    /// One transfer per directed link at a time.
    R4,
    /// Backward of a batch starts only after its loss is computed.
    R5,
    /// Dataflow order inside a batch, including forward before backward.
    Causality,
    /// A batch's backward sees the weight version its forward used (or a
    /// version inside the stash window).
    Version,
    /// Every expected task of a batch is present exactly once.
    Completeness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub rule: Rule,
    pub time: f64,
    pub batch: Option<u64>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at t={}", self.rule, self.time)?;
        if let Some(b) = self.batch {
            write!(f, " batch {b}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// A log that passed [`validate_schedule`] against a given assignment and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedLog {
    log: EventLog,
    assignment: LayerAssignment,
    depth: usize,
}

impl ValidatedLog {
    pub fn new(
        log: EventLog,
        assignment: &LayerAssignment,
        depth: usize,
    ) -> Result<Self, Vec<Violation>> {
        let violations = validate_schedule(&log, assignment, depth);
        if violations.is_empty() {
            Ok(Self {
                log,
                assignment: assignment.clone(),
                depth,
            })
        } else {
            Err(violations)
        }
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn assignment(&self) -> &LayerAssignment {
        &self.assignment
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }
}

fn lt(a: f64, b: f64) -> bool {
    a < b - TIME_TOL * b.abs().max(1.0)
}

/// Per-batch index of the events the rules refer to.
#[derive(Default)]
struct BatchView<'a> {
    emb: Vec<&'a Event>,
    fw: BTreeMap<DeviceId, Vec<&'a Event>>,
    bw: BTreeMap<DeviceId, Vec<&'a Event>>,
    head_fw: Vec<&'a Event>,
    head_update: Vec<&'a Event>,
    fw_transfers: Vec<&'a Event>,
    bw_transfers: Vec<&'a Event>,
}

/// Check every scheduling rule; an empty result means the log is valid.
pub fn validate_schedule(
    log: &EventLog,
    assignment: &LayerAssignment,
    depth: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |rule, time, batch, detail: String| {
        out.push(Violation {
            rule,
            time,
            batch,
            detail,
        })
    };
    let num_layers = assignment.num_layers();
    let head_layer = num_layers + 1;
    if depth == 0 || depth > num_layers {
        flag(
            Rule::WellFormed,
            0.0,
            None,
            format!("depth {depth} outside [1, {num_layers}]"),
        );
        return out;
    }
    let stop = stop_layer(num_layers, depth);
    let window = log.window.max(1);

    // Well-formedness.
    let mut prev_start = f64::NEG_INFINITY;
    for e in &log.events {
        let t = &e.task;
        if !(t.duration > 0.0 && t.duration.is_finite() && e.start.is_finite()) {
            flag(
                Rule::WellFormed,
                e.start,
                Some(t.batch),
                format!("non-positive duration {}", t.duration),
            );
        }
        if (e.end - (e.start + t.duration)).abs() > TIME_TOL * e.end.abs().max(1.0) {
            flag(
                Rule::WellFormed,
                e.start,
                Some(t.batch),
                format!(
                    "end {} != start {} + duration {}",
                    e.end, e.start, t.duration
                ),
            );
        }
        if e.start < prev_start {
            flag(
                Rule::WellFormed,
                e.start,
                Some(t.batch),
                "log not sorted by start time".into(),
            );
        }
        prev_start = prev_start.max(e.start);
        let place_ok = match t.place {
            Place::Device(_) => t.kind.is_compute(),
            Place::Link { src, dst } => !t.kind.is_compute() && src != dst,
        };
        if !place_ok {
            flag(
                Rule::WellFormed,
                e.start,
                Some(t.batch),
                format!("{} placed on {}", t.kind.name(), t.place),
            );
        }
    }

    // R3 and R4: resource exclusivity.
    let mut by_place: BTreeMap<Place, Vec<&Event>> = BTreeMap::new();
    for e in &log.events {
        by_place.entry(e.task.place).or_default().push(e);
    }
    for (place, evs) in &mut by_place {
        evs.sort_by(|a, b| a.start.total_cmp(&b.start));
        for pair in evs.windows(2) {
            if lt(pair[1].start, pair[0].end) {
                let rule = if matches!(place, Place::Device(_)) {
                    Rule::R3
                } else {
                    Rule::R4
                };
                flag(
                    rule,
                    pair[1].start,
                    Some(pair[1].task.batch),
                    format!(
                        "{} overlaps batch {} on {place}",
                        pair[1].task.kind.name(),
                        pair[0].task.batch
                    ),
                );
            }
        }
    }

    // Group by batch.
    let mut batches: BTreeMap<u64, BatchView> = BTreeMap::new();
    for e in &log.events {
        let t = &e.task;
        let v = batches.entry(t.batch).or_default();
        match (t.kind, t.place) {
            (TaskKind::FwCompute, Place::Device(_)) if t.layer_begin == 0 => v.emb.push(e),
            (TaskKind::FwCompute, Place::Device(_)) if t.layer_begin == head_layer => {
                v.head_fw.push(e)
            }
            (TaskKind::FwCompute, Place::Device(d)) => v.fw.entry(d).or_default().push(e),
            (TaskKind::BwCompute, Place::Device(d)) => v.bw.entry(d).or_default().push(e),
            (TaskKind::HeadUpdateCompute, Place::Device(_)) => v.head_update.push(e),
            (TaskKind::FwTransfer, _) => v.fw_transfers.push(e),
            (TaskKind::BwTransfer, _) => v.bw_transfers.push(e),
            _ => {}
        }
    }
    batches.retain(|_, v| {
        !(v.emb.is_empty()
            && v.fw.is_empty()
            && v.bw.is_empty()
            && v.head_fw.is_empty()
            && v.head_update.is_empty())
    });

    let gated: BTreeSet<DeviceId> = assignment
        .spans()
        .iter()
        .filter(|s| s.end >= stop)
        .map(|s| s.device)
        .collect();

    for (&b, v) in &batches {
        let first_time = v.emb.first().map_or(0.0, |e| e.start);
        let single = |evs: &[&'_ Event], what: &str, out: &mut Vec<Violation>| -> bool {
            if evs.len() == 1 {
                true
            } else {
                out.push(Violation {
                    rule: Rule::Completeness,
                    time: first_time,
                    batch: Some(b),
                    detail: format!("expected one {what}, found {}", evs.len()),
                });
                false
            }
        };
        if !single(&v.emb, "embedding forward", &mut out)
            | !single(&v.head_fw, "head forward", &mut out)
            | !single(&v.head_update, "head update", &mut out)
        {
            continue;
        }
        let (emb, head_fw, head_up) = (v.emb[0], v.head_fw[0], v.head_update[0]);
        let initiator = emb.task.place.device();
        for (what, e) in [("head forward", head_fw), ("head update", head_up)] {
            if e.task.place.device() != initiator {
                out.push(Violation {
                    rule: Rule::Completeness,
                    time: e.start,
                    batch: Some(b),
                    detail: format!("{what} on {} but initiator is {initiator}", e.task.place),
                });
            }
        }

        // Forward stages in layer order, backward stages top-down.
        let mut fw_chain: Vec<&Event> = vec![emb];
        let mut bw_chain: Vec<&Event> = vec![head_up];
        let mut complete = true;
        for span in assignment.spans() {
            let fws = v.fw.get(&span.device).map_or(&[][..], |x| &x[..]);
            match fws {
                [e] if e.task.layer_begin == span.begin && e.task.layer_end == span.end => {
                    fw_chain.push(e)
                }
                _ => {
                    complete = false;
                    out.push(Violation {
                        rule: Rule::Completeness,
                        time: first_time,
                        batch: Some(b),
                        detail: format!(
                            "expected one forward of layers {}..={} on {}",
                            span.begin, span.end, span.device
                        ),
                    });
                }
            }
        }
        for (dev, evs) in &v.fw {
            if assignment.span_of(*dev).is_none() {
                complete = false;
                out.push(Violation {
                    rule: Rule::Completeness,
                    time: evs[0].start,
                    batch: Some(b),
                    detail: format!("forward on {dev}, which holds no layers"),
                });
            }
        }
        fw_chain.push(head_fw);
        for (dev, evs) in &v.bw {
            for e in evs {
                if !gated.contains(dev) {
                    out.push(Violation {
                        rule: Rule::R2,
                        time: e.start,
                        batch: Some(b),
                        detail: format!("backward on pure-forward device {dev}"),
                    });
                } else if e.task.layer_begin < stop {
                    out.push(Violation {
                        rule: Rule::R2,
                        time: e.start,
                        batch: Some(b),
                        detail: format!(
                            "backward reaches layer {} below stop layer {stop}",
                            e.task.layer_begin
                        ),
                    });
                }
            }
        }
        for span in assignment
            .spans()
            .iter()
            .rev()
            .filter(|s| gated.contains(&s.device))
        {
            let bws = v.bw.get(&span.device).map_or(&[][..], |x| &x[..]);
            match bws {
                [e] if e.task.layer_begin == span.begin.max(stop)
                    && e.task.layer_end == span.end =>
                {
                    bw_chain.push(e)
                }
                _ => {
                    complete = false;
                    out.push(Violation {
                        rule: Rule::Completeness,
                        time: first_time,
                        batch: Some(b),
                        detail: format!(
                            "expected one backward of layers {}..={} on {}",
                            span.begin.max(stop),
                            span.end,
                            span.device
                        ),
                    });
                }
            }
        }
        if !complete {
            continue;
        }

        // Dataflow between consecutive stages, with a transfer when the device changes.
        let check_chain = |chain: &[&Event],
                           transfers: &[&Event],
                           kind: TaskKind,
                           out: &mut Vec<Violation>| {
            let mut used = vec![false; transfers.len()];
            for pair in chain.windows(2) {
                let (x, y) = (pair[0], pair[1]);
                let (dx, dy) = (x.task.place.device(), y.task.place.device());
                if dx == dy {
                    if lt(y.start, x.end) {
                        out.push(Violation {
                            rule: Rule::Causality,
                            time: y.start,
                            batch: Some(b),
                            detail: format!(
                                "{} on {dy} starts before its input is computed",
                                y.task.kind.name()
                            ),
                        });
                    }
                    continue;
                }
                let link = Place::Link { src: dx, dst: dy };
                let found = transfers.iter().enumerate().position(|(i, t)| {
                    !used[i] && t.task.place == link && !lt(t.start, x.end) && !lt(y.start, t.end)
                });
                match found {
                    Some(i) => used[i] = true,
                    None => out.push(Violation {
                        rule: Rule::Causality,
                        time: y.start,
                        batch: Some(b),
                        detail: format!("no {} on {link} between the two stages", kind.name()),
                    }),
                }
            }
            if let Some(i) = used.iter().position(|u| !u) {
                out.push(Violation {
                    rule: Rule::Causality,
                    time: transfers[i].start,
                    batch: Some(b),
                    detail: format!("stray {} on {}", kind.name(), transfers[i].task.place),
                });
            }
        };
        check_chain(&fw_chain, &v.fw_transfers, TaskKind::FwTransfer, &mut out);
        check_chain(&bw_chain, &v.bw_transfers, TaskKind::BwTransfer, &mut out);

        if lt(head_up.start, head_fw.end) {
            out.push(Violation {
                rule: Rule::Causality,
                time: head_up.start,
                batch: Some(b),
                detail: "head update before head forward".into(),
            });
        }
        for dev in &gated {
            let (fw, bw) = (v.fw[dev][0], v.bw[dev][0]);
            if lt(bw.start, fw.end) {
                out.push(Violation {
                    rule: Rule::Causality,
                    time: bw.start,
                    batch: Some(b),
                    detail: format!("backward on {dev} before its forward finished"),
                });
            }
        }
        for e in v.bw.values().flatten().chain(v.bw_transfers.iter()) {
            if lt(e.start, head_up.end) {
                out.push(Violation {
                    rule: Rule::R5,
                    time: e.start,
                    batch: Some(b),
                    detail: format!(
                        "{} on {} before the loss was computed",
                        e.task.kind.name(),
                        e.task.place
                    ),
                });
            }
        }
    }

    // R1 and version consistency, per gated device and per head replica.
    // Keyed by (device, is head replica); each entry is (batch, forward, backward).
    type Lane<'a> = Vec<(u64, &'a Event, &'a Event)>;
    let mut lanes: BTreeMap<(DeviceId, bool), Lane> = BTreeMap::new();
    for (&b, v) in &batches {
        for dev in &gated {
            if let (Some([fw]), Some([bw])) =
                (v.fw.get(dev).map(|x| &x[..]), v.bw.get(dev).map(|x| &x[..]))
            {
                lanes.entry((*dev, false)).or_default().push((b, fw, bw));
            }
        }
        if let ([fw], [up]) = (&v.head_fw[..], &v.head_update[..]) {
            lanes
                .entry((fw.task.place.device(), true))
                .or_default()
                .push((b, fw, up));
        }
    }
    for ((dev, is_head), lane) in &lanes {
        let what = if *is_head {
            format!("head on {dev}")
        } else {
            dev.to_string()
        };
        for i in window..lane.len() {
            let (b, fw, _) = lane[i];
            let (older, _, older_bw) = lane[i - window];
            if lt(fw.start, older_bw.end) {
                flag_into(
                    &mut out,
                    Rule::R1,
                    fw.start,
                    b,
                    format!("{what} forwards batch {b} before finishing backward of batch {older}"),
                );
            }
        }
        let mut ends: Vec<f64> = lane.iter().map(|(_, _, bw)| bw.end).collect();
        ends.sort_by(f64::total_cmp);
        let updates_before = |t: f64| ends.partition_point(|&e| !lt(t, e));
        for &(b, fw, bw) in lane {
            let seen_at_fw = updates_before(fw.start);
            let seen_at_bw = updates_before(bw.start);
            if seen_at_bw.saturating_sub(seen_at_fw) >= window {
                flag_into(
                    &mut out,
                    Rule::Version,
                    bw.start,
                    b,
                    format!(
                        "{what}: {} updates landed between forward and backward of batch {b} (window {window})",
                        seen_at_bw - seen_at_fw
                    ),
                );
            }
        }
    }
    out
}

fn flag_into(out: &mut Vec<Violation>, rule: Rule, time: f64, batch: u64, detail: String) {
    out.push(Violation {
        rule,
        time,
        batch: Some(batch),
        detail,
    });
}
