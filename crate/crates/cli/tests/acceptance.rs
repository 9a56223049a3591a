//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ringada_cli::check::{early_stop_max_gap, equivalence_gap, fuzz_violations, gradient_check};
use ringada_core::domain::{stop_layer, Cluster, CostModel, DeviceId, LayerAssignment};
use ringada_core::sim::simulate_pipeline;

const SEED: u64 = 2024;
const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/reference.toml");
const SCHEMES: [&str; 3] = ["RingAda", "PipeAdapter", "Single"];

/// Fraction of training at which the early-loss comparison is made.
const EARLY_QUANTILE: f64 = 0.1;
/// Fraction of final rounds averaged into the end-of-training loss.
const FINAL_FRACTION: f64 = 0.05;
const FINAL_GAP: f64 = 0.05;
const ACCURACY_GAP: f64 = 0.05;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let o = gradient_check(SEED);
    let el = t.elapsed();
    outcome(
        o.passed && within(el, 30),
        format!("{} in {:.1?}", o.detail, el),
    )
}

fn early_stop_oracle() -> Outcome {
    let t = Instant::now();
    let r = early_stop_max_gap(SEED, 64);
    let el = t.elapsed();
    match r {
        Ok(gap) => outcome(
            gap <= 1e-12 && within(el, 60),
            format!("64 pairs, max gap {gap:.3e} in {el:.1?}"),
        ),
        Err(e) => outcome(false, e),
    }
}

fn protocol_equivalence() -> Outcome {
    match equivalence_gap(SEED, 200) {
        Ok((n, gap)) => outcome(
            n >= 200 && gap <= 1e-12,
            format!("{n} iterations, max loss gap {gap:.3e}"),
        ),
        Err(e) => outcome(false, e),
    }
}

fn worked_example() -> Outcome {
    let ids: Vec<DeviceId> = (1..=4).map(DeviceId).collect();
    let a = LayerAssignment::from_sizes(&ids, &[4, 5, 2, 3]).unwrap();
    let c = Cluster::uniform(4, 1.0, 1.0, u64::MAX);
    let log = simulate_pipeline(&a, &CostModel::unit(1.0, 2.0, 1), &c, 3, ids[0], 1).unwrap();
    let fw = log.forward_path(0);
    let bw = log.backward_path(0);
    let term = a.terminator(3).unwrap();
    let stop = stop_layer(14, 3);
    let ok = fw == [ids[0], ids[1], ids[2], ids[3], ids[0]]
        && bw == [ids[0], ids[3]]
        && term == ids[3]
        && stop == 12;
    let path = |p: &[DeviceId]| {
        p.iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("->")
    };
    outcome(
        ok,
        format!(
            "forward {}, backward {}, terminator {term}, stop layer {stop}",
            path(&fw),
            path(&bw)
        ),
    )
}

fn schedule_fuzz() -> Outcome {
    let t = Instant::now();
    let r = fuzz_violations(SEED, 250);
    let el = t.elapsed();
    match r {
        Ok(n) => outcome(
            n == 0 && within(el, 120),
            format!("250 configs, {n} violations in {el:.1?}"),
        ),
        Err(e) => outcome(false, e),
    }
}

fn pipelining_benefit() -> Outcome {
    let ids: Vec<DeviceId> = (1..=4).map(DeviceId).collect();
    let a = LayerAssignment::from_sizes(&ids, &[4, 5, 2, 3]).unwrap();
    let c = Cluster::uniform(4, 1.0, 1.0, u64::MAX);
    let cost = CostModel::unit(1.0, 1.0, 1);
    let one = simulate_pipeline(&a, &cost, &c, 3, ids[0], 1)
        .unwrap()
        .makespan();
    let eight = simulate_pipeline(&a, &cost, &c, 3, ids[0], 8)
        .unwrap()
        .makespan();
    outcome(
        eight < 8.0 * one,
        format!("8 batches {eight} s vs 8 x {one} s = {} s", 8.0 * one),
    )
}

fn run_reference(out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_ringada"))
        .args(["run", "--config", REFERENCE, "--event-log", "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{}: {}",
            status.status,
            String::from_utf8_lossy(&status.stderr)
        ))
    }
}

struct Scheme {
    time: f64,
    memory: f64,
    accuracy: f64,
    /// Mean training loss of each round.
    round_loss: Vec<f64>,
}

fn load_scheme(out: &Path, summary: &serde_json::Value, name: &str) -> Scheme {
    let s = &summary["schemes"][name];
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut r = csv::Reader::from_path(out.join(name).join("loss_vs_epoch.csv")).unwrap();
    for row in r.records() {
        let row = row.unwrap();
        let epoch: f64 = row[0].parse().unwrap();
        let loss: f64 = row[1].parse().unwrap();
        let e = sums.entry((epoch - 1e-9).ceil() as usize).or_default();
        e.0 += loss;
        e.1 += 1;
    }
    Scheme {
        time: s["convergence_time_s"].as_f64().unwrap(),
        memory: s["memory_usage_bytes"].as_f64().unwrap(),
        accuracy: s["accuracy"].as_f64().unwrap(),
        round_loss: sums.values().map(|(s, n)| s / *n as f64).collect(),
    }
}

fn load_all(out: &Path) -> BTreeMap<&'static str, Scheme> {
    let text = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&text).unwrap();
    SCHEMES
        .iter()
        .map(|&n| (n, load_scheme(out, &summary, n)))
        .collect()
}

fn table_orderings(r: &BTreeMap<&str, Scheme>) -> Outcome {
    let (ring, pipe, single) = (&r["RingAda"], &r["PipeAdapter"], &r["Single"]);
    let time_ok = single.time > pipe.time && pipe.time > ring.time;
    let mem_ok = single.memory > pipe.memory && pipe.memory > ring.memory;
    outcome(
        time_ok && mem_ok,
        format!(
            "time {:.1} > {:.1} > {:.1} s, memory {:.0} > {:.0} > {:.0} B",
            single.time, pipe.time, ring.time, single.memory, pipe.memory, ring.memory
        ),
    )
}

fn curve_shape(r: &BTreeMap<&str, Scheme>) -> Outcome {
    let rounds = r["RingAda"].round_loss.len();
    let early = ((EARLY_QUANTILE * rounds as f64).ceil() as usize).max(1) - 1;
    let tail = ((FINAL_FRACTION * rounds as f64).ceil() as usize).max(1);
    let final_loss = |s: &Scheme| {
        s.round_loss[s.round_loss.len() - tail..]
            .iter()
            .sum::<f64>()
            / tail as f64
    };
    let ring = &r["RingAda"];
    let slower_start = ["PipeAdapter", "Single"]
        .iter()
        .all(|b| ring.round_loss[early] >= r[b].round_loss[early]);
    let gap = ["PipeAdapter", "Single"]
        .iter()
        .map(|b| (final_loss(ring) - final_loss(&r[b])).abs())
        .fold(0.0, f64::max);
    outcome(
        slower_start && gap <= FINAL_GAP,
        format!(
            "round {} loss {:.4} vs {:.4}/{:.4}; final-loss gap {gap:.4} (limit {FINAL_GAP})",
            early + 1,
            ring.round_loss[early],
            r["PipeAdapter"].round_loss[early],
            r["Single"].round_loss[early]
        ),
    )
}

fn accuracy_parity(r: &BTreeMap<&str, Scheme>) -> Outcome {
    let accs: Vec<f64> = SCHEMES.iter().map(|n| r[n].accuracy).collect();
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max)
        - accs.iter().cloned().fold(f64::MAX, f64::min);
    outcome(
        spread <= ACCURACY_GAP,
        format!("accuracies {accs:?}, spread {spread:.4}"),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let fa = files_under(a);
    let rel = |root: &Path, fs: &[PathBuf]| {
        fs.iter()
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect::<Vec<_>>()
    };
    if rel(a, &fa) != rel(b, &files_under(b)) {
        return outcome(false, "runs wrote different file sets".into());
    }
    let logs = fa.iter().filter(|p| p.ends_with("events.log")).count();
    for p in &fa {
        let q = b.join(p.strip_prefix(a).unwrap());
        if std::fs::read(p).unwrap() != std::fs::read(&q).unwrap() {
            return outcome(false, format!("{} differs", q.display()));
        }
    }
    outcome(
        logs == SCHEMES.len(),
        format!("{} files identical, including {logs} event logs", fa.len()),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "early-stop oracle", early_stop_oracle()),
        (3, "protocol equivalence", protocol_equivalence()),
        (4, "worked example paths", worked_example()),
        (5, "schedule validity fuzz", schedule_fuzz()),
    ];

    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let run_a = run_reference(&a);
    let run_b = run_a.clone().and_then(|_| run_reference(&b));
    match &run_a {
        Ok(()) => {
            let r = load_all(&a);
            results.push((6, "time and memory orderings", table_orderings(&r)));
            results.push((7, "loss curve shape", curve_shape(&r)));
            results.push((8, "accuracy parity", accuracy_parity(&r)));
        }
        Err(e) => {
            for (id, name) in [
                (6, "time and memory orderings"),
                (7, "loss curve shape"),
                (8, "accuracy parity"),
            ] {
                results.push((
                    id,
                    name,
                    outcome(false, format!("reference run failed: {e}")),
                ));
            }
        }
    }
    results.push((9, "pipelining benefit", pipelining_benefit()));
    results.push((
        10,
        "determinism",
        match run_b {
            Ok(()) => determinism(&a, &b),
            Err(e) => outcome(false, format!("reference run failed: {e}")),
        },
    ));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, o) in &results {
        let status = if o.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed);
        println!("criterion {id:>2} {status} {name}: {}", o.detail);
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
