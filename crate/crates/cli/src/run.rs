//! Runs the configured schemes and writes their curves and summary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ringada_core::baselines::{run_scheme, SchemeKind};
use ringada_core::trainer::{RunRecord, TrainerError};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Resolved};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scheme {scheme} failed: {source}")]
    Scheme {
        scheme: SchemeKind,
        source: TrainerError,
    },
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
}

/// The per-scheme columns of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeSummary {
    /// Mean over devices of each device's peak bytes.
    pub memory_usage_bytes: f64,
    pub epochs_to_convergence: usize,
    pub convergence_time_s: f64,
    pub accuracy: f64,
}

impl SchemeSummary {
    pub fn from_record(r: &RunRecord) -> Self {
        Self {
            memory_usage_bytes: r.memory.mean_peak(),
            epochs_to_convergence: r.epochs_to_convergence,
            convergence_time_s: r.convergence_time_s,
            accuracy: r.final_accuracy,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Keyed by scheme name.
    pub schemes: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub scheme: SchemeKind,
    pub record: RunRecord,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub summary: Summary,
    pub runs: Vec<SchemeRun>,
}

fn run_one(kind: SchemeKind, resolved: &Resolved) -> Result<SchemeRun, RunError> {
    let params = resolved
        .setup
        .initial_params()
        .map_err(|source| RunError::Scheme {
            scheme: kind,
            source,
        })?;
    let (_, record) =
        run_scheme(kind, params, &resolved.data, &resolved.setup).map_err(|source| {
            RunError::Scheme {
                scheme: kind,
                source,
            }
        })?;
    Ok(SchemeRun {
        scheme: kind,
        record,
    })
}

/// Runs every configured scheme. With `parallel` the schemes run on separate
/// threads; results are identical either way since runs share no state.
pub fn run_schemes(config: &ExperimentConfig, parallel: bool) -> Result<Experiment, RunError> {
    let resolved = config.resolve()?;
    let runs: Vec<SchemeRun> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = config
                .schemes
                .iter()
                .map(|&k| {
                    let resolved = &resolved;
                    s.spawn(move || run_one(k, resolved))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scheme thread panicked"))
                .collect::<Result<_, _>>()
        })?
    } else {
        config
            .schemes
            .iter()
            .map(|&k| run_one(k, &resolved))
            .collect::<Result<_, _>>()?
    };
    let schemes = runs
        .iter()
        .map(|r| {
            let v = serde_json::to_value(SchemeSummary::from_record(&r.record))
                .expect("summary serialises");
            (r.scheme.name().to_string(), v)
        })
        .collect();
    Ok(Experiment {
        summary: Summary {
            seed: config.seed,
            config: config.clone(),
            schemes,
        },
        runs,
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Output {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> RunError + '_ {
    move |e| RunError::Output {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    }
}

fn write_csv(
    path: &Path,
    header: [&str; 3],
    rows: impl Iterator<Item = (f64, f64, f64)>,
) -> Result<(), RunError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for (x, loss, acc) in rows {
        w.write_record([x.to_string(), loss.to_string(), acc.to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Fractional epoch of every iteration: round `r` spans `(r-1, r]`.
pub fn epoch_positions(record: &RunRecord) -> Vec<f64> {
    let mut out = Vec::with_capacity(record.iterations.len());
    let mut i = 0;
    while i < record.iterations.len() {
        let round = record.iterations[i].round;
        let n = record.iterations[i..]
            .iter()
            .take_while(|it| it.round == round)
            .count();
        out.extend((1..=n).map(|k| (round - 1) as f64 + k as f64 / n as f64));
        i += n;
    }
    out
}

/// Writes `summary.json` plus per-scheme curves (and event logs if enabled) under `out`.
pub fn write_outputs(exp: &Experiment, out: &Path) -> Result<(), RunError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    for run in &exp.runs {
        let dir = out.join(run.scheme.name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let its = &run.record.iterations;
        let epochs = epoch_positions(&run.record);
        write_csv(
            &dir.join("loss_vs_epoch.csv"),
            ["epoch", "loss", "accuracy"],
            epochs
                .iter()
                .zip(its)
                .map(|(&e, it)| (e, it.loss, it.accuracy)),
        )?;
        write_csv(
            &dir.join("loss_vs_simtime.csv"),
            ["sim_seconds", "loss", "accuracy"],
            its.iter().map(|it| (it.clock, it.loss, it.accuracy)),
        )?;
        if let Some(events) = &run.record.events {
            let path = dir.join("events.log");
            fs::write(&path, events.to_text()).map_err(io_err(&path))?;
        }
    }
    let path = out.join("summary.json");
    let mut json = serde_json::to_string_pretty(&exp.summary).expect("summary serialises");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))
}

/// Runs the experiment and writes its outputs under `out`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: &Path,
    parallel: bool,
) -> Result<Experiment, RunError> {
    let exp = run_schemes(config, parallel)?;
    write_outputs(&exp, out)?;
    Ok(exp)
}
