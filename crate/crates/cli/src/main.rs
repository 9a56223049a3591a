use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ringada_cli::config::{ConfigError, ExperimentConfig};
use ringada_cli::run::{run_experiment, RunError};
use ringada_cli::self_check;
use ringada_core::baselines::SchemeKind;
use ringada_core::domain::{DeviceId, LayerAssignment};
use ringada_core::sim::{simulate_pipeline_with, static_weight_bytes, PipelinePolicy};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "ringada",
    version,
    about = "Ring-pipelined adapter fine-tuning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Only run these schemes (repeatable).
    #[arg(long = "scheme", value_name = "NAME")]
    schemes: Vec<SchemeKind>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured scheme and write curves and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory; falls back to the config's `output_dir`.
        #[arg(long, env = "RINGADA_OUT", value_name = "DIR")]
        out: Option<PathBuf>,
        /// Run schemes on separate threads.
        #[arg(long)]
        parallel: bool,
        /// Also write each scheme's event log.
        #[arg(long)]
        event_log: bool,
    },
    /// Print the layer assignment and each device's static weight footprint.
    Plan {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Run the gradient, early-stop, schedule and equivalence self-checks.
    Check {
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
    },
    /// Simulate one pipeline on the configured cluster and print its event log.
    DumpLog {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Scheme whose pipeline policy and placement to use.
        #[arg(long, default_value = "RingAda")]
        scheme: SchemeKind,
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 1)]
        batches: usize,
        /// Defaults to the lowest device id.
        #[arg(long)]
        initiator: Option<u32>,
    },
}

fn load(
    path: &Path,
    seed: Option<u64>,
    schemes: &[SchemeKind],
) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if !schemes.is_empty() {
        cfg.schemes.retain(|k| schemes.contains(k));
        if cfg.schemes.is_empty() {
            return Err(ConfigError::Invalid(
                "--scheme filter leaves no configured scheme".into(),
            ));
        }
    }
    Ok(cfg)
}

fn config_failure(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("config error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn cmd_run(common: Common, out: Option<PathBuf>, parallel: bool, event_log: bool) -> ExitCode {
    let mut cfg = match load(&common.config, common.seed, &common.schemes) {
        Ok(c) => c,
        Err(e) => return config_failure(e),
    };
    cfg.event_log |= event_log;
    let Some(out) = out.or_else(|| cfg.output_dir.clone()) else {
        return config_failure("no output directory: pass --out, set RINGADA_OUT or output_dir");
    };
    match run_experiment(&cfg, &out, parallel) {
        Ok(exp) => {
            for run in &exp.runs {
                let r = &run.record;
                println!(
                    "{:<12} rounds {:>4}  converged {:<5}  time {:>12.2} s  accuracy {:.4}  mean peak {:.0} B",
                    run.scheme.name(),
                    r.epochs_to_convergence,
                    r.converged,
                    r.convergence_time_s,
                    r.final_accuracy,
                    r.memory.mean_peak()
                );
            }
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(RunError::Config(e)) => config_failure(e),
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(EXIT_RUN)
        }
    }
}

fn cmd_plan(config: PathBuf) -> ExitCode {
    let result = ExperimentConfig::load(&config).and_then(|cfg| {
        let cluster = cfg.cluster()?;
        let assignment = cfg.layer_assignment(&cluster)?;
        Ok((cfg, cluster, assignment))
    });
    let (cfg, cluster, assignment) = match result {
        Ok(v) => v,
        Err(e) => return config_failure(e),
    };
    let spec = cfg.spec();
    println!("device  speed  layers      static bytes  budget");
    for (span, p) in assignment.spans().iter().zip(cluster.profiles()) {
        println!(
            "{:<7} {:<6} {:>2}..={:<6} {:>12}  {}",
            span.device.to_string(),
            p.compute_speed,
            span.begin,
            span.end,
            static_weight_bytes(&spec, span.len()),
            p.memory_budget
        );
    }
    ExitCode::SUCCESS
}

fn cmd_check(seed: u64) -> ExitCode {
    let report = self_check(seed);
    print!("{report}");
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}

fn cmd_dump_log(
    config: PathBuf,
    scheme: SchemeKind,
    depth: usize,
    batches: usize,
    initiator: Option<u32>,
) -> ExitCode {
    let result = ExperimentConfig::load(&config).and_then(|cfg| {
        let cluster = cfg.cluster()?;
        let assignment = cfg.layer_assignment(&cluster)?;
        Ok((cfg, cluster, assignment))
    });
    let (cfg, cluster, assignment) = match result {
        Ok(v) => v,
        Err(e) => return config_failure(e),
    };
    let initiator = initiator.map_or_else(|| cluster.ids()[0], DeviceId);
    let (assignment, policy) = match scheme {
        SchemeKind::RingAda => (assignment, PipelinePolicy::ring()),
        SchemeKind::PipeAdapter => {
            let stages = assignment.spans().len();
            (assignment, PipelinePolicy::stashed(stages))
        }
        SchemeKind::Single => {
            let dev = cfg.training.single_device.map_or(initiator, DeviceId);
            match LayerAssignment::single(dev, cfg.model.num_layers) {
                Ok(a) => (a, PipelinePolicy::ring()),
                Err(e) => return config_failure(e),
            }
        }
    };
    match simulate_pipeline_with(
        &assignment,
        &cfg.cost_model(),
        &cluster,
        depth,
        initiator,
        batches,
        policy,
    ) {
        Ok(log) => {
            print!("{}", log.to_text());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("simulation failed: {e}");
            ExitCode::from(EXIT_RUN)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            common,
            out,
            parallel,
            event_log,
        } => cmd_run(common, out, parallel, event_log),
        Command::Plan { config } => cmd_plan(config),
        Command::Check { seed } => cmd_check(seed),
        Command::DumpLog {
            config,
            scheme,
            depth,
            batches,
            initiator,
        } => cmd_dump_log(config, scheme, depth, batches, initiator),
    }
}
