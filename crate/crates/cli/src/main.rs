//! `driftwm`: runs the pipeline stages from a TOML config.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 when a
//! stage fails at run time.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftwm_core::io::{read_report, RunConfig};
use driftwm_core::metrics::DriftReport;
use driftwm_core::pipeline::{describe, ModelRef, Pipeline};
use driftwm_core::Error;

#[derive(Parser)]
#[command(name = "driftwm", version, about = "Train and evaluate a toy autoregressive driving world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Load checkpoints written under a different model configuration.
    #[arg(long)]
    allow_config_mismatch: bool,
}

#[derive(Args)]
struct Sampling {
    /// gt, base, srr, student, or a checkpoint path.
    #[arg(long, default_value = "srr")]
    model: String,
    /// Override the sampler step count.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and eval datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the base model from scratch.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune the base model on its own rollouts.
    TrainSrr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Distill the configured teacher into a few-step student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write open-loop rollouts of a model as a dataset file.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Drive scenes with the pure-pursuit controller.
    ClosedLoop {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Write the drift report of a model on the eval set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Score each chunk on its own frames instead of cumulatively.
        #[arg(long)]
        per_chunk: bool,
    },
    /// Summarize drift reports; reads every eval_*.csv in the output
    /// directory when no files are given.
    Report {
        #[command(flatten)]
        common: Common,
        files: Vec<PathBuf>,
    },
    /// Run every stage up to the configured one.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn pipeline(config: RunConfig, common: &Common) -> Result<Pipeline, Failure> {
    let (mut p, warnings) = Pipeline::new(config)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    p.allow_config_mismatch = common.allow_config_mismatch;
    Ok(p)
}

fn sampling_config(common: &Common, sampling: &Sampling) -> Result<(RunConfig, ModelRef), Failure> {
    let mut config = load_config(common)?;
    let model = ModelRef::parse(&sampling.model);
    if let Some(steps) = sampling.steps {
        match model {
            ModelRef::Student => config.trd.student_steps = steps,
            _ => config.eval.sampler_steps = steps,
        }
    }
    Ok((config, model))
}

fn print_report_line(name: &str, r: &DriftReport) {
    let last = r.rows.last().expect("reports are nonempty");
    println!(
        "{name:<16} {:>6} {:>12.6} {:>12.6} {:>10.4} {:>12.4}",
        r.rows.len(),
        last.lfd,
        r.lfd_slope(),
        last.are_deg,
        last.dtw
    );
}

fn report(dir: &Path, files: &[PathBuf]) -> Result<(), Failure> {
    let files = if files.is_empty() {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("eval_") && name.ends_with(".csv")
            })
            .collect();
        found.sort();
        found
    } else {
        files.to_vec()
    };
    if files.is_empty() {
        return Err(Failure::Usage(format!("no eval_*.csv reports in {}", dir.display())));
    }
    println!("{:<16} {:>6} {:>12} {:>12} {:>10} {:>12}", "report", "chunks", "final_lfd", "lfd_slope", "are_deg", "dtw");
    for f in &files {
        let r = read_report(f)?;
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("?");
        print_report_line(name.strip_prefix("eval_").unwrap_or(name), &r);
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { common } => {
            let p = pipeline(load_config(&common)?, &common)?;
            let (train, eval) = p.generate_data()?;
            println!("wrote {} train clips to {}", train.len(), p.train_data_path().display());
            println!("wrote {} eval clips to {}", eval.len(), p.eval_data_path().display());
        }
        Command::TrainBase { common, steps } => {
            let mut config = load_config(&common)?;
            if let Some(s) = steps {
                config.base.steps = s;
            }
            println!("{}", describe(&pipeline(config, &common)?.train_base()?));
        }
        Command::TrainSrr { common, steps } => {
            let mut config = load_config(&common)?;
            if let Some(s) = steps {
                config.srr.steps = s;
            }
            println!("{}", describe(&pipeline(config, &common)?.train_srr()?));
        }
        Command::Distill { common, steps } => {
            let mut config = load_config(&common)?;
            if let Some(s) = steps {
                config.trd.steps = s;
            }
            println!("{}", describe(&pipeline(config, &common)?.distill()?));
        }
        Command::Rollout { common, sampling } => {
            let (config, model) = sampling_config(&common, &sampling)?;
            let out = pipeline(config, &common)?.rollout(&model)?;
            println!("wrote {}", out.display());
        }
        Command::ClosedLoop { common, sampling } => {
            let (config, model) = sampling_config(&common, &sampling)?;
            let (runs, out) = pipeline(config, &common)?.closed_loop(&model)?;
            let mut failed = None;
            for (i, run) in runs.iter().enumerate() {
                match run {
                    Ok(r) => println!("scene {i}: {} chunks", r.trajectory.chunks.len()),
                    Err(e) => {
                        println!("scene {i}: failed: {e}");
                        failed.get_or_insert(i);
                    }
                }
            }
            println!("wrote {}", out.display());
            if let Some(i) = failed {
                return Err(Failure::Core(Error::Degenerate(format!("closed-loop scene {i} did not complete"))));
            }
        }
        Command::Eval { common, sampling, per_chunk } => {
            let (mut config, model) = sampling_config(&common, &sampling)?;
            if per_chunk {
                config.eval.cumulative = false;
            }
            let (r, out) = pipeline(config, &common)?.evaluate(&model)?;
            print_report_line(&model.label(), &r);
            println!("wrote {}", out.display());
        }
        Command::Report { common, files } => {
            let config = load_config(&common)?;
            report(&config.out_dir, &files)?;
        }
        Command::Run { common } => {
            for line in pipeline(load_config(&common)?, &common)?.run()? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
