use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mltkd::config::RunConfig;
use mltkd::experiment::{
    load_teacher, run_ablation, run_bench, run_distill, run_train_teacher, DEFAULT_LAMBDA_GRID,
};
use mltkd::nn_harness::Mlp;
use mltkd::temperature::PolicyKind;
use mltkd::verify::{render_table, run_all, VerifyOptions};
use mltkd::Error;

const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "mltkd", version, about = "Maximum-logit temperature distillation experiments")]
struct Cli {
    /// Experiment config (TOML). The bundled default is used when omitted.
    #[arg(long, global = true, env = "MLTKD_CONFIG")]
    config: Option<PathBuf>,

    /// Overrides `run.seed` (and the property-suite seed for `verify`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `run.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Static,
    MaxLogit,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher with cross-entropy and save a checkpoint.
    TrainTeacher,
    /// Distill a student and compare it with a cross-entropy-only student.
    Distill {
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Teacher checkpoint; trained from the config when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run the randomized property suite.
    Verify {
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        samples: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// One distillation per λ_KD value.
    Ablate {
        #[arg(long = "lambda-kd", value_delimiter = ',', num_args = 1..)]
        lambda_kd: Option<Vec<f64>>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Time the temperature stage for each policy.
    Bench {
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        repeats: u64,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, cli: &Cli) -> PathBuf {
    // An explicit --out is taken relative to the working directory.
    match &cli.out {
        Some(out) => out.clone(),
        None => cfg.resolve(&cfg.run.out_dir),
    }
}

fn obtain_teacher(
    cfg: &RunConfig,
    dataset: &mltkd::data_pipeline::Dataset,
    teacher: Option<&Path>,
    out: &Path,
) -> anyhow::Result<Mlp<f32>> {
    match teacher {
        Some(path) => Ok(load_teacher(path, dataset)
            .with_context(|| format!("loading teacher {}", path.display()))?),
        None => {
            info!("no --teacher given; training one from the config");
            let run = run_train_teacher(cfg, dataset, out)?;
            info!("teacher saved to {}", run.checkpoint.display());
            Ok(run.outcome.model)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    if let Command::Verify {
        samples,
        inject_fault,
    } = &cli.command
    {
        let opts = VerifyOptions {
            samples: *samples as usize,
            seed: cli.seed.unwrap_or(0),
            inject_fault: *inject_fault,
        };
        let results = run_all(&opts);
        print!("{}", render_table(&results));
        return Ok(if results.iter().all(|r| r.passed()) { 0 } else { EXIT_FAILURE });
    }

    let mut cfg = load_config(cli)?;
    let out = out_dir(&cfg, cli);
    let dataset = cfg.build_dataset()?;
    info!(
        "dataset: {} samples, {} features, {} classes ({} train / {} val)",
        dataset.len(),
        dataset.dims(),
        dataset.n_classes(),
        dataset.train_indices().len(),
        dataset.val_indices().len()
    );

    match &cli.command {
        Command::TrainTeacher => {
            let run = run_train_teacher(&cfg, &dataset, &out)?;
            let last = run.outcome.metrics.last();
            println!("checkpoint: {}", run.checkpoint.display());
            println!("metrics: {}", run.metrics_csv.display());
            println!("final val_top1: {:.4}", last.map_or(0.0, |m| m.val_top1));
        }
        Command::Distill { policy, teacher } => {
            if let Some(p) = policy {
                cfg.temperature.kind = match p {
                    PolicyArg::Static => PolicyKind::Static,
                    PolicyArg::MaxLogit => PolicyKind::MaxLogit,
                };
            }
            let t = obtain_teacher(&cfg, &dataset, teacher.as_deref(), &out)?;
            let run = run_distill(&cfg, &dataset, &t, &out)?;
            let kd = run.kd.metrics.last().map_or(0.0, |m| m.val_top1);
            let ce = run.baseline.metrics.last().map_or(0.0, |m| m.val_top1);
            println!("metrics: {}", run.metrics_csv.display());
            println!("baseline metrics: {}", run.baseline_csv.display());
            println!("report: {}", run.report.display());
            println!("final val_top1: distilled {kd:.4}, CE-only {ce:.4}");
        }
        Command::Ablate { lambda_kd, teacher } => {
            let lambdas = lambda_kd.clone().unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
            let t = obtain_teacher(&cfg, &dataset, teacher.as_deref(), &out)?;
            let (rows, path) = run_ablation(&cfg, &dataset, &t, &lambdas, &out)?;
            println!("{:>8}  {:>10}", "lambda_kd", "val_top1");
            for r in &rows {
                println!("{:>8}  {:>10.4}", r.lambda_kd, r.final_val_top1);
            }
            println!("table: {}", path.display());
        }
        Command::Bench { repeats, teacher } => {
            let t = obtain_teacher(&cfg, &dataset, teacher.as_deref(), &out)?;
            let (_, path) = run_bench(&cfg, &dataset, &t, *repeats as usize, &out)?;
            print!("{}", std::fs::read_to_string(&path)?);
            println!("report: {}", path.display());
        }
        Command::Verify { .. } => unreachable!("handled above"),
    }
    Ok(0)
}

/// Configuration and compatibility problems are usage errors; everything else
/// is a runtime failure.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::IncompatibleCheckpoint(_)
            | Error::InvalidSpec(_)
            | Error::InvalidOptimizer(_)
            | Error::InvalidPolicy(_)
            | Error::InvalidWeights(_)
            | Error::InvalidParams(_),
        ) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MLTKD_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
