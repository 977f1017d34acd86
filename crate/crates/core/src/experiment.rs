//! Experiment drivers behind the command-line subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data_pipeline::Dataset;
use crate::error::{Error, Result};
use crate::kd_losses::LossWeights;
use crate::nn_harness::checkpoint::{load_logits, save_logits, CachedLogits};
use crate::nn_harness::train::predict;
use crate::nn_harness::{
    distill, distill_cached, load_model, save_model, train_teacher, DistillSettings, EpochMetrics,
    Mlp, TeacherCache, TrainOutcome,
};
use crate::temperature::{PolicyKind, TemperaturePolicy};

pub const METRICS_HEADER: [&str; 10] = [
    "epoch",
    "total",
    "ce",
    "kd",
    "mean_tau",
    "mean_correlation",
    "val_top1",
    "epoch_wall_ms",
    "temp_compute_ms",
    "skipped_samples",
];

/// λ_KD values swept by default.
pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [0.9, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0];

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.train_total.to_string(),
            m.train_ce.to_string(),
            m.train_kd.to_string(),
            m.mean_tau.to_string(),
            m.mean_correlation.to_string(),
            m.val_top1.to_string(),
            format!("{:.3}", m.epoch_wall_ms),
            format!("{:.3}", m.temp_compute_ms),
            m.skipped_samples.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub struct TeacherRun {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

pub fn run_train_teacher(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<TeacherRun> {
    ensure_dir(out_dir)?;
    let spec = cfg.teacher_spec(dataset);
    let outcome = train_teacher(dataset, &spec, &cfg.optimizer, cfg.teacher.epochs, cfg.run.seed)?;
    let checkpoint = out_dir.join("teacher.ckpt");
    let metrics_csv = out_dir.join("teacher_metrics.csv");
    save_model(&outcome.model, &checkpoint)?;
    write_metrics_csv(&metrics_csv, &outcome.metrics)?;
    Ok(TeacherRun {
        outcome,
        checkpoint,
        metrics_csv,
    })
}

/// Loads a teacher and checks it against the dataset's shape.
pub fn load_teacher(path: &Path, dataset: &Dataset) -> Result<Mlp<f32>> {
    let model = load_model(path)?;
    check_teacher(&model, dataset)?;
    Ok(model)
}

pub fn check_teacher(model: &Mlp<f32>, dataset: &Dataset) -> Result<()> {
    let spec = model.spec();
    if spec.outputs() != dataset.n_classes() || spec.inputs() != dataset.dims() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "teacher maps {} inputs to {} classes, dataset has {} features and {} classes",
            spec.inputs(),
            spec.outputs(),
            dataset.dims(),
            dataset.n_classes()
        )));
    }
    Ok(())
}

/// Distillation from `teacher` with the configured settings. With
/// `precompute_teacher` the teacher logits go through a cache file in
/// `out_dir`.
pub fn distill_with_config(
    cfg: &RunConfig,
    dataset: &Dataset,
    teacher: &Mlp<f32>,
    settings: &DistillSettings,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    check_teacher(teacher, dataset)?;
    let student = cfg.student_spec(dataset);
    if !settings.precompute_teacher {
        return distill(dataset, teacher, &student, &cfg.optimizer, settings);
    }
    ensure_dir(out_dir)?;
    let path = out_dir.join("teacher_logits.bin");
    let all: Vec<usize> = (0..dataset.len()).collect();
    save_logits(
        &CachedLogits {
            classes: dataset.n_classes(),
            teacher_checksum: teacher.checksum(),
            rows: predict(teacher, dataset, &all)?,
        },
        &path,
    )?;
    let stored = load_logits(&path)?;
    if stored.teacher_checksum != teacher.checksum() || stored.rows.len() != dataset.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} does not belong to this teacher and dataset",
            path.display()
        )));
    }
    let cache = TeacherCache::from_logits(stored.teacher_checksum, stored.rows, &settings.policy)?;
    distill_cached(dataset, &cache, &student, &cfg.optimizer, settings)
}

pub struct DistillRun {
    pub kd: TrainOutcome,
    pub baseline: TrainOutcome,
    pub metrics_csv: PathBuf,
    pub baseline_csv: PathBuf,
    pub report: PathBuf,
}

/// Distills the student and trains a cross-entropy-only student with the same
/// seeds for comparison.
pub fn run_distill(
    cfg: &RunConfig,
    dataset: &Dataset,
    teacher: &Mlp<f32>,
    out_dir: &Path,
) -> Result<DistillRun> {
    ensure_dir(out_dir)?;
    let settings = cfg.distill_settings()?;
    let kd = distill_with_config(cfg, dataset, teacher, &settings, out_dir)?;
    let baseline = train_teacher(
        dataset,
        &cfg.student_spec(dataset),
        &cfg.optimizer,
        cfg.run.epochs,
        cfg.run.seed,
    )?;
    let metrics_csv = out_dir.join("distill_metrics.csv");
    let baseline_csv = out_dir.join("baseline_metrics.csv");
    let report = out_dir.join("report.md");
    write_metrics_csv(&metrics_csv, &kd.metrics)?;
    write_metrics_csv(&baseline_csv, &baseline.metrics)?;
    fs::write(&report, distill_report(cfg, teacher, &kd, &baseline)?)?;
    Ok(DistillRun {
        kd,
        baseline,
        metrics_csv,
        baseline_csv,
        report,
    })
}

fn policy_label(p: &TemperaturePolicy) -> String {
    match p.kind {
        PolicyKind::Static => format!("static (τ = {})", p.static_tau),
        PolicyKind::MaxLogit => format!(
            "max_logit (a = {}, floor = {}{})",
            p.order_a,
            p.floor,
            if p.strict_abs_max { ", |z| peaks" } else { "" }
        ),
    }
}

pub fn distill_report(
    cfg: &RunConfig,
    teacher: &Mlp<f32>,
    kd: &TrainOutcome,
    baseline: &TrainOutcome,
) -> Result<String> {
    let w = cfg.weights()?;
    let mut s = String::new();
    let _ = writeln!(s, "# Distillation report\n");
    let _ = writeln!(s, "- policy: {}", policy_label(&cfg.temperature));
    let _ = writeln!(s, "- loss weights: λ_CE = {}, λ_KD = {}", w.lambda_ce, w.lambda_kd);
    let _ = writeln!(s, "- epochs: {}, seed: {}", cfg.run.epochs, cfg.run.seed);
    let _ = writeln!(s, "- teacher checksum: {:016x}\n", teacher.checksum());
    let _ = writeln!(s, "| student | final val_top1 | best val_top1 | final train CE |");
    let _ = writeln!(s, "|---|---|---|---|");
    for (name, o) in [("distilled", kd), ("CE-only baseline", baseline)] {
        let last = o.metrics.last();
        let best = o.metrics.iter().map(|m| m.val_top1).fold(0.0, f64::max);
        let _ = writeln!(
            s,
            "| {name} | {:.4} | {best:.4} | {:.4} |",
            last.map_or(0.0, |m| m.val_top1),
            last.map_or(0.0, |m| m.train_ce)
        );
    }
    if let (Some(first), Some(last)) = (kd.metrics.first(), kd.metrics.last()) {
        let mean_tau = kd.metrics.iter().map(|m| m.mean_tau).sum::<f64>() / kd.metrics.len() as f64;
        let lo = kd.metrics.iter().map(|m| m.min_tau).fold(f64::INFINITY, f64::min);
        let hi = kd.metrics.iter().map(|m| m.max_tau).fold(f64::NEG_INFINITY, f64::max);
        let skipped: usize = kd.metrics.iter().map(|m| m.skipped_samples).sum();
        let _ = writeln!(s, "\n## Temperature\n");
        let _ = writeln!(s, "- mean τ over all epochs: {mean_tau:.4}");
        let _ = writeln!(s, "- per-sample τ range: [{lo:.4}, {hi:.4}]");
        let _ = writeln!(s, "- common static values for comparison: 2, 4");
        let _ = writeln!(s, "- skipped degenerate samples: {skipped}");
        let _ = writeln!(s, "\n## Alignment\n");
        let _ = writeln!(
            s,
            "- mean correlation: epoch 1 = {:.4}, final epoch = {:.4} (change {:+.4})",
            first.mean_correlation,
            last.mean_correlation,
            last.mean_correlation - first.mean_correlation
        );
        let temp: f64 = kd.metrics.iter().map(|m| m.temp_compute_ms).sum();
        let wall: f64 = kd.metrics.iter().map(|m| m.epoch_wall_ms).sum();
        let _ = writeln!(s, "\n## Timing\n");
        let _ = writeln!(
            s,
            "- temperature stage: {temp:.1} ms of {wall:.1} ms ({:.2}%)",
            100.0 * temp / wall.max(f64::MIN_POSITIVE)
        );
    }
    Ok(s)
}

/// Sorted-order-preserving removal of repeated λ values.
pub fn dedup_lambdas(values: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        if out.contains(&v) {
            log::warn!("duplicate λ_KD value {v} ignored");
        } else {
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub lambda_kd: f64,
    pub final_val_top1: f64,
    pub best_val_top1: f64,
    pub final_mean_tau: f64,
    pub final_mean_correlation: f64,
}

/// One distillation per λ_KD, all with the configured seeds. Writes
/// `ablation.csv`.
pub fn run_ablation(
    cfg: &RunConfig,
    dataset: &Dataset,
    teacher: &Mlp<f32>,
    lambdas: &[f64],
    out_dir: &Path,
) -> Result<(Vec<AblationRow>, PathBuf)> {
    if lambdas.is_empty() {
        return Err(Error::InvalidWeights("empty λ_KD list".into()));
    }
    ensure_dir(out_dir)?;
    let base = cfg.distill_settings()?;
    let mut rows = Vec::new();
    for lambda in dedup_lambdas(lambdas) {
        let settings = DistillSettings {
            weights: LossWeights::new(base.weights.lambda_ce, lambda)?,
            ..base.clone()
        };
        let out = distill_with_config(cfg, dataset, teacher, &settings, out_dir)?;
        let last = out.metrics.last();
        rows.push(AblationRow {
            lambda_kd: lambda,
            final_val_top1: last.map_or(0.0, |m| m.val_top1),
            best_val_top1: out.metrics.iter().map(|m| m.val_top1).fold(0.0, f64::max),
            final_mean_tau: last.map_or(0.0, |m| m.mean_tau),
            final_mean_correlation: last.map_or(0.0, |m| m.mean_correlation),
        });
    }
    let path = out_dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["lambda_kd", "final_val_top1", "best_val_top1", "final_mean_tau", "final_mean_correlation"])?;
    for r in &rows {
        w.write_record([
            r.lambda_kd.to_string(),
            r.final_val_top1.to_string(),
            r.best_val_top1.to_string(),
            r.final_mean_tau.to_string(),
            r.final_mean_correlation.to_string(),
        ])?;
    }
    w.flush()?;
    Ok((rows, path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: &'static str,
    pub median_epoch_wall_ms: f64,
    pub median_temp_compute_ms: f64,
    /// Median over all timed epochs of `temp_compute_ms / epoch_wall_ms`.
    pub median_ratio: f64,
    pub samples: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn bench_row(mode: &'static str, runs: &[TrainOutcome]) -> BenchRow {
    let all: Vec<&EpochMetrics> = runs.iter().flat_map(|r| &r.metrics).collect();
    let mut wall: Vec<f64> = all.iter().map(|m| m.epoch_wall_ms).collect();
    let mut temp: Vec<f64> = all.iter().map(|m| m.temp_compute_ms).collect();
    let mut ratio: Vec<f64> = all
        .iter()
        .map(|m| m.temp_compute_ms / m.epoch_wall_ms.max(f64::MIN_POSITIVE))
        .collect();
    BenchRow {
        mode,
        median_epoch_wall_ms: median(&mut wall),
        median_temp_compute_ms: median(&mut temp),
        median_ratio: median(&mut ratio),
        samples: all.len(),
    }
}

/// Times `repeats` distillation runs for the live maximum-logit policy, the
/// static policy, and the maximum-logit policy with cached teacher logits.
pub fn run_bench(
    cfg: &RunConfig,
    dataset: &Dataset,
    teacher: &Mlp<f32>,
    repeats: usize,
    out_dir: &Path,
) -> Result<(Vec<BenchRow>, PathBuf)> {
    if repeats == 0 {
        return Err(Error::Config("bench needs at least one repeat".into()));
    }
    ensure_dir(out_dir)?;
    let base = cfg.distill_settings()?;
    let max_logit = TemperaturePolicy {
        kind: PolicyKind::MaxLogit,
        ..cfg.temperature.clone()
    };
    let static_policy = TemperaturePolicy {
        kind: PolicyKind::Static,
        ..cfg.temperature.clone()
    };
    let modes: [(&'static str, TemperaturePolicy, bool); 3] = [
        ("max_logit", max_logit.clone(), false),
        ("static", static_policy, false),
        ("max_logit_precompute", max_logit, true),
    ];
    let mut rows = Vec::new();
    for (name, policy, precompute) in modes {
        let settings = DistillSettings {
            policy,
            precompute_teacher: precompute,
            ..base.clone()
        };
        let runs = (0..repeats)
            .map(|_| distill_with_config(cfg, dataset, teacher, &settings, out_dir))
            .collect::<Result<Vec<_>>>()?;
        rows.push(bench_row(name, &runs));
    }
    let path = out_dir.join("bench.md");
    fs::write(&path, bench_report(&rows, repeats))?;
    Ok((rows, path))
}

pub fn bench_report(rows: &[BenchRow], repeats: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Temperature overhead\n");
    let _ = writeln!(s, "Medians over every epoch of {repeats} repeat(s).");
    if repeats == 1 {
        let _ = writeln!(s, "A single repeat gives noisy medians.");
    }
    let _ = writeln!(s, "\n| mode | epoch wall ms | temp compute ms | temp / wall | epochs |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.3} | {:.4} | {:.5} | {} |",
            r.mode, r.median_epoch_wall_ms, r.median_temp_compute_ms, r.median_ratio, r.samples
        );
    }
    s
}
