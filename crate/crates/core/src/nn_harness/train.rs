//! Teacher training and the per-batch distillation loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::mlp::{Matrix, Mlp, MlpSpec};
use super::optim::{backward_and_step, OptimizerSpec, SgdMomentum};
use crate::data_pipeline::Dataset;
use crate::error::{Error, Result};
use crate::kd_losses::{sample_terms, LossWeights};
use crate::logit_core::{argmax, log_softmax_t, zscore, KlNorm, LogitVector, StandardizedLogits, Temperature};
use crate::temperature::{radius_bound, PolicyKind, TemperaturePolicy};

/// Rows processed per forward call when evaluating or caching.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_total: f64,
    pub train_ce: f64,
    pub train_kd: f64,
    /// Zero when no teacher is involved.
    pub mean_tau: f64,
    pub min_tau: f64,
    pub max_tau: f64,
    /// Batches in which every sample received the same temperature.
    pub uniform_tau_batches: usize,
    /// Mean teacher-student correlation of the z-scored logits; zero without
    /// a teacher.
    pub mean_correlation: f64,
    pub val_top1: f64,
    pub epoch_wall_ms: f64,
    pub temp_compute_ms: f64,
    pub skipped_samples: usize,
}

/// Everything the distillation loop needs besides the models and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    pub weights: LossWeights,
    pub policy: TemperaturePolicy,
    pub kl_norm: KlNorm,
    pub epochs: usize,
    pub precompute_teacher: bool,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            policy: TemperaturePolicy::default(),
            kl_norm: KlNorm::Sum,
            epochs: 60,
            precompute_teacher: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// Seed of the shuffle for the 0-based `epoch`.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    run_seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn shuffled_train_indices(dataset: &Dataset, run_seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx = dataset.train_indices().to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(run_seed, epoch)));
    idx
}

fn batch_inputs(dataset: &Dataset, indices: &[usize]) -> Result<Matrix<f32>> {
    Matrix::from_vec(indices.len(), dataset.dims(), dataset.gather_f32(indices))
}

/// Logits of `model` for the given samples, computed in chunks.
pub fn predict(model: &Mlp<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        out.extend(model.forward(&batch_inputs(dataset, chunk)?)?.to_rows());
    }
    Ok(out)
}

/// Top-1 accuracy on the validation split; zero when the split is empty.
pub fn evaluate_top1(model: &Mlp<f32>, dataset: &Dataset) -> Result<f64> {
    let val = dataset.val_indices();
    if val.is_empty() {
        return Ok(0.0);
    }
    let logits = predict(model, dataset, val)?;
    let correct = logits
        .iter()
        .zip(val)
        .filter(|(row, &i)| {
            let r: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            argmax(&r) == dataset.labels()[i]
        })
        .count();
    Ok(correct as f64 / val.len() as f64)
}

fn check_model(spec: &MlpSpec, dataset: &Dataset, role: &str) -> Result<()> {
    if spec.inputs() != dataset.dims() || spec.outputs() != dataset.n_classes() {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "{role} with {} inputs and {} outputs",
                dataset.dims(),
                dataset.n_classes()
            ),
            got: format!("{:?}", spec.layer_widths),
        });
    }
    Ok(())
}

/// Frozen-teacher logits for every sample, with their z-scores and peaks.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    checksum: u64,
    logits: Vec<Vec<f32>>,
    z: Vec<Option<StandardizedLogits>>,
    peaks: Vec<f64>,
}

impl TeacherCache {
    pub fn build(teacher: &Mlp<f32>, dataset: &Dataset, policy: &TemperaturePolicy) -> Result<Self> {
        let all: Vec<usize> = (0..dataset.len()).collect();
        Self::from_logits(teacher.checksum(), predict(teacher, dataset, &all)?, policy)
    }

    /// Rebuilds the derived columns from stored logits.
    pub fn from_logits(checksum: u64, logits: Vec<Vec<f32>>, policy: &TemperaturePolicy) -> Result<Self> {
        let mut z = Vec::with_capacity(logits.len());
        let mut peaks = Vec::with_capacity(logits.len());
        for row in &logits {
            let zt = zscore(&LogitVector::from_f32(row)?).ok();
            peaks.push(zt.as_ref().map_or(f64::NAN, |z| policy.teacher_peak(z)));
            z.push(zt);
        }
        Ok(Self {
            checksum,
            logits,
            z,
            peaks,
        })
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn logits(&self) -> &[Vec<f32>] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

enum TeacherSource<'a> {
    None,
    Live(&'a Mlp<f32>),
    Cached(&'a TeacherCache),
}

#[derive(Default)]
struct EpochAccumulator {
    total: f64,
    ce: f64,
    kd: f64,
    kept: usize,
    tau_sum: f64,
    tau_min: f64,
    tau_max: f64,
    corr_sum: f64,
    uniform_batches: usize,
    skipped: usize,
    temp_secs: f64,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            tau_min: f64::INFINITY,
            tau_max: f64::NEG_INFINITY,
            ..Self::default()
        }
    }
}

/// Per-sample inputs to the loss after the temperature stage.
struct Prepared {
    row: usize,
    student: LogitVector,
    zs: StandardizedLogits,
    zt: Option<StandardizedLogits>,
    tau: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    dataset: &Dataset,
    student_spec: &MlpSpec,
    opt: &OptimizerSpec,
    teacher: TeacherSource<'_>,
    weights: &LossWeights,
    policy: &TemperaturePolicy,
    norm: KlNorm,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    check_model(student_spec, dataset, "student")?;
    weights.validate()?;
    policy.validate()?;
    opt.validate()?;
    let mut model = Mlp::<f32>::init(student_spec)?;
    let mut sgd = SgdMomentum::new(opt, &model, epochs)?;
    let k = dataset.n_classes();
    let mut metrics = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let start = Instant::now();
        let order = shuffled_train_indices(dataset, seed, epoch);
        let mut acc = EpochAccumulator::new();

        for batch in order.chunks(opt.batch_size) {
            let x = batch_inputs(dataset, batch)?;
            let cache = model.forward_cached(&x)?;
            let student_logits = cache.logits();
            let live_teacher = match teacher {
                TeacherSource::Live(t) => Some(t.forward(&x)?),
                _ => None,
            };

            // Student z-scores are needed by the loss whatever the policy.
            let mut prepared = Vec::with_capacity(batch.len());
            for row in 0..batch.len() {
                let student = LogitVector::from_f32(student_logits.row(row))?;
                match zscore(&student) {
                    Ok(zs) => prepared.push(Prepared {
                        row,
                        student,
                        zs,
                        zt: None,
                        tau: 1.0,
                    }),
                    Err(_) if !matches!(teacher, TeacherSource::None) => acc.skipped += 1,
                    // Without a teacher only the cross-entropy is used and a
                    // constant student vector is harmless.
                    Err(_) => prepared.push(Prepared {
                        row,
                        zs: StandardizedLogits::from_standardized(vec![-1.0, 1.0])?,
                        student,
                        zt: None,
                        tau: 1.0,
                    }),
                }
            }

            // Temperature stage: teacher z-scores (live mode), maxima, bound.
            // Under the static policy none of this is temperature work.
            if !matches!(teacher, TeacherSource::None) {
                let t0 = Instant::now();
                let mut kept = Vec::with_capacity(prepared.len());
                for mut p in prepared {
                    let index = batch[p.row];
                    let (zt, teacher_peak) = match &teacher {
                        TeacherSource::Live(_) => {
                            let t = live_teacher.as_ref().expect("live mode").row(p.row);
                            match zscore(&LogitVector::from_f32(t)?) {
                                Ok(zt) => {
                                    let peak = policy.teacher_peak(&zt);
                                    (zt, peak)
                                }
                                Err(_) => {
                                    acc.skipped += 1;
                                    continue;
                                }
                            }
                        }
                        TeacherSource::Cached(c) => match &c.z[index] {
                            Some(zt) => (zt.clone(), c.peaks[index]),
                            None => {
                                acc.skipped += 1;
                                continue;
                            }
                        },
                        TeacherSource::None => unreachable!(),
                    };
                    p.tau = match policy.kind {
                        PolicyKind::Static => policy.static_tau,
                        PolicyKind::MaxLogit => {
                            let peak = teacher_peak.max(policy.student_peak(&p.zs));
                            radius_bound(peak, policy.order_a)?.max(policy.floor)
                        }
                    };
                    p.zt = Some(zt);
                    kept.push(p);
                }
                if policy.kind == PolicyKind::MaxLogit {
                    acc.temp_secs += t0.elapsed().as_secs_f64();
                }
                prepared = kept;
            }

            if prepared.is_empty() {
                continue;
            }
            let b = prepared.len() as f64;
            let mut grad = Matrix::<f32>::zeros(batch.len(), k);
            let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in &prepared {
                let label = dataset.labels()[batch[p.row]];
                let (ce, kd, g) = match &p.zt {
                    Some(zt) => {
                        let terms = sample_terms(
                            zt,
                            &p.student,
                            &p.zs,
                            label,
                            Temperature::new(p.tau)?,
                            weights,
                            norm,
                            true,
                        )?;
                        acc.corr_sum += terms.correlation;
                        acc.tau_sum += p.tau;
                        bmin = bmin.min(p.tau);
                        bmax = bmax.max(p.tau);
                        (terms.ce, terms.kd, terms.grad.expect("requested"))
                    }
                    None => ce_terms(&p.student, label, weights.lambda_ce)?,
                };
                acc.ce += ce;
                acc.kd += kd;
                acc.total += weights.lambda_ce * ce + weights.lambda_kd * kd;
                for (dst, v) in grad.row_mut(p.row).iter_mut().zip(g) {
                    *dst = (v / b) as f32;
                }
            }
            acc.kept += prepared.len();
            if prepared[0].zt.is_some() {
                acc.tau_min = acc.tau_min.min(bmin);
                acc.tau_max = acc.tau_max.max(bmax);
                if bmin == bmax {
                    acc.uniform_batches += 1;
                }
            }
            backward_and_step(&mut model, &cache, &grad, &mut sgd, epoch)?;
        }

        let val_top1 = evaluate_top1(&model, dataset)?;
        let n = acc.kept.max(1) as f64;
        let with_teacher = !matches!(teacher, TeacherSource::None) && acc.kept > 0;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_total: acc.total / n,
            train_ce: acc.ce / n,
            train_kd: acc.kd / n,
            mean_tau: if with_teacher { acc.tau_sum / n } else { 0.0 },
            min_tau: if with_teacher { acc.tau_min } else { 0.0 },
            max_tau: if with_teacher { acc.tau_max } else { 0.0 },
            uniform_tau_batches: acc.uniform_batches,
            mean_correlation: if with_teacher { acc.corr_sum / n } else { 0.0 },
            val_top1,
            epoch_wall_ms: start.elapsed().as_secs_f64() * 1e3,
            temp_compute_ms: acc.temp_secs * 1e3,
            skipped_samples: acc.skipped,
        });
        if acc.skipped > 0 {
            log::warn!("epoch {}: skipped {} degenerate samples", epoch + 1, acc.skipped);
        }
        log::debug!("{:?}", metrics.last().expect("just pushed"));
    }
    Ok(TrainOutcome { model, metrics })
}

/// Cross-entropy term and its weighted gradient, computed the same way as the
/// cross-entropy part of [`sample_terms`].
fn ce_terms(student: &LogitVector, label: usize, lambda_ce: f64) -> Result<(f64, f64, Vec<f64>)> {
    if label >= student.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: student.len(),
        });
    }
    let ls = log_softmax_t(student.values(), Temperature::ONE);
    let g = ls
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let onehot = if i == label { 1.0 } else { 0.0 };
            0.0 + lambda_ce * (l.exp() - onehot)
        })
        .collect();
    Ok((-ls[label], 0.0, g))
}

/// Cross-entropy training from the initialization described by `spec`.
pub fn train_teacher(
    dataset: &Dataset,
    spec: &MlpSpec,
    opt: &OptimizerSpec,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    run_loop(
        dataset,
        spec,
        opt,
        TeacherSource::None,
        &LossWeights::ce_only(),
        &TemperaturePolicy::default(),
        KlNorm::Sum,
        epochs,
        seed,
    )
}

/// Distills `teacher` into a freshly initialized student.
///
/// The teacher is only read. With `precompute_teacher` its logits are computed
/// once for the whole dataset before the first epoch.
pub fn distill(
    dataset: &Dataset,
    teacher: &Mlp<f32>,
    student_spec: &MlpSpec,
    opt: &OptimizerSpec,
    settings: &DistillSettings,
) -> Result<TrainOutcome> {
    check_model(teacher.spec(), dataset, "teacher")?;
    if settings.precompute_teacher {
        let cache = TeacherCache::build(teacher, dataset, &settings.policy)?;
        distill_cached(dataset, &cache, student_spec, opt, settings)
    } else {
        run_loop(
            dataset,
            student_spec,
            opt,
            TeacherSource::Live(teacher),
            &settings.weights,
            &settings.policy,
            settings.kl_norm,
            settings.epochs,
            settings.seed,
        )
    }
}

/// Distillation from previously cached teacher logits.
pub fn distill_cached(
    dataset: &Dataset,
    cache: &TeacherCache,
    student_spec: &MlpSpec,
    opt: &OptimizerSpec,
    settings: &DistillSettings,
) -> Result<TrainOutcome> {
    if cache.len() != dataset.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} cached teacher rows", dataset.len()),
            got: format!("{}", cache.len()),
        });
    }
    if cache.logits.first().map_or(0, Vec::len) != dataset.n_classes() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "cached logits have {} classes, dataset has {}",
            cache.logits.first().map_or(0, Vec::len),
            dataset.n_classes()
        )));
    }
    run_loop(
        dataset,
        student_spec,
        opt,
        TeacherSource::Cached(cache),
        &settings.weights,
        &settings.policy,
        settings.kl_norm,
        settings.epochs,
        settings.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_pipeline::generate_blobs;
    use crate::nn_harness::mlp::Activation;

    fn small_setup() -> (Dataset, OptimizerSpec) {
        let ds = generate_blobs(3, 40, 4, 0.3, 11).unwrap();
        let opt = OptimizerSpec {
            batch_size: 16,
            ..OptimizerSpec::default()
        };
        (ds, opt)
    }

    fn teacher(ds: &Dataset, opt: &OptimizerSpec) -> Mlp<f32> {
        let spec = MlpSpec::new(vec![4, 16, 3], Activation::Relu, 5);
        train_teacher(ds, &spec, opt, 10, 1).unwrap().model
    }

    #[test]
    fn separable_blobs_teacher_reaches_high_accuracy() {
        let ds = generate_blobs(3, 100, 2, 0.2, 7).unwrap();
        let spec = MlpSpec::new(vec![2, 16, 3], Activation::Relu, 1);
        let opt = OptimizerSpec {
            batch_size: 16,
            ..OptimizerSpec::default()
        };
        let out = train_teacher(&ds, &spec, &opt, 30, 3).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(last.val_top1 >= 0.95, "val_top1 = {}", last.val_top1);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (ds, opt) = small_setup();
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu, 2);
        let out = train_teacher(&ds, &spec, &opt, 0, 0).unwrap();
        assert_eq!(out.model, Mlp::init(&spec).unwrap());
        assert!(out.metrics.is_empty());
    }

    fn without_clock(m: &[EpochMetrics]) -> Vec<EpochMetrics> {
        m.iter()
            .map(|e| EpochMetrics {
                epoch_wall_ms: 0.0,
                temp_compute_ms: 0.0,
                ..e.clone()
            })
            .collect()
    }

    #[test]
    fn training_is_reproducible() {
        let (ds, opt) = small_setup();
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Tanh, 2);
        let a = train_teacher(&ds, &spec, &opt, 4, 9).unwrap();
        let b = train_teacher(&ds, &spec, &opt, 4, 9).unwrap();
        assert_eq!(without_clock(&a.metrics), without_clock(&b.metrics));
        assert_eq!(a.model.checksum(), b.model.checksum());
    }

    #[test]
    fn zero_kd_weight_matches_teacher_training() {
        let (ds, opt) = small_setup();
        let t = teacher(&ds, &opt);
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu, 3);
        let settings = DistillSettings {
            weights: LossWeights::ce_only(),
            epochs: 5,
            seed: 4,
            ..DistillSettings::default()
        };
        let kd = distill(&ds, &t, &spec, &opt, &settings).unwrap();
        let ce = train_teacher(&ds, &spec, &opt, 5, 4).unwrap();
        assert_eq!(kd.model, ce.model);
        for (a, b) in kd.metrics.iter().zip(&ce.metrics) {
            assert_eq!(a.train_ce, b.train_ce);
            assert_eq!(a.val_top1, b.val_top1);
        }
    }

    #[test]
    fn precompute_matches_live_and_teacher_is_untouched() {
        let (ds, opt) = small_setup();
        let t = teacher(&ds, &opt);
        let before = t.checksum();
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu, 3);
        let mut settings = DistillSettings {
            epochs: 4,
            seed: 2,
            ..DistillSettings::default()
        };
        let live = distill(&ds, &t, &spec, &opt, &settings).unwrap();
        settings.precompute_teacher = true;
        let cached = distill(&ds, &t, &spec, &opt, &settings).unwrap();
        assert_eq!(t.checksum(), before);
        for (a, b) in live.metrics.iter().zip(&cached.metrics) {
            assert!((a.train_total - b.train_total).abs() <= 1e-6);
        }
    }

    #[test]
    fn static_policy_reports_constant_tau() {
        let (ds, opt) = small_setup();
        let t = teacher(&ds, &opt);
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu, 3);
        let settings = DistillSettings {
            policy: TemperaturePolicy::fixed(4.0),
            epochs: 3,
            ..DistillSettings::default()
        };
        let out = distill(&ds, &t, &spec, &opt, &settings).unwrap();
        for m in &out.metrics {
            assert_eq!(m.mean_tau, 4.0);
            assert_eq!((m.min_tau, m.max_tau), (4.0, 4.0));
        }
    }

    #[test]
    fn max_logit_taus_stay_within_bounds() {
        let (ds, opt) = small_setup();
        let t = teacher(&ds, &opt);
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu, 3);
        let settings = DistillSettings {
            epochs: 3,
            ..DistillSettings::default()
        };
        let out = distill(&ds, &t, &spec, &opt, &settings).unwrap();
        let cap = radius_bound((2.0f64).sqrt(), 2).unwrap();
        for m in &out.metrics {
            assert!(m.min_tau >= 1.0);
            assert!(m.max_tau <= cap + 1e-12);
            assert!(m.temp_compute_ms <= m.epoch_wall_ms);
            assert!((0.0..=1.0).contains(&m.val_top1));
        }
    }

    #[test]
    fn mismatched_teacher_is_rejected() {
        let (ds, opt) = small_setup();
        let t = Mlp::<f32>::init(&MlpSpec::new(vec![4, 5], Activation::Relu, 0)).unwrap();
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu, 3);
        assert!(distill(&ds, &t, &spec, &opt, &DistillSettings::default()).is_err());
    }
}
