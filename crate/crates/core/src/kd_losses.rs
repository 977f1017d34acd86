//! Distillation objective and its gradient with respect to student logits.
//!
//! Per sample `b` with temperature `τ_b`:
//!
//! ```text
//! L_b = λ_CE · CE(label_b, softmax(s_b))
//!     + λ_KD · τ_b² · KL( softmax(z(t_b)/τ_b) || softmax(z(s_b)/τ_b) )
//! ```
//!
//! where `z(·)` is the per-sample z-score. The batch objective is the mean of
//! `L_b`. Temperatures are constants for differentiation (stop-gradient); the
//! student-side z-score is differentiated through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Side};
use crate::logit_core::{
    correlation, log_softmax_t, zscore, KlNorm, LogitVector, StandardizedLogits, Temperature,
};
use crate::temperature::TemperaturePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_kd: f64,
}

impl LossWeights {
    pub fn new(lambda_ce: f64, lambda_kd: f64) -> Result<Self> {
        let w = Self {
            lambda_ce,
            lambda_kd,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn ce_only() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_kd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_ce) || !ok(self.lambda_kd) {
            return Err(Error::InvalidWeights(format!(
                "weights must be finite and non-negative, got ({}, {})",
                self.lambda_ce, self.lambda_kd
            )));
        }
        if self.lambda_ce == 0.0 && self.lambda_kd == 0.0 {
            return Err(Error::InvalidWeights("both weights are zero".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 0.1,
            lambda_kd: 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Batch mean of the cross-entropy terms.
    pub ce: f64,
    /// Batch mean of the τ²-scaled divergence terms.
    pub kd: f64,
    pub per_sample_tau: Vec<f64>,
    pub per_sample_correlation: Vec<f64>,
}

/// One sample of a distillation batch.
#[derive(Debug, Clone, Copy)]
pub struct KdSample<'a> {
    pub teacher: &'a LogitVector,
    pub student: &'a LogitVector,
    pub label: usize,
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// `−log softmax(logits)[label]` on raw logits.
pub fn ce_loss(student_logits: &LogitVector, label: usize) -> Result<f64> {
    check_label(label, student_logits.len())?;
    Ok(-log_softmax_t(student_logits.values(), Temperature::ONE)[label])
}

/// `softmax(logits) − onehot(label)`.
pub fn ce_gradient(student_logits: &LogitVector, label: usize) -> Result<Vec<f64>> {
    check_label(label, student_logits.len())?;
    let mut g: Vec<f64> = log_softmax_t(student_logits.values(), Temperature::ONE)
        .into_iter()
        .map(f64::exp)
        .collect();
    g[label] -= 1.0;
    Ok(g)
}

/// `τ² · KL(softmax(z(t)/τ) || softmax(z(s)/τ))` with the sum-form KL.
pub fn kd_loss(teacher: &LogitVector, student: &LogitVector, tau: Temperature) -> Result<f64> {
    kd_loss_with_norm(teacher, student, tau, KlNorm::Sum)
}

pub fn kd_loss_with_norm(
    teacher: &LogitVector,
    student: &LogitVector,
    tau: Temperature,
    norm: KlNorm,
) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            left: teacher.len(),
            right: student.len(),
        });
    }
    let zt = zscore(teacher)?;
    let zs = zscore(student)?;
    Ok(scaled_divergence(&zt, &zs, tau, norm))
}

fn scaled_divergence(
    zt: &StandardizedLogits,
    zs: &StandardizedLogits,
    tau: Temperature,
    norm: KlNorm,
) -> f64 {
    let lp = log_softmax_t(zt.values(), tau);
    let lq = log_softmax_t(zs.values(), tau);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    let t = tau.value();
    t * t * kl.max(0.0) * norm.scale(zt.len())
}

/// Back-propagates `upstream` (a gradient w.r.t. the z-scores) through the
/// z-score of the raw vector: `(g − mean(g) − z·(z·g)/K) / σ`.
pub fn zscore_backward(z: &StandardizedLogits, upstream: &[f64]) -> Vec<f64> {
    let k = z.len() as f64;
    let mean_g = upstream.iter().sum::<f64>() / k;
    let zg = z.values().iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>() / k;
    let sigma = z.source_std();
    z.values()
        .iter()
        .zip(upstream)
        .map(|(zi, gi)| (gi - mean_g - zi * zg) / sigma)
        .collect()
}

/// Loss terms of a single sample whose z-scores are already known.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTerms {
    pub ce: f64,
    /// τ²-scaled divergence.
    pub kd: f64,
    pub correlation: f64,
    /// Gradient of `λ_CE·ce + λ_KD·kd` w.r.t. the raw student logits, when
    /// requested.
    pub grad: Option<Vec<f64>>,
}

/// Evaluates the objective for one sample. `teacher_z` and `student_z` must be
/// the z-scores of the teacher logits and of `student` respectively.
#[allow(clippy::too_many_arguments)]
pub fn sample_terms(
    teacher_z: &StandardizedLogits,
    student: &LogitVector,
    student_z: &StandardizedLogits,
    label: usize,
    tau: Temperature,
    weights: &LossWeights,
    norm: KlNorm,
    with_grad: bool,
) -> Result<SampleTerms> {
    let k = student.len();
    if teacher_z.len() != k || student_z.len() != k {
        return Err(Error::LengthMismatch {
            left: teacher_z.len(),
            right: k,
        });
    }
    check_label(label, k)?;

    let ls = log_softmax_t(student.values(), Temperature::ONE);
    let ce = -ls[label];

    let lp = log_softmax_t(teacher_z.values(), tau);
    let lq = log_softmax_t(student_z.values(), tau);
    let t = tau.value();
    let scale = norm.scale(k);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    let kd = t * t * kl.max(0.0) * scale;
    let rho = correlation(teacher_z, student_z)?;

    let grad = with_grad.then(|| {
        // d(τ² KL)/dz_s = τ (q − p), times the class-mean factor if any.
        let upstream: Vec<f64> = lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| weights.lambda_kd * t * scale * (b.exp() - a.exp()))
            .collect();
        let mut g = zscore_backward(student_z, &upstream);
        for (i, (gi, l)) in g.iter_mut().zip(&ls).enumerate() {
            let onehot = if i == label { 1.0 } else { 0.0 };
            *gi += weights.lambda_ce * (l.exp() - onehot);
        }
        g
    });

    Ok(SampleTerms {
        ce,
        kd,
        correlation: rho,
        grad,
    })
}

fn standardize_batch(
    batch: &[KdSample<'_>],
) -> Result<Vec<(StandardizedLogits, StandardizedLogits)>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch
        .iter()
        .enumerate()
        .map(|(index, s)| {
            if s.teacher.len() != s.student.len() {
                return Err(Error::LengthMismatch {
                    left: s.teacher.len(),
                    right: s.student.len(),
                });
            }
            let zt = zscore(s.teacher).map_err(|_| Error::DegenerateSample {
                index,
                side: Side::Teacher,
            })?;
            let zs = zscore(s.student).map_err(|_| Error::DegenerateSample {
                index,
                side: Side::Student,
            })?;
            Ok((zt, zs))
        })
        .collect()
}

fn evaluate(
    batch: &[KdSample<'_>],
    weights: &LossWeights,
    taus: Option<&[f64]>,
    policy: &TemperaturePolicy,
    norm: KlNorm,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    weights.validate()?;
    policy.validate()?;
    let z = standardize_batch(batch)?;
    if let Some(taus) = taus {
        if taus.len() != batch.len() {
            return Err(Error::LengthMismatch {
                left: taus.len(),
                right: batch.len(),
            });
        }
    }
    let b = batch.len() as f64;
    let mut ce = 0.0;
    let mut kd = 0.0;
    let mut per_sample_tau = Vec::with_capacity(batch.len());
    let mut per_sample_correlation = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(if with_grad { batch.len() } else { 0 });
    for (i, (sample, (zt, zs))) in batch.iter().zip(&z).enumerate() {
        let tau = match taus {
            Some(t) => Temperature::new(t[i])?,
            None => policy.temperature_for(zt, zs)?,
        };
        let terms = sample_terms(zt, sample.student, zs, sample.label, tau, weights, norm, with_grad)?;
        ce += terms.ce;
        kd += terms.kd;
        per_sample_tau.push(tau.value());
        per_sample_correlation.push(terms.correlation);
        if let Some(mut g) = terms.grad {
            g.iter_mut().for_each(|x| *x /= b);
            grads.push(g);
        }
    }
    ce /= b;
    kd /= b;
    Ok((
        LossBreakdown {
            total: weights.lambda_ce * ce + weights.lambda_kd * kd,
            ce,
            kd,
            per_sample_tau,
            per_sample_correlation,
        },
        grads,
    ))
}

/// Batch-mean objective with per-sample temperatures from `policy`.
pub fn combined_loss(
    batch: &[KdSample<'_>],
    weights: &LossWeights,
    policy: &TemperaturePolicy,
    norm: KlNorm,
) -> Result<LossBreakdown> {
    evaluate(batch, weights, None, policy, norm, false).map(|(l, _)| l)
}

/// Gradient of [`combined_loss`]'s total w.r.t. every student logit vector.
pub fn loss_gradient(
    batch: &[KdSample<'_>],
    weights: &LossWeights,
    policy: &TemperaturePolicy,
    norm: KlNorm,
) -> Result<Vec<Vec<f64>>> {
    evaluate(batch, weights, None, policy, norm, true).map(|(_, g)| g)
}

/// Objective and gradient with the per-sample temperatures held fixed.
pub fn combined_loss_with_taus(
    batch: &[KdSample<'_>],
    weights: &LossWeights,
    taus: &[f64],
    norm: KlNorm,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    evaluate(batch, weights, Some(taus), &TemperaturePolicy::default(), norm, true)
}
