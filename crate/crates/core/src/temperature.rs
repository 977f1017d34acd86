//! Temperature policies.
//!
//! The maximum-logit policy picks, per sample, the smallest temperature that
//! keeps the largest scaled z-score inside the convergence region of the
//! truncated exp/log series:
//!
//! * order 1: `τ = max_z`
//! * order 2: `τ = max_z · (1 + √3) / 2`
//! * order `n ≥ 3`: the root of `Σ_{i=1}^{n} (max_z/τ)^i / i! = 1`, by bisection.
//!
//! The result is clamped from below by a floor (1 by default) so that a
//! low-confidence sample never sharpens its distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Side};
use crate::logit_core::{zscore, LogitVector, StandardizedLogits, Temperature};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// `Σ_{i=1}^{n} x^i / i! − 1`; decreasing in τ for `x = max_z / τ > 0`.
fn series_excess(x: f64, n: usize) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for i in 1..=n {
        term *= x / i as f64;
        sum += term;
    }
    sum - 1.0
}

fn check_bound_args(max_z: f64, n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidOrder(n));
    }
    if !(max_z.is_finite() && max_z > 0.0) {
        return Err(Error::InvalidMaxLogit(max_z));
    }
    Ok(())
}

/// Smallest temperature keeping `max_z` inside the order-`n` radius.
pub fn radius_bound(max_z: f64, n: usize) -> Result<f64> {
    check_bound_args(max_z, n)?;
    match n {
        1 => Ok(max_z),
        2 => Ok(max_z * (1.0 + SQRT3) / 2.0),
        _ => radius_bound_bisection(max_z, n),
    }
}

/// Bisection on `[max_z/10, 10·max_z·n]`, run to floating-point resolution.
///
/// Valid for every order; for `n ∈ {1, 2}` it reproduces the closed forms.
pub fn radius_bound_bisection(max_z: f64, n: usize) -> Result<f64> {
    check_bound_args(max_z, n)?;
    let mut lo = max_z / 10.0;
    let mut hi = 10.0 * max_z * n as f64;
    debug_assert!(series_excess(max_z / lo, n) > 0.0);
    debug_assert!(series_excess(max_z / hi, n) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if series_excess(max_z / mid, n) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Static,
    #[default]
    MaxLogit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperaturePolicy {
    pub kind: PolicyKind,
    /// Used only by the static policy.
    pub static_tau: f64,
    /// Series order `a` for the maximum-logit policy.
    pub order_a: usize,
    pub floor: f64,
    /// Use `max |z_i|` instead of `max z_i`, covering the negative tail too.
    pub strict_abs_max: bool,
}

impl Default for TemperaturePolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::MaxLogit,
            static_tau: 4.0,
            order_a: 2,
            floor: 1.0,
            strict_abs_max: false,
        }
    }
}

impl TemperaturePolicy {
    pub fn fixed(tau: f64) -> Self {
        Self {
            kind: PolicyKind::Static,
            static_tau: tau,
            ..Self::default()
        }
    }

    pub fn max_logit(order_a: usize) -> Self {
        Self {
            kind: PolicyKind::MaxLogit,
            order_a,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.static_tau.is_finite() && self.static_tau > 0.0) {
            return Err(Error::InvalidPolicy(format!(
                "static_tau must be positive, got {}",
                self.static_tau
            )));
        }
        if self.order_a < 1 {
            return Err(Error::InvalidPolicy("order_a must be >= 1".into()));
        }
        if !(self.floor.is_finite() && self.floor >= 1.0) {
            return Err(Error::InvalidPolicy(format!(
                "floor must be >= 1, got {}",
                self.floor
            )));
        }
        Ok(())
    }

    fn peak(&self, z: &StandardizedLogits) -> f64 {
        if self.strict_abs_max {
            z.max_abs()
        } else {
            z.max()
        }
    }

    /// Temperature for one sample given its standardized teacher and student
    /// logits. Dispatches on the policy kind.
    pub fn temperature_for(
        &self,
        teacher: &StandardizedLogits,
        student: &StandardizedLogits,
    ) -> Result<Temperature> {
        match self.kind {
            PolicyKind::Static => Temperature::new(self.static_tau),
            PolicyKind::MaxLogit => {
                temperature_from_maxima(self.peak(teacher), self.peak(student), self)
            }
        }
    }

    /// Teacher-side peak. Fixed per sample while the teacher is frozen, so it
    /// can be cached.
    pub fn teacher_peak(&self, teacher: &StandardizedLogits) -> f64 {
        self.peak(teacher)
    }

    pub fn student_peak(&self, student: &StandardizedLogits) -> f64 {
        self.peak(student)
    }
}

/// Maximum-logit temperature from the two per-sample maxima.
pub fn temperature_from_maxima(
    teacher_max: f64,
    student_max: f64,
    policy: &TemperaturePolicy,
) -> Result<Temperature> {
    let peak = teacher_max.max(student_max);
    let tau = radius_bound(peak, policy.order_a)?.max(policy.floor);
    Temperature::new(tau)
}

/// Maximum-logit temperature of a standardized teacher/student pair.
///
/// Only the two maxima matter; the result is symmetric in its arguments.
pub fn mlt_temperature(
    zt: &StandardizedLogits,
    zs: &StandardizedLogits,
    policy: &TemperaturePolicy,
) -> Result<Temperature> {
    if policy.kind != PolicyKind::MaxLogit {
        return Err(Error::InvalidPolicy(
            "mlt_temperature requires the max_logit policy".into(),
        ));
    }
    temperature_from_maxima(policy.peak(zt), policy.peak(zs), policy)
}

/// Per-sample temperatures for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTemperatures {
    taus: Vec<f64>,
}

impl BatchTemperatures {
    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.taus.iter().sum::<f64>() / self.taus.len() as f64
    }
}

pub fn batch_temperatures(
    teacher_logits: &[LogitVector],
    student_logits: &[LogitVector],
    policy: &TemperaturePolicy,
) -> Result<BatchTemperatures> {
    policy.validate()?;
    if teacher_logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::LengthMismatch {
            left: teacher_logits.len(),
            right: student_logits.len(),
        });
    }
    let k = teacher_logits[0].len();
    for v in teacher_logits.iter().chain(student_logits) {
        if v.len() != k {
            return Err(Error::LengthMismatch {
                left: k,
                right: v.len(),
            });
        }
    }
    if policy.kind == PolicyKind::Static {
        return Ok(BatchTemperatures {
            taus: vec![policy.static_tau; teacher_logits.len()],
        });
    }
    let taus = teacher_logits
        .iter()
        .zip(student_logits)
        .enumerate()
        .map(|(index, (t, s))| {
            let zt = zscore(t).map_err(|_| Error::DegenerateSample {
                index,
                side: Side::Teacher,
            })?;
            let zs = zscore(s).map_err(|_| Error::DegenerateSample {
                index,
                side: Side::Student,
            })?;
            Ok(mlt_temperature(&zt, &zs, policy)?.value())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchTemperatures { taus })
}
