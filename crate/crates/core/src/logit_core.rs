//! Exact logit arithmetic: z-score standardization, temperature-scaled softmax,
//! KL divergence, sample-wise correlation and entropy.
//!
//! Everything here is 64-bit and allocation-light. Per-sample formulas sum over
//! the class axis, so "N" in the normalized KL is the class count `K`.

use crate::error::{Error, Result};

/// Population standard deviation at or below which a logit vector carries no
/// usable shape and z-scoring is refused.
pub const STD_EPSILON: f64 = 1e-8;

/// Raw class scores produced by a model for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::TooFewClasses(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogit(i));
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A z-scored logit vector: zero mean, unit population variance.
///
/// Keeps the standard deviation of the source vector, which the backward pass
/// through the standardization needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedLogits {
    values: Vec<f64>,
    source_std: f64,
}

impl StandardizedLogits {
    /// Wraps values that are already standardized, checking the invariants
    /// (mean 0 within `1e-9·K`, population variance 1 within `1e-9`).
    pub fn from_standardized(values: Vec<f64>) -> Result<Self> {
        let k = values.len();
        if k < 2 {
            return Err(Error::TooFewClasses(k));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogit(i));
        }
        let sum: f64 = values.iter().sum();
        let var = values.iter().map(|v| v * v).sum::<f64>() / k as f64;
        if sum.abs() > 1e-9 * k as f64 || (var - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "values are not standardized (sum {sum:e}, variance {var})"
            )));
        }
        Ok(Self {
            values,
            source_std: 1.0,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Population standard deviation of the vector this was computed from.
    pub fn source_std(&self) -> f64 {
        self.source_std
    }

    /// Largest standardized logit. Strictly positive for any valid instance.
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Class probabilities for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let k = probs.len();
        if k < 2 {
            return Err(Error::TooFewClasses(k));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "entry {p} is not strictly positive"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 * k as f64 {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Softmax temperature. Always positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidTemperature(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Prefactor convention for the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KlNorm {
    /// `Σ p_i log(p_i / q_i)`.
    #[default]
    Sum,
    /// The sum divided by the class count.
    ClassMean,
}

impl KlNorm {
    pub fn from_class_mean_flag(class_mean: bool) -> Self {
        if class_mean {
            KlNorm::ClassMean
        } else {
            KlNorm::Sum
        }
    }

    pub(crate) fn scale(self, k: usize) -> f64 {
        match self {
            KlNorm::Sum => 1.0,
            KlNorm::ClassMean => 1.0 / k as f64,
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// Standardizes `v` to zero mean and unit population variance.
pub fn zscore(v: &LogitVector) -> Result<StandardizedLogits> {
    let (mean, std) = mean_and_population_std(v.values());
    if !(std > STD_EPSILON) {
        return Err(Error::DegenerateLogits { std });
    }
    Ok(StandardizedLogits {
        values: v.values().iter().map(|x| (x - mean) / std).collect(),
        source_std: std,
    })
}

/// `log softmax(z / tau)`, stabilized by the row maximum.
pub fn log_softmax_t(z: &[f64], tau: Temperature) -> Vec<f64> {
    let t = tau.value();
    let max = z.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v / t - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|v| v / t - lse).collect()
}

/// Temperature-scaled softmax `exp(z_i/τ) / Σ_k exp(z_k/τ)`.
///
/// Entries can underflow to zero when the scaled logits span more than ~700;
/// callers that need logarithms should use [`log_softmax_t`].
pub fn softmax_t(z: &[f64], tau: Temperature) -> ProbabilityDistribution {
    let t = tau.value();
    let max = z.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = z.iter().map(|v| (v / t - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    ProbabilityDistribution(probs)
}

/// `D(p || q)` under the chosen normalization; never negative.
pub fn kl_divergence(
    p: &ProbabilityDistribution,
    q: &ProbabilityDistribution,
    norm: KlNorm,
) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let sum: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum();
    Ok(sum.max(0.0) * norm.scale(p.len()))
}

/// Sample-wise correlation of two standardized vectors, `(1/K) Σ a_i b_i`.
pub fn correlation(a: &StandardizedLogits, b: &StandardizedLogits) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot / a.len() as f64)
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbabilityDistribution) -> f64 {
    -p.probs()
        .iter()
        .filter(|pi| **pi > 0.0)
        .map(|pi| pi * pi.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn zscore_examples() {
        let z = zscore(&lv(&[1.0, 2.0, 3.0])).unwrap();
        assert_close(z.values(), &[-1.224744871, 0.0, 1.224744871], 1e-8);
        assert!((z.source_std() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let z = zscore(&lv(&[0.0, 0.0, 3.0])).unwrap();
        assert_close(z.values(), &[-0.707106781, -0.707106781, 1.414213562], 1e-8);
    }

    #[test]
    fn zscore_rejects_constant() {
        assert!(matches!(
            zscore(&lv(&[5.0, 5.0])),
            Err(Error::DegenerateLogits { .. })
        ));
    }

    #[test]
    fn logit_vector_guards() {
        assert!(matches!(LogitVector::new(vec![1.0]), Err(Error::TooFewClasses(1))));
        assert!(matches!(
            LogitVector::new(vec![1.0, f64::NAN]),
            Err(Error::NonFiniteLogit(1))
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_t(&[0.0, 0.0], Temperature::ONE);
        assert_close(p.probs(), &[0.5, 0.5], 1e-15);

        let p = softmax_t(&[2f64.ln(), 0.0], Temperature::ONE);
        assert_close(p.probs(), &[2.0 / 3.0, 1.0 / 3.0], 1e-12);

        let p = softmax_t(&[3.0, -1.0, 0.5], Temperature::new(1e9).unwrap());
        assert_close(p.probs(), &[1.0 / 3.0; 3], 1e-8);
    }

    #[test]
    fn softmax_survives_large_logits_at_low_temperature() {
        let p = softmax_t(&[1000.0, 999.0], Temperature::new(0.5).unwrap());
        assert!(p.probs().iter().all(|x| x.is_finite()));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = ProbabilityDistribution::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&p, &p, KlNorm::Sum).unwrap(), 0.0);

        let p = ProbabilityDistribution::new(vec![0.5, 0.5]).unwrap();
        let q = ProbabilityDistribution::new(vec![0.9, 0.1]).unwrap();
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * 5f64.ln();
        assert!((expected - 0.51083).abs() < 1e-5);
        assert!((kl_divergence(&p, &q, KlNorm::Sum).unwrap() - expected).abs() < 1e-15);
        assert!(
            (kl_divergence(&p, &q, KlNorm::ClassMean).unwrap() - expected / 2.0).abs() < 1e-15
        );

        let p = ProbabilityDistribution::new(vec![0.7, 0.3]).unwrap();
        let q = ProbabilityDistribution::new(vec![0.3, 0.7]).unwrap();
        assert!((kl_divergence(&p, &q, KlNorm::Sum).unwrap() - 0.33892).abs() < 1e-5);
    }

    #[test]
    fn kl_length_mismatch() {
        let p = ProbabilityDistribution::new(vec![0.5, 0.5]).unwrap();
        let q = ProbabilityDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            kl_divergence(&p, &q, KlNorm::Sum),
            Err(Error::LengthMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn correlation_examples() {
        let a = zscore(&lv(&[0.0, 0.0, 3.0])).unwrap();
        let b = zscore(&lv(&[1.0, 2.0, 3.0])).unwrap();
        assert!((correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = zscore(&lv(&[0.0, 0.0, -3.0])).unwrap();
        assert!((correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((correlation(&a, &b).unwrap() - 0.86603).abs() < 1e-5);
    }

    #[test]
    fn entropy_examples() {
        let p = ProbabilityDistribution::new(vec![1.0 - 1e-15, 1e-15]).unwrap();
        assert!(entropy(&p) < 1e-12);
        let p = ProbabilityDistribution::new(vec![0.25; 4]).unwrap();
        assert!((entropy(&p) - 4f64.ln()).abs() < 1e-15);
        let p = ProbabilityDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!((entropy(&p) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn standardized_validation() {
        assert!(StandardizedLogits::from_standardized(vec![-1.0, 1.0]).is_ok());
        assert!(StandardizedLogits::from_standardized(vec![0.0, 2.0]).is_err());
    }

    fn nonconstant_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 2..40).prop_filter("nonconstant", |v| {
            mean_and_population_std(v).1 > 1e-3
        })
    }

    fn pearson_two_pass(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    proptest! {
        #[test]
        fn zscore_is_standardized(v in nonconstant_vec()) {
            let z = zscore(&lv(&v)).unwrap();
            let k = v.len() as f64;
            let mean = z.values().iter().sum::<f64>() / k;
            let var = z.values().iter().map(|x| x * x).sum::<f64>() / k;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }

        #[test]
        fn zscore_affine_invariant(v in nonconstant_vec(), a in 0.01f64..100.0, b in -100.0f64..100.0) {
            let z1 = zscore(&lv(&v)).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let z2 = zscore(&lv(&shifted)).unwrap();
            for (x, y) in z1.values().iter().zip(z2.values()) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }

        #[test]
        fn softmax_temperature_is_division(v in nonconstant_vec(), tau in 0.05f64..50.0) {
            let t = Temperature::new(tau).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x / tau).collect();
            let p1 = softmax_t(&v, t);
            let p2 = softmax_t(&scaled, Temperature::ONE);
            for (x, y) in p1.probs().iter().zip(p2.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_keeps_argmax(v in nonconstant_vec(), tau in 0.05f64..1e3) {
            let p = softmax_t(&v, Temperature::new(tau).unwrap());
            prop_assert_eq!(p.argmax(), argmax(&v));
        }

        #[test]
        fn gibbs_inequality(a in nonconstant_vec(), shift in -3.0f64..3.0) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * (i as f64).sin()).collect();
            let p = softmax_t(&a, Temperature::ONE);
            let q = softmax_t(&b, Temperature::ONE);
            prop_assert!(kl_divergence(&p, &q, KlNorm::Sum).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p, KlNorm::Sum).unwrap() < 1e-9);
        }

        #[test]
        fn correlation_matches_pearson(a in nonconstant_vec(), seed in 0u64..1000) {
            let b: Vec<f64> = a.iter().enumerate()
                .map(|(i, x)| x * 0.3 + ((i as u64 * 31 + seed) % 17) as f64)
                .collect();
            prop_assume!(mean_and_population_std(&b).1 > 1e-3);
            let za = zscore(&lv(&a)).unwrap();
            let zb = zscore(&lv(&b)).unwrap();
            let rho = correlation(&za, &zb).unwrap();
            prop_assert!((rho - pearson_two_pass(&a, &b)).abs() < 1e-9);
            prop_assert!(rho.abs() <= 1.0 + 1e-9);
        }
    }
}
