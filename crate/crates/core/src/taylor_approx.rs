//! Truncated Taylor expansions of `exp`, softmax, `log` and the KL divergence
//! on temperature-scaled z-scores.
//!
//! With `t = z / τ` and `f^n` the order-`n` polynomial of `exp`, the
//! approximated divergence is
//!
//! ```text
//! (1/N) Σ_i  f^n(t^p_i) / Σ_k f^n(t^p_k)
//!          · ( log f^n(t^p_i) − log f^n(t^q_i) − log Σ_k f^n(t^p_k) + log Σ_k f^n(t^q_k) )
//! ```
//!
//! where every logarithm is replaced by its series around 1. Each per-class
//! factor is expanded as `log(1 + (f − 1))`; the normalizers are expanded as
//! `log N + log(1 + (S/N − 1))`, and the `log N` parts cancel. For z-scored
//! inputs and `n = m = 1` the whole expression collapses to `(1 − ρ) / (N τ²)`.

use crate::error::{Error, Result};
use crate::logit_core::{
    correlation, kl_divergence, softmax_t, KlNorm, ProbabilityDistribution, StandardizedLogits,
    Temperature,
};
use crate::temperature::radius_bound;

/// Truncation orders: `n` for `exp`, `m` for `log`.
///
/// `m` counts the highest power kept in the log series, so `m = 1` is the
/// linear term `x` alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApproxConfig {
    pub n: usize,
    pub m: usize,
}

impl ApproxConfig {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidOrder(n));
        }
        if m < 1 {
            return Err(Error::InvalidOrder(m));
        }
        Ok(Self { n, m })
    }

    /// Even orders of the exp polynomial have no real roots, so the
    /// approximated softmax never divides by a non-positive mass.
    pub fn positivity_safe(&self) -> bool {
        self.n % 2 == 0
    }
}

/// `Σ_{i=0}^{n} z^i / i!`, Horner form.
pub fn taylor_exp(z: f64, n: usize) -> f64 {
    let mut acc = 1.0;
    for i in (1..=n).rev() {
        acc = 1.0 + z * acc / i as f64;
    }
    acc
}

fn expansion_weights(z: &[f64], n: usize) -> Result<Vec<f64>> {
    z.iter()
        .enumerate()
        .map(|(index, &v)| {
            let value = taylor_exp(v, n);
            if value > 0.0 {
                Ok(value)
            } else {
                Err(Error::NonPositiveExpansion { index, value })
            }
        })
        .collect()
}

/// Softmax with `exp` replaced by `f^n`.
pub fn taylor_softmax(z: &[f64], n: usize) -> Result<ProbabilityDistribution> {
    if n < 1 {
        return Err(Error::InvalidOrder(n));
    }
    let weights = expansion_weights(z, n)?;
    let total: f64 = weights.iter().sum();
    ProbabilityDistribution::new(weights.into_iter().map(|w| w / total).collect())
}

/// `Σ_{i=0}^{m} (−1)^i x^{i+1} / (i+1)`, the series of `log(1 + x)`.
pub fn taylor_log(x_minus_1: f64, m: usize) -> Result<f64> {
    if !(x_minus_1.abs() < 1.0) {
        return Err(Error::OutOfRadius(x_minus_1));
    }
    let x = x_minus_1;
    let mut power = x;
    let mut sum = 0.0;
    for i in 0..=m {
        let term = power / (i + 1) as f64;
        sum += if i % 2 == 0 { term } else { -term };
        power *= x;
    }
    Ok(sum)
}

/// Log series truncated at power `order` (`order >= 1`).
fn log_series(x_minus_1: f64, order: usize) -> Result<f64> {
    taylor_log(x_minus_1, order - 1)
}

fn scaled(z: &StandardizedLogits, tau: Temperature) -> Vec<f64> {
    z.values().iter().map(|v| v / tau.value()).collect()
}

/// Approximated class-mean KL divergence between the tempered teacher (`zp`)
/// and student (`zq`) distributions.
pub fn approx_kl(
    zp: &StandardizedLogits,
    zq: &StandardizedLogits,
    tau: Temperature,
    cfg: ApproxConfig,
) -> Result<f64> {
    if zp.len() != zq.len() {
        return Err(Error::LengthMismatch {
            left: zp.len(),
            right: zq.len(),
        });
    }
    let n_classes = zp.len() as f64;
    let tp = scaled(zp, tau);
    let tq = scaled(zq, tau);
    let fp = expansion_weights(&tp, cfg.n)?;
    let fq = expansion_weights(&tq, cfg.n)?;
    let sp: f64 = fp.iter().sum();
    let sq: f64 = fq.iter().sum();

    let normalizer = log_series(sp / n_classes - 1.0, cfg.m)? - log_series(sq / n_classes - 1.0, cfg.m)?;
    let mut total = 0.0;
    for (a, b) in fp.iter().zip(&fq) {
        let ratio = log_series(a - 1.0, cfg.m)? - log_series(b - 1.0, cfg.m)?;
        total += a / sp * (ratio - normalizer);
    }
    Ok(total / n_classes)
}

/// `(1 − ρ) / (N τ²)`: the first-order divergence of two z-scored vectors.
pub fn first_order_kl_closed_form(
    zp: &StandardizedLogits,
    zq: &StandardizedLogits,
    tau: Temperature,
) -> Result<f64> {
    let rho = correlation(zp, zq)?;
    let t = tau.value();
    Ok((1.0 - rho) / (zp.len() as f64 * t * t))
}

/// Lagrange bound `e^{|z|} |z|^{n+1} / (n+1)!` on `|e^z − f^n(z)|`.
pub fn exp_remainder_bound(z: f64, n: usize) -> f64 {
    let a = z.abs();
    let ratio: f64 = (1..=n + 1).map(|i| a / i as f64).product();
    a.exp() * ratio
}

/// One row of a temperature sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxKLReport {
    pub tau: f64,
    pub approx_value: f64,
    /// Exact class-mean KL of the tempered softmax distributions.
    pub exact_value: f64,
    /// `(1 − ρ)/(N τ²)`.
    pub correlation_limit: f64,
    pub abs_gap_to_limit: f64,
}

impl ApproxKLReport {
    /// `|N τ² · approx − (1 − ρ)|`: the gap on the scale where the limit is
    /// temperature-free.
    pub fn normalized_gap(&self, n_classes: usize) -> f64 {
        n_classes as f64 * self.tau * self.tau * self.abs_gap_to_limit
    }
}

/// Evaluates the approximation, the exact divergence and the correlation
/// limit at each temperature of `tau_grid`.
pub fn convergence_sweep(
    zp: &StandardizedLogits,
    zq: &StandardizedLogits,
    cfg: ApproxConfig,
    tau_grid: &[f64],
) -> Result<Vec<ApproxKLReport>> {
    let bound = radius_bound(zp.max().max(zq.max()), cfg.n)?;
    tau_grid
        .iter()
        .map(|&t| {
            if !(t >= bound) {
                return Err(Error::TemperatureBelowBound { tau: t, bound });
            }
            let tau = Temperature::new(t)?;
            let approx_value = approx_kl(zp, zq, tau, cfg)?;
            let exact_value = kl_divergence(
                &softmax_t(zp.values(), tau),
                &softmax_t(zq.values(), tau),
                KlNorm::ClassMean,
            )?;
            let correlation_limit = first_order_kl_closed_form(zp, zq, tau)?;
            Ok(ApproxKLReport {
                tau: t,
                approx_value,
                exact_value,
                correlation_limit,
                abs_gap_to_limit: (approx_value - correlation_limit).abs(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logit_core::{zscore, LogitVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn z(v: &[f64]) -> StandardizedLogits {
        zscore(&LogitVector::new(v.to_vec()).unwrap()).unwrap()
    }

    fn random_z(rng: &mut ChaCha8Rng, k: usize) -> StandardizedLogits {
        z(&(0..k).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>())
    }

    /// Literal first-order expansion: Σ (1 + t^p_i)(t^p_i − t^q_i) / N².
    fn term_by_term_first_order(zp: &StandardizedLogits, zq: &StandardizedLogits, tau: f64) -> f64 {
        let n = zp.len() as f64;
        zp.values()
            .iter()
            .zip(zq.values())
            .map(|(a, b)| (1.0 + a / tau) * (a / tau - b / tau))
            .sum::<f64>()
            / (n * n)
    }

    #[test]
    fn taylor_exp_examples() {
        for n in 0..6 {
            assert_eq!(taylor_exp(0.0, n), 1.0);
        }
        assert_eq!(taylor_exp(0.5, 1), 1.5);
        assert_eq!(taylor_exp(1.0, 2), 2.5);
        assert!((taylor_exp(1.0, 20) - 1f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn taylor_softmax_examples() {
        let p = taylor_softmax(&[0.0, 0.0], 2).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
        let p = taylor_softmax(&[1.0, 0.0], 2).unwrap();
        assert!((p.probs()[0] - 2.5 / 3.5).abs() < 1e-15);
        assert!((p.probs()[0] - 0.71429).abs() < 1e-5);
        assert!(matches!(
            taylor_softmax(&[-3.0, 0.0], 1),
            Err(Error::NonPositiveExpansion { index: 0, .. })
        ));
        assert!(matches!(taylor_softmax(&[0.0, 1.0], 0), Err(Error::InvalidOrder(0))));
    }

    #[test]
    fn taylor_log_examples() {
        assert_eq!(taylor_log(0.0, 3).unwrap(), 0.0);
        assert_eq!(taylor_log(0.5, 1).unwrap(), 0.375);
        assert!(matches!(taylor_log(1.0, 2), Err(Error::OutOfRadius(_))));
        assert!(matches!(taylor_log(-1.5, 2), Err(Error::OutOfRadius(_))));
        assert!((taylor_log(0.3, 60).unwrap() - 1.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn approx_kl_vanishes_for_identical_inputs() {
        let a = z(&[0.3, -1.0, 2.0, 0.1]);
        for n in 1..=4 {
            for m in 1..=4 {
                let cfg = ApproxConfig::new(n, m).unwrap();
                let v = approx_kl(&a, &a, Temperature::new(5.0).unwrap(), cfg).unwrap();
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_order_reversed_pair() {
        let zp = z(&[1.0, 2.0, 3.0]);
        let zq = z(&[3.0, 2.0, 1.0]);
        let tau = Temperature::new(2.0).unwrap();
        let cfg = ApproxConfig::new(1, 1).unwrap();
        let approx = approx_kl(&zp, &zq, tau, cfg).unwrap();
        assert!((approx - 1.0 / 6.0).abs() < 1e-9);
        assert!((first_order_kl_closed_form(&zp, &zq, tau).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert!((term_by_term_first_order(&zp, &zq, 2.0) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_examples() {
        let a = z(&[0.0, 0.0, 3.0]);
        let b = z(&[1.0, 2.0, 3.0]);
        assert!(first_order_kl_closed_form(&a, &a, Temperature::ONE).unwrap().abs() < 1e-15);
        let v = first_order_kl_closed_form(&a, &b, Temperature::ONE).unwrap();
        assert!((v - 0.04466).abs() < 1e-5);
    }

    #[test]
    fn first_order_matches_literal_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = ApproxConfig::new(1, 1).unwrap();
        for _ in 0..200 {
            let k = [5, 10, 100][rng.gen_range(0..3)];
            let zp = random_z(&mut rng, k);
            let zq = random_z(&mut rng, k);
            let tau = 1.5 * zp.max_abs().max(zq.max_abs());
            let approx = approx_kl(&zp, &zq, Temperature::new(tau).unwrap(), cfg).unwrap();
            let oracle = term_by_term_first_order(&zp, &zq, tau);
            assert!((approx - oracle).abs() <= 1e-9 * oracle.abs().max(1e-12));
        }
    }

    #[test]
    fn remainder_bound_examples() {
        assert_eq!(exp_remainder_bound(0.0, 3), 0.0);
        let r = 3f64.sqrt() + 1.0;
        let bound = exp_remainder_bound(r, 2);
        assert!((r.exp() - taylor_exp(r, 2)).abs() <= bound);
        assert_eq!(bound, exp_remainder_bound(-r, 2));
        assert!((-r).exp() - taylor_exp(-r, 2) <= bound);
    }

    #[test]
    fn sweep_identical_pair_has_zero_gap() {
        let a = z(&[0.5, -0.2, 1.7, -1.0, 0.0]);
        let cfg = ApproxConfig::new(2, 2).unwrap();
        let rows = convergence_sweep(&a, &a, cfg, &[3.0, 6.0, 12.0]).unwrap();
        assert!(rows.iter().all(|r| r.abs_gap_to_limit < 1e-12));
    }

    #[test]
    fn sweep_gap_shrinks_with_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zp = random_z(&mut rng, 5);
        let zq = random_z(&mut rng, 5);
        let cfg = ApproxConfig::new(2, 2).unwrap();
        let rows = convergence_sweep(&zp, &zq, cfg, &[3.0, 6.0, 12.0, 24.0]).unwrap();
        let gaps: Vec<f64> = rows.iter().map(|r| r.normalized_gap(5)).collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
        for r in &rows {
            assert_eq!(r.abs_gap_to_limit, (r.approx_value - r.correlation_limit).abs());
        }
    }

    #[test]
    fn sweep_rejects_temperature_below_bound() {
        let zp = z(&[1.0, 2.0, 3.0]);
        let zq = z(&[3.0, 1.0, 2.0]);
        let cfg = ApproxConfig::new(2, 2).unwrap();
        assert!(matches!(
            convergence_sweep(&zp, &zq, cfg, &[10.0, 1.0]),
            Err(Error::TemperatureBelowBound { .. })
        ));
    }

    #[test]
    fn approx_kl_reports_out_of_radius() {
        // Below the bound the expanded weights exceed 2 and the log series diverges.
        let zp = z(&[1.0, 2.0, 3.0]);
        let zq = z(&[3.0, 1.0, 2.0]);
        let tau = Temperature::new(0.5).unwrap();
        let cfg = ApproxConfig::new(2, 2).unwrap();
        assert!(matches!(approx_kl(&zp, &zq, tau, cfg), Err(Error::OutOfRadius(_))));
    }

    proptest! {
        #[test]
        fn remainder_bound_dominates(zi in -4000i32..=4000, n in 0usize..=12) {
            let zv = f64::from(zi) / 1000.0;
            let bound = exp_remainder_bound(zv, n);
            let actual = (zv.exp() - taylor_exp(zv, n)).abs();
            // Evaluating e^z and f^n(z) in floating point costs a few ulps.
            prop_assert!(actual <= bound + 4.0 * f64::EPSILON * zv.exp().max(1.0));
        }

        #[test]
        fn taylor_softmax_converges(v in prop::collection::vec(-2.0f64..2.0, 2..20)) {
            let approx = taylor_softmax(&v, 20).unwrap();
            let exact = softmax_t(&v, Temperature::ONE);
            for (a, b) in approx.probs().iter().zip(exact.probs()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            prop_assert!((approx.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn closed_form_decreases_in_tau(seed in 0u64..500, t in 0.1f64..50.0, dt in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let zp = random_z(&mut rng, 6);
            let zq = random_z(&mut rng, 6);
            prop_assume!(correlation(&zp, &zq).unwrap() < 1.0 - 1e-9);
            let lo = first_order_kl_closed_form(&zp, &zq, Temperature::new(t).unwrap()).unwrap();
            let hi = first_order_kl_closed_form(&zp, &zq, Temperature::new(t + dt).unwrap()).unwrap();
            prop_assert!(hi < lo);
        }
    }
}
