//! Randomized property suite run by `mltkd verify`.
//!
//! Each property draws its own instances from a ChaCha8 stream seeded from the
//! run seed and the property's position in [`PROPERTIES`], so adding a
//! property never changes the instances of another.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_pipeline::standard_normal;
use crate::error::Result;
use crate::kd_losses::{combined_loss, combined_loss_with_taus, kd_loss, KdSample, LossWeights};
use crate::logit_core::{
    argmax, correlation, entropy, kl_divergence, softmax_t, zscore, KlNorm, LogitVector,
    ProbabilityDistribution, StandardizedLogits, Temperature,
};
use crate::taylor_approx::{
    approx_kl, exp_remainder_bound, first_order_kl_closed_form, taylor_exp, taylor_softmax,
    ApproxConfig,
};
use crate::temperature::{mlt_temperature, radius_bound, radius_bound_bisection, TemperaturePolicy};

type Rng8 = ChaCha8Rng;

/// Error measure of one instance; the instance fails when it exceeds the
/// property's tolerance (or is NaN).
type Check = fn(&mut Rng8, bool) -> Result<f64>;

pub struct Property {
    pub name: &'static str,
    pub module: &'static str,
    pub tolerance: f64,
    check: Check,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub module: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub worst: f64,
    pub tolerance: f64,
    /// First library error raised by an instance, if any.
    pub error: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    /// Deliberately corrupts one check so that the suite must fail.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            inject_fault: false,
        }
    }
}

pub const PROPERTIES: &[Property] = &[
    Property { name: "zscore_standardized", module: "logit_core", tolerance: 1e-9, check: zscore_standardized },
    Property { name: "zscore_affine_invariant", module: "logit_core", tolerance: 1e-7, check: zscore_affine_invariant },
    Property { name: "softmax_temperature_scaling", module: "logit_core", tolerance: 1e-12, check: softmax_temperature_scaling },
    Property { name: "softmax_argmax_preserved", module: "logit_core", tolerance: 0.0, check: softmax_argmax_preserved },
    Property { name: "entropy_increasing_in_tau", module: "logit_core", tolerance: 0.0, check: entropy_increasing_in_tau },
    Property { name: "kl_gibbs_inequality", module: "logit_core", tolerance: 1e-9, check: kl_gibbs_inequality },
    Property { name: "correlation_matches_pearson", module: "logit_core", tolerance: 1e-9, check: correlation_matches_pearson },
    Property { name: "exp_remainder_dominance", module: "taylor_approx", tolerance: 0.0, check: exp_remainder_dominance },
    Property { name: "taylor_softmax_convergence", module: "taylor_approx", tolerance: 1e-6, check: taylor_softmax_convergence },
    Property { name: "taylor_softmax_normalized", module: "taylor_approx", tolerance: 1e-12, check: taylor_softmax_normalized },
    Property { name: "first_order_collapse", module: "taylor_approx", tolerance: 1e-9, check: first_order_collapse },
    Property { name: "correlation_limit_tau64", module: "taylor_approx", tolerance: 1e-3, check: correlation_limit_tau64 },
    Property { name: "closed_form_decreasing_in_tau", module: "taylor_approx", tolerance: 0.0, check: closed_form_decreasing_in_tau },
    Property { name: "radius_ratio", module: "temperature", tolerance: 1e-12, check: radius_ratio },
    Property { name: "radius_homogeneous_increasing", module: "temperature", tolerance: 1e-9, check: radius_homogeneous_increasing },
    Property { name: "mlt_within_bounds", module: "temperature", tolerance: 1e-12, check: mlt_within_bounds },
    Property { name: "bisection_matches_closed_forms", module: "temperature", tolerance: 1e-8, check: bisection_matches_closed_forms },
    Property { name: "mlt_depends_on_maxima_only", module: "temperature", tolerance: 0.0, check: mlt_depends_on_maxima_only },
    Property { name: "kd_loss_nonnegative", module: "kd_losses", tolerance: 1e-9, check: kd_loss_nonnegative },
    Property { name: "teacher_affine_invariance", module: "kd_losses", tolerance: 1e-6, check: teacher_affine_invariance },
    Property { name: "gradient_check", module: "kd_losses", tolerance: 1e-4, check: gradient_check },
    Property { name: "adaptive_tau_varies", module: "kd_losses", tolerance: 0.0, check: adaptive_tau_varies },
    Property { name: "kd_over_tau2_decreasing", module: "kd_losses", tolerance: 0.0, check: kd_over_tau2_decreasing },
];

pub fn property_seed(run_seed: u64, index: usize) -> u64 {
    run_seed ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn run_property(index: usize, opts: &VerifyOptions) -> PropertyResult {
    let p = &PROPERTIES[index];
    let mut rng = Rng8::seed_from_u64(property_seed(opts.seed, index));
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut error = None;
    for _ in 0..opts.samples {
        match (p.check)(&mut rng, opts.inject_fault) {
            Ok(e) => {
                if e.is_nan() || e > p.tolerance {
                    failures += 1;
                }
                worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
            }
            Err(err) => {
                failures += 1;
                error.get_or_insert_with(|| err.to_string());
            }
        }
    }
    PropertyResult {
        name: p.name,
        module: p.module,
        cases: opts.samples,
        failures,
        worst,
        tolerance: p.tolerance,
        error,
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<PropertyResult> {
    (0..PROPERTIES.len()).map(|i| run_property(i, opts)).collect()
}

pub fn render_table(results: &[PropertyResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<32} {:<14} {:>6} {:>8} {:>12} {:>10}  result",
        "property", "module", "cases", "failures", "worst", "tolerance"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<32} {:<14} {:>6} {:>8} {:>12.3e} {:>10.1e}  {}",
            r.name,
            r.module,
            r.cases,
            r.failures,
            r.worst,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if let Some(e) = &r.error {
            let _ = writeln!(s, "    first error: {e}");
        }
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    let _ = writeln!(s, "{} of {} properties passed", results.len() - failed, results.len());
    s
}

// ---- generators ----

const CLASS_COUNTS: [usize; 6] = [2, 3, 5, 10, 20, 100];

fn pick_k(rng: &mut Rng8) -> usize {
    *CLASS_COUNTS.choose(rng).expect("non-empty")
}

fn raw_values(rng: &mut Rng8, k: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.gen_range(-1.0..1.0));
    let offset = rng.gen_range(-5.0..5.0);
    (0..k).map(|_| offset + scale * standard_normal(rng)).collect()
}

fn raw_logits(rng: &mut Rng8, k: usize) -> LogitVector {
    loop {
        if let Ok(v) = LogitVector::new(raw_values(rng, k)) {
            if zscore(&v).is_ok() {
                return v;
            }
        }
    }
}

fn standardized(rng: &mut Rng8, k: usize) -> StandardizedLogits {
    zscore(&raw_logits(rng, k)).expect("generator yields nonconstant vectors")
}

fn flag(bad: bool) -> f64 {
    if bad {
        1.0
    } else {
        0.0
    }
}

// ---- logit_core ----

fn zscore_standardized(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let z = standardized(rng, k);
    let k = z.len() as f64;
    let mean = z.values().iter().sum::<f64>() / k;
    let var = z.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    Ok(mean.abs().max((var - 1.0).abs()))
}

fn zscore_affine_invariant(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let v = raw_logits(rng, k);
    let a = rng.gen_range(-3.0f64..3.0).exp();
    let b = rng.gen_range(-100.0..100.0);
    let w = LogitVector::new(v.values().iter().map(|x| a * x + b).collect())?;
    let (zv, zw) = (zscore(&v)?, zscore(&w)?);
    Ok(zv.values().iter().zip(zw.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn softmax_temperature_scaling(rng: &mut Rng8, fault: bool) -> Result<f64> {
    let k = pick_k(rng);
    let z = raw_values(rng, k);
    let tau = rng.gen_range(-2.0f64..3.0).exp();
    let direct = softmax_t(&z, Temperature::new(tau)?);
    let reference_tau = if fault { tau * 1.001 } else { tau };
    let scaled: Vec<f64> = z.iter().map(|v| v / reference_tau).collect();
    let reference = softmax_t(&scaled, Temperature::ONE);
    Ok(direct
        .probs()
        .iter()
        .zip(reference.probs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn softmax_argmax_preserved(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let z = raw_values(rng, k);
    let tau = rng.gen_range(-2.0f64..4.0).exp();
    Ok(flag(softmax_t(&z, Temperature::new(tau)?).argmax() != argmax(&z)))
}

fn entropy_increasing_in_tau(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let z = raw_logits(rng, k);
    let h: Vec<f64> = [1.0, 2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|&t| Ok(entropy(&softmax_t(z.values(), Temperature::new(t)?))))
        .collect::<Result<_>>()?;
    Ok(flag(h.windows(2).any(|w| w[1] <= w[0])))
}

fn random_distribution(rng: &mut Rng8, k: usize) -> Result<ProbabilityDistribution> {
    let raw = raw_values(rng, k);
    Ok(softmax_t(&raw, Temperature::ONE))
}

fn kl_gibbs_inequality(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let p = random_distribution(rng, k)?;
    let q = random_distribution(rng, k)?;
    let self_kl = kl_divergence(&p, &p, KlNorm::Sum)?;
    let cross = kl_divergence(&p, &q, KlNorm::Sum)?;
    let distinct = p.probs().iter().zip(q.probs()).any(|(a, b)| (a - b).abs() > 1e-6);
    // A distinct pair with zero divergence breaks the "only if" direction.
    let bad_zero = if distinct && cross <= 0.0 { 1.0 } else { 0.0 };
    Ok(self_kl.max(-cross).max(bad_zero))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn correlation_matches_pearson(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let (a, b) = (raw_logits(rng, k), raw_logits(rng, k));
    let rho = correlation(&zscore(&a)?, &zscore(&b)?)?;
    Ok((rho - pearson(a.values(), b.values())).abs())
}

// ---- taylor_approx ----

fn exp_remainder_dominance(rng: &mut Rng8, _: bool) -> Result<f64> {
    let z = f64::from(rng.gen_range(-4000i32..=4000)) / 1000.0;
    let n = rng.gen_range(0usize..=12);
    let gap = (z.exp() - taylor_exp(z, n)).abs();
    let allowance = 4.0 * f64::EPSILON * z.exp().max(1.0);
    Ok((gap - exp_remainder_bound(z, n) - allowance).max(0.0))
}

fn taylor_softmax_convergence(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..=2.0)).collect();
    let approx = taylor_softmax(&z, 20)?;
    let exact = softmax_t(&z, Temperature::ONE);
    Ok(approx
        .probs()
        .iter()
        .zip(exact.probs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn taylor_softmax_normalized(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let n = rng.gen_range(1usize..=12);
    Ok(match taylor_softmax(&z, n) {
        Ok(p) => (p.probs().iter().sum::<f64>() - 1.0).abs(),
        // Refusing a non-positive expansion is the documented outcome.
        Err(_) => 0.0,
    })
}

fn random_pair(rng: &mut Rng8, k: usize) -> (StandardizedLogits, StandardizedLogits) {
    (standardized(rng, k), standardized(rng, k))
}

fn first_order_collapse(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = *[5usize, 10, 100].choose(rng).expect("non-empty");
    let (zp, zq) = random_pair(rng, k);
    let tau = Temperature::new(1.5 * zp.max_abs().max(zq.max_abs()))?;
    let approx = approx_kl(&zp, &zq, tau, ApproxConfig::new(1, 1)?)?;
    let closed = first_order_kl_closed_form(&zp, &zq, tau)?;
    Ok((approx - closed).abs() / closed.abs().max(f64::MIN_POSITIVE))
}

fn correlation_limit_tau64(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = *[5usize, 10, 100].choose(rng).expect("non-empty");
    let (zp, zq) = random_pair(rng, k);
    let tau = Temperature::new(64.0)?;
    let limit = 1.0 - correlation(&zp, &zq)?;
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        for m in 1..=4 {
            let v = approx_kl(&zp, &zq, tau, ApproxConfig::new(n, m)?)?;
            worst = worst.max((k as f64 * 64.0 * 64.0 * v - limit).abs());
        }
    }
    Ok(worst)
}

fn closed_form_decreasing_in_tau(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng).max(3);
    let (zp, zq) = random_pair(rng, k);
    if correlation(&zp, &zq)? >= 1.0 {
        return Ok(0.0);
    }
    let mut taus: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0f64..4.0).exp()).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let vals: Vec<f64> = taus
        .iter()
        .map(|&t| first_order_kl_closed_form(&zp, &zq, Temperature::new(t)?))
        .collect::<Result<_>>()?;
    Ok(flag(vals.windows(2).any(|w| w[1] >= w[0])))
}

// ---- temperature ----

fn radius_ratio(rng: &mut Rng8, _: bool) -> Result<f64> {
    let m = rng.gen_range(-5.0f64..5.0).exp();
    let ratio = radius_bound(m, 2)? / radius_bound(m, 1)?;
    Ok((ratio - (1.0 + 3f64.sqrt()) / 2.0).abs())
}

fn radius_homogeneous_increasing(rng: &mut Rng8, _: bool) -> Result<f64> {
    let m = rng.gen_range(-3.0f64..3.0).exp();
    let c = rng.gen_range(-3.0f64..3.0).exp();
    let n = rng.gen_range(1usize..=6);
    let base = radius_bound(m, n)?;
    let scaled = radius_bound(c * m, n)?;
    let homogeneity = (scaled - c * base).abs() / (c * base);
    let increasing = radius_bound(m * 1.01, n)? > base;
    Ok(homogeneity.max(flag(!increasing)))
}

fn mlt_within_bounds(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let (zt, zs) = random_pair(rng, k);
    let a = rng.gen_range(1usize..=3);
    let tau = mlt_temperature(&zt, &zs, &TemperaturePolicy::max_logit(a))?.value();
    let cap = radius_bound(((k - 1) as f64).sqrt(), a)?;
    Ok(((tau - cap) / cap).max(0.0).max(flag(tau < 1.0)))
}

fn bisection_matches_closed_forms(rng: &mut Rng8, _: bool) -> Result<f64> {
    let m = rng.gen_range(-3.0f64..3.0).exp();
    let n = rng.gen_range(1usize..=2);
    Ok((radius_bound_bisection(m, n)? - radius_bound(m, n)?).abs())
}

/// Moves three non-maximal entries along the circle that keeps their sum and
/// sum of squares, so the vector stays standardized and its maximum is kept.
fn perturb_non_max(rng: &mut Rng8, z: &StandardizedLogits) -> Result<StandardizedLogits> {
    let v = z.values();
    let top = argmax(v);
    let mut others: Vec<usize> = (0..v.len()).filter(|&i| i != top).collect();
    if others.len() < 3 {
        return Ok(z.clone());
    }
    others.shuffle(rng);
    let idx = [others[0], others[1], others[2]];
    let x = [v[idx[0]], v[idx[1]], v[idx[2]]];
    let c = (x[0] + x[1] + x[2]) / 3.0;
    let d = [x[0] - c, x[1] - c, x[2] - c];
    // Rodrigues rotation about (1,1,1)/√3; d is orthogonal to the axis.
    let axis = 1.0 / 3f64.sqrt();
    for _ in 0..20 {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let cross = [
            axis * (d[2] - d[1]),
            axis * (d[0] - d[2]),
            axis * (d[1] - d[0]),
        ];
        let y: Vec<f64> = (0..3)
            .map(|i| c + d[i] * theta.cos() + cross[i] * theta.sin())
            .collect();
        if y.iter().all(|&yi| yi < v[top]) {
            let mut out = v.to_vec();
            for (i, &j) in idx.iter().enumerate() {
                out[j] = y[i];
            }
            if let Ok(s) = StandardizedLogits::from_standardized(out) {
                return Ok(s);
            }
        }
    }
    Ok(z.clone())
}

fn mlt_depends_on_maxima_only(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = *[5usize, 10, 20, 100].choose(rng).expect("non-empty");
    let (zt, zs) = random_pair(rng, k);
    let (pt, ps) = (perturb_non_max(rng, &zt)?, perturb_non_max(rng, &zs)?);
    let policy = TemperaturePolicy::max_logit(rng.gen_range(1usize..=3));
    let a = mlt_temperature(&zt, &zs, &policy)?.value();
    let b = mlt_temperature(&pt, &ps, &policy)?.value();
    Ok((a - b).abs())
}

// ---- kd_losses ----

fn kd_loss_nonnegative(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng);
    let (t, s) = (raw_logits(rng, k), raw_logits(rng, k));
    let tau = Temperature::new(rng.gen_range(0.5..8.0))?;
    let cross = kd_loss(&t, &s, tau)?;
    let a = rng.gen_range(-2.0f64..2.0).exp();
    let b = rng.gen_range(-10.0..10.0);
    let same = LogitVector::new(t.values().iter().map(|x| a * x + b).collect())?;
    let self_loss = kd_loss(&t, &same, tau)?;
    let distinct = zscore(&t)?
        .values()
        .iter()
        .zip(zscore(&s)?.values())
        .any(|(x, y)| (x - y).abs() > 1e-6);
    Ok(self_loss.max(-cross).max(flag(cross == 0.0 && distinct)))
}

struct Batch {
    teacher: Vec<LogitVector>,
    student: Vec<LogitVector>,
    labels: Vec<usize>,
}

impl Batch {
    fn random(rng: &mut Rng8, k: usize, b: usize) -> Self {
        Self {
            teacher: (0..b).map(|_| raw_logits(rng, k)).collect(),
            student: (0..b).map(|_| raw_logits(rng, k)).collect(),
            labels: (0..b).map(|_| rng.gen_range(0..k)).collect(),
        }
    }

    fn samples(&self) -> Vec<KdSample<'_>> {
        self.teacher
            .iter()
            .zip(&self.student)
            .zip(&self.labels)
            .map(|((t, s), &label)| KdSample {
                teacher: t,
                student: s,
                label,
            })
            .collect()
    }
}

fn teacher_affine_invariance(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng).max(3);
    let b = *[1usize, 8].choose(rng).expect("non-empty");
    let mut batch = Batch::random(rng, k, b);
    let weights = LossWeights::default();
    let policy = TemperaturePolicy::default();
    let before = combined_loss(&batch.samples(), &weights, &policy, KlNorm::Sum)?.total;
    let a = rng.gen_range(-3.0f64..3.0).exp();
    let shift = rng.gen_range(-50.0..50.0);
    batch.teacher = batch
        .teacher
        .iter()
        .map(|t| LogitVector::new(t.values().iter().map(|x| a * x + shift).collect()))
        .collect::<Result<_>>()?;
    let after = combined_loss(&batch.samples(), &weights, &policy, KlNorm::Sum)?.total;
    Ok((after - before).abs() / before.abs().max(f64::MIN_POSITIVE))
}

fn gradient_check(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = *[5usize, 10, 100].choose(rng).expect("non-empty");
    let b = *[1usize, 8].choose(rng).expect("non-empty");
    let mut batch = Batch::random(rng, k, b);
    let taus: Vec<f64> = (0..b).map(|_| rng.gen_range(1.0..5.0)).collect();
    let weights = LossWeights::new(rng.gen_range(0.0..1.0), rng.gen_range(0.5..10.0))?;
    let (loss, analytic) = combined_loss_with_taus(&batch.samples(), &weights, &taus, KlNorm::Sum)?;
    let h = 1e-5;
    // Cancellation in the difference quotient grows with the loss value.
    let floor = (1e-5 * loss.total.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for s in 0..b {
        for i in 0..k {
            let original = batch.student[s].values().to_vec();
            let mut eval = |delta: f64| -> Result<f64> {
                let mut v = original.clone();
                v[i] += delta;
                batch.student[s] = LogitVector::new(v)?;
                Ok(combined_loss_with_taus(&batch.samples(), &weights, &taus, KlNorm::Sum)?.0.total)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            batch.student[s] = LogitVector::new(original)?;
            let a = analytic[s][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    Ok(worst)
}

fn spiked(rng: &mut Rng8, k: usize) -> Result<LogitVector> {
    let mut v: Vec<f64> = (0..k).map(|_| 0.3 * standard_normal(rng)).collect();
    let top = rng.gen_range(0..k);
    v[top] += rng.gen_range(2.0..12.0);
    LogitVector::new(v)
}

fn adaptive_tau_varies(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = *[10usize, 20, 100].choose(rng).expect("non-empty");
    let teacher: Vec<LogitVector> = (0..8).map(|_| spiked(rng, k)).collect::<Result<_>>()?;
    let student: Vec<LogitVector> = (0..8).map(|_| raw_logits(rng, k)).collect();
    let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..k)).collect();
    let batch: Vec<KdSample<'_>> = teacher
        .iter()
        .zip(&student)
        .zip(&labels)
        .map(|((t, s), &label)| KdSample {
            teacher: t,
            student: s,
            label,
        })
        .collect();
    let out = combined_loss(&batch, &LossWeights::default(), &TemperaturePolicy::default(), KlNorm::Sum)?;
    let first = out.per_sample_tau[0];
    Ok(flag(out.per_sample_tau.iter().all(|&t| t == first)))
}

fn kd_over_tau2_decreasing(rng: &mut Rng8, _: bool) -> Result<f64> {
    let k = pick_k(rng).max(3);
    let (t, s) = (raw_logits(rng, k), raw_logits(rng, k));
    let (zt, zs) = (zscore(&t)?, zscore(&s)?);
    if correlation(&zt, &zs)? > 1.0 - 1e-9 {
        return Ok(0.0);
    }
    let bound = radius_bound(zt.max().max(zs.max()), 2)?;
    let vals: Vec<f64> = [1.0, 1.5, 2.0, 3.0, 5.0, 8.0]
        .iter()
        .map(|&c| {
            let tau = c * bound;
            Ok(kd_loss(&t, &s, Temperature::new(tau)?)? / (tau * tau))
        })
        .collect::<Result<_>>()?;
    Ok(flag(vals.windows(2).any(|w| w[1] >= w[0])))
}
