//! Parameter gradients of the full network under the distillation objective,
//! checked against central differences.

use mltkd::kd_losses::{combined_loss_with_taus, KdSample, LossWeights};
use mltkd::logit_core::{KlNorm, LogitVector};
use mltkd::nn_harness::{Activation, Matrix, Mlp, MlpSpec, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Problem {
    inputs: Vec<Vec<f64>>,
    teacher: Vec<LogitVector>,
    labels: Vec<usize>,
    taus: Vec<f64>,
}

fn problem(seed: u64, batch: usize, dims: usize, classes: usize) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..batch)
        .map(|_| (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let teacher = (0..batch)
        .map(|_| LogitVector::new((0..classes).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap())
        .collect();
    let labels = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let taus = (0..batch).map(|_| rng.gen_range(1.0..4.0)).collect();
    Problem {
        inputs,
        teacher,
        labels,
        taus,
    }
}

/// Loss in 64-bit and its gradient w.r.t. every parameter.
fn loss_and_grad<T: Real>(model: &Mlp<T>, p: &Problem, with_grad: bool) -> (f64, Vec<f64>) {
    let rows: Vec<Vec<T>> = p
        .inputs
        .iter()
        .map(|r| r.iter().map(|&v| T::from_f64(v)).collect())
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let cache = model.forward_cached(&x).unwrap();
    let students: Vec<LogitVector> = (0..x.rows())
        .map(|i| LogitVector::new(cache.logits().row(i).iter().map(|v| Real::to_f64(*v)).collect()).unwrap())
        .collect();
    let batch: Vec<KdSample<'_>> = students
        .iter()
        .zip(&p.teacher)
        .zip(&p.labels)
        .map(|((s, t), &label)| KdSample {
            teacher: t,
            student: s,
            label,
        })
        .collect();
    let (loss, grads) =
        combined_loss_with_taus(&batch, &LossWeights::new(0.5, 2.0).unwrap(), &p.taus, KlNorm::Sum).unwrap();
    if !with_grad {
        return (loss.total, Vec::new());
    }
    let flat: Vec<T> = grads.iter().flatten().map(|&g| T::from_f64(g)).collect();
    let upstream = Matrix::from_vec(grads.len(), grads[0].len(), flat).unwrap();
    let g = model.backward(&cache, &upstream).unwrap();
    (loss.total, g.flatten().into_iter().map(Real::to_f64).collect())
}

fn loss_at<T: Real>(model: &Mlp<T>, p: &Problem, params: &[T], i: usize, delta: f64) -> f64 {
    let mut shifted = params.to_vec();
    shifted[i] = shifted[i] + T::from_f64(delta);
    loss_and_grad(&Mlp::from_parameters(model.spec(), &shifted).unwrap(), p, false).0
}

/// Central difference `(L(θ+h) − L(θ−h)) / 2h`.
fn numeric_grad<T: Real>(model: &Mlp<T>, p: &Problem, h: f64) -> Vec<f64> {
    let params = model.parameters();
    (0..params.len())
        .map(|i| (loss_at(model, p, &params, i, h) - loss_at(model, p, &params, i, -h)) / (2.0 * h))
        .collect()
}

fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn spec(seed: u64) -> MlpSpec {
    MlpSpec::new(vec![4, 6, 5, 3], Activation::Tanh, seed)
}

#[test]
fn full_model_gradient_f64() {
    for seed in 0..5 {
        let p = problem(seed, 4, 4, 3);
        let model = Mlp::<f64>::init(&spec(seed)).unwrap();
        let (_, analytic) = loss_and_grad(&model, &p, true);
        let numeric = numeric_grad(&model, &p, 1e-5);
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-5, "seed {seed}: max relative error {err:e}");
    }
}

/// The 32-bit backward pass against differences of the same parameters taken
/// in 64-bit, where the difference quotient itself is trustworthy.
#[test]
fn full_model_gradient_f32() {
    for seed in 0..5 {
        let p = problem(seed, 4, 4, 3);
        let model = Mlp::<f32>::init(&spec(seed)).unwrap();
        let (_, analytic) = loss_and_grad(&model, &p, true);
        let numeric = numeric_grad(&model.cast::<f64>(), &p, 1e-5);
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-3, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn relu_model_gradient_f64() {
    for seed in 0..3 {
        let p = problem(seed + 10, 3, 4, 3);
        let model = Mlp::<f64>::init(&MlpSpec::new(vec![4, 8, 3], Activation::Relu, seed)).unwrap();
        let (_, analytic) = loss_and_grad(&model, &p, true);
        let numeric = numeric_grad(&model, &p, 1e-6);
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-5, "seed {seed}: max relative error {err:e}");
    }
}
