//! Fully connected network with a hand-written backward pass.

use std::fmt::Debug;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Scalar type of a network's parameters.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Little-endian bytes of the value, for checksums.
    fn le_bytes(self) -> Vec<u8>;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Input width, hidden widths, then the class count.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self {
            layer_widths,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer widths must be >= 1, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Row-major dense matrix; rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} values", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    expected: format!("{cols} columns"),
                    got: format!("{} columns", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

/// One affine layer. `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(x.rows(), self.outputs);
        for b in 0..x.rows() {
            let xin = x.row(b);
            let yrow = out.row_mut(b);
            for (o, y) in yrow.iter_mut().enumerate() {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let mut acc = self.bias[o];
                for (wi, xi) in w.iter().zip(xin) {
                    acc = acc + *wi * *xi;
                }
                *y = acc;
            }
        }
        out
    }
}

/// Parameter gradients, laid out like [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Activations kept for the backward pass: the network input followed by the
/// output of every layer (the last entry holds the logits).
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    activations: Vec<Matrix<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn logits(&self) -> &Matrix<T> {
        self.activations.last().expect("cache always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    layers: Vec<Dense<T>>,
}

impl<T: Real> Mlp<T> {
    /// Uniform He-style initialization, `W ~ U(−√(6/fan_in), √(6/fan_in))`,
    /// zero biases. Each weight is `(2u − 1)·limit` with `u = rng.gen::<f64>()`
    /// from `ChaCha8Rng::seed_from_u64(spec.seed)`, layer by layer, row-major.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let limit = (6.0 / inputs as f64).sqrt();
                let weights = (0..inputs * outputs)
                    .map(|_| T::from_f64((2.0 * rng.gen::<f64>() - 1.0) * limit))
                    .collect();
                Dense {
                    inputs,
                    outputs,
                    weights,
                    bias: vec![T::zero(); outputs],
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Rebuilds a model from parameters in [`Mlp::parameters`] order.
    pub fn from_parameters(spec: &MlpSpec, params: &[T]) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", spec.param_count()),
                got: format!("{} parameters", params.len()),
            });
        }
        let mut offset = 0;
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let weights = params[offset..offset + inputs * outputs].to_vec();
                offset += inputs * outputs;
                let bias = params[offset..offset + outputs].to_vec();
                offset += outputs;
                Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// First 8 bytes (little-endian) of the SHA-256 of the parameters'
    /// little-endian encoding.
    pub fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        for p in self.parameters() {
            hasher.update(p.le_bytes());
        }
        let digest = hasher.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(head)
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        let params: Vec<U> = self.parameters().into_iter().map(|p| U::from_f64(p.to_f64())).collect();
        Mlp::from_parameters(&self.spec, &params).expect("same spec")
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.rows() > 0 && x.cols() != self.spec.inputs() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input features", self.spec.inputs()),
                got: format!("{}", x.cols()),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Matrix<T>) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(activations.last().expect("non-empty"));
            if i != last {
                y.data.iter_mut().for_each(|v| *v = self.spec.activation.apply(*v));
            }
            activations.push(y);
        }
        Ok(ForwardCache { activations })
    }

    /// Logits for a batch of inputs (`B × D`); the last layer is linear.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() == 0 {
            return Ok(Matrix::zeros(0, self.spec.outputs()));
        }
        Ok(self.forward_cached(x)?.activations.pop().expect("non-empty"))
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Matrix<T>) -> Result<Gradients<T>> {
        let logits = cache.logits();
        if grad_logits.rows() != logits.rows() || grad_logits.cols() != logits.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} logit gradients", logits.rows(), logits.cols()),
                got: format!("{}x{}", grad_logits.rows(), grad_logits.cols()),
            });
        }
        let mut grads: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[l];
            let mut gw = vec![T::zero(); layer.weights.len()];
            let mut gb = vec![T::zero(); layer.outputs];
            for b in 0..delta.rows() {
                let d = delta.row(b);
                let x = input.row(b);
                for (o, &dv) in d.iter().enumerate() {
                    gb[o] = gb[o] + dv;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, &xi) in row.iter_mut().zip(x) {
                        *g = *g + dv * xi;
                    }
                }
            }
            grads.push((gw, gb));
            if l > 0 {
                let mut prev = Matrix::zeros(delta.rows(), layer.inputs);
                for b in 0..delta.rows() {
                    let d = delta.row(b);
                    let p = prev.row_mut(b);
                    for (o, &dv) in d.iter().enumerate() {
                        let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (pi, &wi) in p.iter_mut().zip(w) {
                            *pi = *pi + dv * wi;
                        }
                    }
                    for (pi, &a) in p.iter_mut().zip(input.row(b)) {
                        *pi = *pi * self.spec.activation.derivative_from_output(a);
                    }
                }
                delta = prev;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}
