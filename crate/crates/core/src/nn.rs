//! Activations and the small dense building blocks: linear maps, layer
//! normalization and the gated linear unit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Anything owning trainable parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }
}

/// Implements [`Module`] by forwarding to same-named inherent methods.
macro_rules! forward_module {
    ($($t:ty),* $(,)?) => {
        $(impl $crate::nn::Module for $t {
            fn parameters(&self) -> Vec<&$crate::autodiff::Parameter> {
                <$t>::parameters(self)
            }
            fn parameters_mut(&mut self) -> Vec<&mut $crate::autodiff::Parameter> {
                <$t>::parameters_mut(self)
            }
        })*
    };
}
pub(crate) use forward_module;

forward_module!(LinearLayer, LayerNormBlock, GluBlock);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Silu,
    /// ELU with α = 1.
    Elu,
    Relu,
    Tanh,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and output `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Elementwise activation of a plain tensor.
pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub(crate) fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized")
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// Square orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub(crate) fn orthogonal(rng: &mut impl Rng, n: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    let mut data = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    Tensor::new(vec![n, n], data).expect("sized")
}

/// Affine map over the last axis: `x · W + b` with `W` of shape (in, out).
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl LinearLayer {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        LinearLayer {
            weight: Parameter::new(format!("{name}.weight"), glorot_uniform(rng, input, output)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    /// Builds a layer from explicit weights of shape (in, out) and bias (out).
    pub fn from_tensors(name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape(format!(
                "linear weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(LinearLayer {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = matmul_last_axis(tape, x, w)?;
        tape.add(y, b)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Multiplies the last axis of `x` by a rank-2 `w`, batching over the
/// leading axes.
pub fn matmul_last_axis(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (&last, lead) = shape
        .split_last()
        .ok_or_else(|| Error::shape("linear map of a scalar"))?;
    let w_shape = tape.shape(w);
    if w_shape.len() != 2 || w_shape[0] != last {
        return Err(Error::shape(format!(
            "input width {last} does not match weight {w_shape:?}"
        )));
    }
    let out = w_shape[1];
    if lead.len() == 1 {
        return tape.matmul(x, w);
    }
    let rows: usize = lead.iter().product();
    let flat = tape.reshape(x, &[rows, last])?;
    let y = tape.matmul(flat, w)?;
    let mut out_shape = lead.to_vec();
    out_shape.push(out);
    tape.reshape(y, &out_shape)
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNormBlock {
    pub gain: Parameter,
    pub shift: Parameter,
    pub eps: f64,
}

impl LayerNormBlock {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNormBlock {
            gain: Parameter::new(format!("{name}.gain"), Tensor::ones(&[dim])),
            shift: Parameter::new(format!("{name}.shift"), Tensor::zeros(&[dim])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.numel()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = self.dim();
        if shape.last() != Some(&d) {
            return Err(Error::shape(format!(
                "layer norm over {d} features got input {shape:?}"
            )));
        }
        let axis = shape.len() - 1;
        let mut keep = shape.clone();
        keep[axis] = 1;
        let mean = tape.reduce(x, ReduceKind::Mean, axis)?;
        let mean = tape.reshape(mean, &keep)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.square(centered);
        let var = tape.reduce(sq, ReduceKind::Mean, axis)?;
        let var = tape.reshape(var, &keep)?;
        let var = tape.add_scalar(var, self.eps);
        let std = tape.sqrt(var);
        let normed = tape.div(centered, std)?;
        let gain = tape.param(&self.gain);
        let shift = tape.param(&self.shift);
        let scaled = tape.mul(normed, gain)?;
        tape.add(scaled, shift)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.shift]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.shift]
    }
}

/// `σ(γ·W_gate + b_gate) ⊙ (γ·W_value + b_value)`.
#[derive(Clone, Debug)]
pub struct GluBlock {
    pub gate: LinearLayer,
    pub value: LinearLayer,
}

impl GluBlock {
    pub fn new(name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        GluBlock {
            gate: LinearLayer::new(&format!("{name}.gate"), dim, dim, rng),
            value: LinearLayer::new(&format!("{name}.value"), dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.gate.output_dim()
    }

    pub fn forward(&self, tape: &mut Tape, gamma: Var) -> Result<Var> {
        let g = self.gate.forward(tape, gamma)?;
        let g = tape.activation(g, Activation::Sigmoid);
        let v = self.value.forward(tape, gamma)?;
        tape.mul(g, v)
    }

    /// Pins the gate pre-activation to `bias` by zeroing the gate weights,
    /// e.g. a large negative value suppresses the block's output.
    pub fn force_gate(&mut self, bias: f64) {
        self.gate.weight.fill(0.0);
        self.gate.bias.fill(bias);
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.gate.parameters();
        p.extend(self.value.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.gate.parameters_mut();
        p.extend(self.value.parameters_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Elu.apply(3.0), 3.0);
        assert!((Activation::Elu.apply(-30.0) + 1.0).abs() < 1e-12);
        // σ(1) = 1/(1+e^{-1})
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((Activation::Silu.apply(1.0) - expected).abs() < 1e-15);
        assert!((Activation::Silu.apply(1.0) - 0.731059).abs() < 1e-6);
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn linear_zero_weights_gives_bias() {
        let layer = LinearLayer::from_tensors(
            "l",
            Tensor::zeros(&[3, 2]),
            Tensor::vector(vec![0.5, -1.0]),
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = layer.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn linear_identity_passes_through() {
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let layer = LinearLayer::from_tensors("l", eye, Tensor::zeros(&[3])).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn linear_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = LinearLayer::new("l", 3, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(layer.forward(&mut tape, x), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_hand_values() {
        let ln = LayerNormBlock::new("ln", 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = ln.forward(&mut tape, x).unwrap();
        // mean 2, population variance 2/3
        let s = (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        let expected = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in tape.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((tape.value(y).data()[2] - 1.22474).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_constant_row_and_zero_gain() {
        let mut ln = LayerNormBlock::new("ln", 4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4], 3.7));
        let y = ln.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        ln.gain.fill(0.0);
        ln.shift.set_value(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4], vec![5.0, -1.0, 2.0, 0.3]).unwrap());
        let y = ln.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn glu_zero_gate_halves_value_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut glu = GluBlock::new("glu", 3, &mut rng);
        glu.force_gate(0.0);
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 1.0, 0.0, -0.5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = glu.forward(&mut tape, xv).unwrap();
        let val = glu.value.forward(&mut tape, xv).unwrap();
        for (o, v) in tape.value(out).data().iter().zip(tape.value(val).data()) {
            assert!((o - 0.5 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn glu_suppressed_gate_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut glu = GluBlock::new("glu", 3, &mut rng);
        glu.force_gate(-20.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.5, -0.2, 1.1]).unwrap());
        let out = glu.forward(&mut tape, x).unwrap();
        assert!(tape.value(out).max_abs() < 1e-8);
    }

    #[test]
    fn orthogonal_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = orthogonal(&mut rng, 5);
        let qtq = crate::tensor::matmul(
            &Tensor::new(vec![5, 5], {
                let mut t = vec![0.0; 25];
                for i in 0..5 {
                    for j in 0..5 {
                        t[j * 5 + i] = q.at(&[i, j]);
                    }
                }
                t
            })
            .unwrap(),
            &q,
        )
        .unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.at(&[i, j]) - e).abs() < 1e-10);
            }
        }
    }
}
