//! Central finite-difference gradient checking.
//!
//! The checked scalar is `Σ f(inputs) ⊙ R` for a fixed random `R`, so every
//! output entry contributes with a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::Module;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `input0[3]` or `layer.weight[5]`.
    pub worst: String,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn weighted_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn evaluate<M: Module>(
    model: &M,
    inputs: &[Tensor],
    weights: &Tensor,
    forward: &impl Fn(&M, &mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = forward(model, &mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, out, weights)?;
    tape.value(loss).item()
}

/// Compares analytic gradients with central differences for every input entry
/// and every parameter entry of `model`.
pub fn check<M: Module>(
    model: &mut M,
    inputs: &[Tensor],
    forward: impl Fn(&M, &mut Tape, &[Var]) -> Result<Var>,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = forward(model, &mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let loss = weighted_loss(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let analytic_inputs: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros_like(t)))
        .collect();
    let analytic_params: Vec<Tensor> = model
        .parameters()
        .iter()
        .map(|p| grads.param(p.id()).cloned().unwrap_or_else(|| Tensor::zeros_like(p.value())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let record = |report: &mut GradCheckReport, a: f64, num: f64, label: String| {
        let e = relative_error(a, num);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = label;
        }
    };

    let mut perturbed = inputs.to_vec();
    for (i, analytic) in analytic_inputs.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + eps;
            let up = evaluate(model, &perturbed, &weights, &forward)?;
            perturbed[i].data_mut()[j] = orig - eps;
            let down = evaluate(model, &perturbed, &weights, &forward)?;
            perturbed[i].data_mut()[j] = orig;
            record(&mut report, analytic.data()[j], (up - down) / (2.0 * eps), format!("input{i}[{j}]"));
        }
    }

    for (pi, analytic) in analytic_params.iter().enumerate() {
        for j in 0..analytic.len() {
            let orig = model.parameters()[pi].value().data()[j];
            model.parameters_mut()[pi].values_mut()[j] = orig + eps;
            let up = evaluate(model, inputs, &weights, &forward)?;
            model.parameters_mut()[pi].values_mut()[j] = orig - eps;
            let down = evaluate(model, inputs, &weights, &forward)?;
            model.parameters_mut()[pi].values_mut()[j] = orig;
            let label = format!("{}[{j}]", model.parameters()[pi].name());
            record(&mut report, analytic.data()[j], (up - down) / (2.0 * eps), label);
        }
    }
    Ok(report)
}

/// Wraps a parameter-free computation so it can be checked with [`check`].
pub struct NoParams;

impl Module for NoParams {
    fn parameters(&self) -> Vec<&crate::autodiff::Parameter> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut crate::autodiff::Parameter> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ReduceKind;
    use crate::nn::{Activation, LinearLayer};

    #[test]
    fn primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sample = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        };
        let inputs = vec![sample(&[3, 4]), sample(&[4]), sample(&[4, 2])];
        let report = check(
            &mut NoParams,
            &inputs,
            |_, t, v| {
                let a = t.mul(v[0], v[1])?;
                let a = t.activation(a, Activation::Tanh);
                let b = t.matmul(a, v[2])?;
                let e = t.exp(b);
                let sq = t.square(v[0]);
                let s = t.add_scalar(sq, 1.0);
                let s = t.sqrt(s);
                let m = t.reduce(s, ReduceKind::Mean, 1)?;
                let m = t.reshape(m, &[3, 1])?;
                t.div(e, m)
            },
            DEFAULT_EPS,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.checked, 12 + 4 + 8);
    }

    #[test]
    fn relative_error_scale() {
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn linear_layer_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = LinearLayer::new("l", 3, 2, &mut rng);
        layer.bias.values_mut().copy_from_slice(&[0.3, -0.2]);
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.8, 1.2, 0.5, -0.9]).unwrap();
        let report = check(&mut layer, &[x], |l, t, v| l.forward(t, v[0]), DEFAULT_EPS, 3).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.checked, 6 + 6 + 2);
    }
}
