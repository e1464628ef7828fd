//! Mixture layer: learnable input scaling, parallel experts, a gated residual
//! gate over a pooled projection, and a sigmoid-weighted sum of expert outputs.

use rand::Rng;

use crate::autodiff::{Parameter, ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::experts::{Expert, ExpertOutput};
use crate::gating::{Gating, GatingKind};
use crate::kan::GridConfig;
use crate::nn::{forward_module, Activation, LinearLayer};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MixtureLayer {
    /// Shaped like one input sample; starts at ones.
    pub input_weights: Parameter,
    pub experts: Vec<Expert>,
    /// Features (after optional time pooling) → number of experts.
    pub projection: LinearLayer,
    pub gating: Gating,
}

impl MixtureLayer {
    /// `sample_shape` is one input sample: `[features]` or `[steps, features]`.
    pub fn new(
        name: &str,
        sample_shape: &[usize],
        experts: Vec<Expert>,
        gating: GatingKind,
        grid: GridConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(Error::config("a mixture needs at least one expert"));
        };
        let out = first.output();
        if let Some(e) = experts.iter().find(|e| e.output() != out) {
            return Err(Error::config(format!(
                "experts disagree on output layout: {:?} vs {:?}",
                out,
                e.output()
            )));
        }
        let features = *sample_shape
            .last()
            .ok_or_else(|| Error::config("empty sample shape"))?;
        let expected_rank = if first.is_recurrent() { 2 } else { 1 };
        for e in &experts {
            if e.input_dim() != features || sample_shape.len() != expected_rank || e.is_recurrent() != first.is_recurrent() {
                return Err(Error::config(format!(
                    "{} expert with input width {} cannot consume samples of shape {sample_shape:?}",
                    e.kind_name(),
                    e.input_dim()
                )));
            }
        }
        let m = experts.len();
        Ok(MixtureLayer {
            input_weights: Parameter::new(format!("{name}.input_weights"), Tensor::ones(sample_shape)),
            projection: LinearLayer::new(&format!("{name}.projection"), features, m, rng),
            gating: Gating::new(gating, &format!("{name}.gating"), m, grid, rng)?,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.input_weights.shape()
    }

    pub fn output(&self) -> ExpertOutput {
        self.experts[0].output()
    }

    /// `x̃ = w ⊙ X`, broadcast over the batch axis.
    pub fn transform_inputs(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != self.sample_shape().len() + 1 || &shape[1..] != self.sample_shape() {
            return Err(Error::shape(format!(
                "mixture expects samples of shape {:?}, got batch {shape:?}",
                self.sample_shape()
            )));
        }
        let w = tape.param(&self.input_weights);
        tape.mul(x, w)
    }

    /// `a = σ(gating(Ψ(x̃)))`, shape (B, m).
    pub fn gate_weights(&self, tape: &mut Tape, x_tilde: Var) -> Result<Var> {
        let pooled = if tape.shape(x_tilde).len() == 3 {
            tape.reduce(x_tilde, ReduceKind::Mean, 1)?
        } else {
            x_tilde
        };
        let z = self.projection.forward(tape, pooled)?;
        let g = self.gating.forward(tape, z)?;
        Ok(tape.activation(g, Activation::Sigmoid))
    }

    /// Expert outputs stacked on a new axis 1: (B, m, …).
    pub fn stack_expert_outputs(&self, tape: &mut Tape, x_tilde: Var) -> Result<Var> {
        let outs = self
            .experts
            .iter()
            .map(|e| e.forward(tape, x_tilde))
            .collect::<Result<Vec<_>>>()?;
        tape.stack(&outs, 1)
    }

    /// Returns `(ŷ, a)`.
    pub fn forward_with_gates(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let x_tilde = self.transform_inputs(tape, x)?;
        let stacked = self.stack_expert_outputs(tape, x_tilde)?;
        let a = self.gate_weights(tape, x_tilde)?;
        let y = combine(tape, stacked, a)?;
        Ok((y, a))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_with_gates(tape, x).map(|(y, _)| y)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p = vec![&self.input_weights];
        for e in &self.experts {
            p.extend(e.parameters());
        }
        p.extend(self.projection.parameters());
        p.extend(self.gating.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = vec![&mut self.input_weights];
        for e in &mut self.experts {
            p.extend(e.parameters_mut());
        }
        p.extend(self.projection.parameters_mut());
        p.extend(self.gating.parameters_mut());
        p
    }
}

forward_module!(MixtureLayer);

/// `Σ_k a_k ỹ_k`, each scalar weight broadcast over the trailing axes.
fn combine(tape: &mut Tape, stacked: Var, a: Var) -> Result<Var> {
    let rank = tape.shape(stacked).len();
    let mut a_shape = tape.shape(a).to_vec();
    a_shape.resize(rank, 1);
    let a = tape.reshape(a, &a_shape)?;
    let weighted = tape.mul(stacked, a)?;
    tape.reduce(weighted, ReduceKind::Sum, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{LstmLayer, MlpExpert};
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mlp_mixture(rng: &mut ChaCha8Rng, m: usize, gating: GatingKind) -> MixtureLayer {
        let experts = (0..m)
            .map(|k| Expert::Mlp(MlpExpert::new(&format!("e{k}"), &[3, 2], Activation::Relu, rng).unwrap()))
            .collect();
        MixtureLayer::new("mix", &[3], experts, gating, GridConfig::default(), rng).unwrap()
    }

    /// Forces every gate pre-activation to `bias` irrespective of the input.
    fn force_gates(layer: &mut MixtureLayer, bias: f64) {
        layer.projection.weight.fill(0.0);
        layer.projection.bias.fill(0.0);
        let glu = layer.gating.glu_mut();
        glu.force_gate(-40.0);
        match &mut layer.gating {
            Gating::Grkan(b) => b.norm.shift.fill(bias),
            Gating::Grn(b) => b.norm.shift.fill(bias),
        }
    }

    #[test]
    fn identity_and_zero_input_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = mlp_mixture(&mut rng, 2, GatingKind::Grkan);
        let x = random(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let t = layer.transform_inputs(&mut tape, xv).unwrap();
        assert_eq!(tape.value(t), &x);
        layer.input_weights.fill(0.0);
        let t = layer.transform_inputs(&mut tape, xv).unwrap();
        assert!(tape.value(t).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(layer.transform_inputs(&mut tape, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn neutral_gate_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = mlp_mixture(&mut rng, 3, GatingKind::Grkan);
        force_gates(&mut layer, 0.0);
        let mut tape = Tape::new();
        let xv = tape.constant(random(&mut rng, &[5, 3]));
        let a = layer.gate_weights(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(a), &[5, 3]);
        assert!(tape.value(a).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn single_open_expert_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = mlp_mixture(&mut rng, 1, GatingKind::Grn);
        force_gates(&mut layer, 20.0);
        let mut tape = Tape::new();
        let xv = tape.constant(random(&mut rng, &[4, 3]));
        let y = layer.forward(&mut tape, xv).unwrap();
        let direct = layer.experts[0].forward(&mut tape, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(direct)).unwrap() < 1e-7);
    }

    #[test]
    fn closed_gates_suppress_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = mlp_mixture(&mut rng, 3, GatingKind::Grkan);
        force_gates(&mut layer, -20.0);
        let mut tape = Tape::new();
        let xv = tape.constant(random(&mut rng, &[4, 3]));
        let y = layer.forward(&mut tape, xv).unwrap();
        assert!(tape.value(y).max_abs() < 1e-7);
    }

    #[test]
    fn weighted_sum_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = mlp_mixture(&mut rng, 3, GatingKind::Grkan);
        let mut tape = Tape::new();
        let xv = tape.constant(random(&mut rng, &[4, 3]));
        let (y, a) = layer.forward_with_gates(&mut tape, xv).unwrap();
        let outs: Vec<Tensor> = layer
            .experts
            .iter()
            .map(|e| {
                let o = e.forward(&mut tape, xv).unwrap();
                tape.value(o).clone()
            })
            .collect();
        let (a, y) = (tape.value(a), tape.value(y));
        for b in 0..4 {
            for j in 0..2 {
                let expect: f64 = (0..3).map(|k| a.at(&[b, k]) * outs[k].at(&[b, j])).sum();
                assert!((y.at(&[b, j]) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_experts_scale_by_gate_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = mlp_mixture(&mut rng, 3, GatingKind::Grn);
        let template = layer.experts[0].clone();
        for e in layer.experts.iter_mut() {
            *e = template.clone();
        }
        let mut tape = Tape::new();
        let xv = tape.constant(random(&mut rng, &[4, 3]));
        let (y, a) = layer.forward_with_gates(&mut tape, xv).unwrap();
        let stacked = layer.stack_expert_outputs(&mut tape, xv).unwrap();
        let (a, y, s) = (tape.value(a), tape.value(y), tape.value(stacked));
        for b in 0..4 {
            let total: f64 = (0..3).map(|k| a.at(&[b, k])).sum();
            assert!(total > 0.0 && total < 3.0);
            for k in 1..3 {
                assert_eq!(s.at(&[b, k, 0]), s.at(&[b, 0, 0]));
            }
            for j in 0..2 {
                assert!((y.at(&[b, j]) - total * s.at(&[b, 0, j])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sequence_mixture_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let experts = (0..3)
            .map(|k| Expert::Lstm(LstmLayer::new(&format!("e{k}"), 2, 4, true, &mut rng)))
            .collect();
        let layer = MixtureLayer::new("mix", &[5, 2], experts, GatingKind::Grkan, GridConfig::default(), &mut rng).unwrap();
        assert_eq!(layer.input_weights.shape(), &[5, 2]);
        let mut tape = Tape::new();
        let xv = tape.constant(random(&mut rng, &[3, 5, 2]));
        let stacked = layer.stack_expert_outputs(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(stacked), &[3, 3, 5, 4]);
        let (y, a) = layer.forward_with_gates(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(y), &[3, 5, 4]);
        assert_eq!(tape.shape(a), &[3, 3]);
        let av = tape.value(a);
        assert!(av.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mismatched_experts_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let experts = vec![
            Expert::Mlp(MlpExpert::new("a", &[3, 2], Activation::Relu, &mut rng).unwrap()),
            Expert::Mlp(MlpExpert::new("b", &[3, 4], Activation::Relu, &mut rng).unwrap()),
        ];
        let r = MixtureLayer::new("mix", &[3], experts, GatingKind::Grn, GridConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = MixtureLayer::new("mix", &[3], vec![], GatingKind::Grn, GridConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn parameters_cover_every_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = mlp_mixture(&mut rng, 2, GatingKind::Grn);
        let names: Vec<&str> = Module::parameters(&layer).iter().map(|p| p.name()).collect();
        assert_eq!(names[0], "mix.input_weights");
        assert!(names.contains(&"mix.projection.weight"));
        assert!(names.iter().any(|n| n.starts_with("mix.gating.glu")));
    }
}
