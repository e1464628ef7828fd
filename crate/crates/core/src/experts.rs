//! Expert functions: dense and KAN stacks for tabular inputs, GRU and LSTM
//! layers for sequences.

use rand::Rng;

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::kan::{GridConfig, KanLinearLayer};
use crate::nn::{forward_module, glorot_uniform, matmul_last_axis, orthogonal, Activation, LinearLayer, Module};
use crate::tensor::Tensor;

/// Dense layers with ReLU between them; `output_activation` follows the last.
#[derive(Clone, Debug)]
pub struct MlpExpert {
    pub layers: Vec<LinearLayer>,
    pub output_activation: Activation,
}

impl MlpExpert {
    /// `widths` lists every width from input to output.
    pub fn new(name: &str, widths: &[usize], output_activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP expert needs at least one layer"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(&format!("{name}.layer{i}"), w[0], w[1], rng))
            .collect();
        Ok(MlpExpert {
            layers,
            output_activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            let act = if i == last { self.output_activation } else { Activation::Relu };
            if act != Activation::Identity {
                h = tape.activation(h, act);
            }
        }
        Ok(h)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }
}

/// KAN layers chained without any activation in between.
#[derive(Clone, Debug)]
pub struct KanExpert {
    pub layers: Vec<KanLinearLayer>,
}

impl KanExpert {
    pub fn new(name: &str, widths: &[usize], grid: GridConfig, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("a KAN expert needs at least one layer"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| KanLinearLayer::new(&format!("{name}.layer{i}"), w[0], w[1], grid, Activation::Silu, rng))
            .collect::<Result<_>>()?;
        Ok(KanExpert { layers })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(tape, h))
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }
}

/// Input kernel, recurrent kernel and bias of one recurrent gate.
#[derive(Clone, Debug)]
pub struct GateWeights {
    pub kernel: Parameter,
    pub recurrent: Parameter,
    pub bias: Parameter,
}

impl GateWeights {
    fn new(name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GateWeights {
            kernel: Parameter::new(format!("{name}.kernel"), glorot_uniform(rng, input, hidden)),
            recurrent: Parameter::new(format!("{name}.recurrent"), orthogonal(rng, hidden)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[hidden])),
        }
    }

    fn input_dim(&self) -> usize {
        self.kernel.shape()[0]
    }

    fn hidden_dim(&self) -> usize {
        self.kernel.shape()[1]
    }

    /// `x · W + b` for every time step at once.
    fn project(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.kernel);
        let b = tape.param(&self.bias);
        let y = matmul_last_axis(tape, x, w)?;
        tape.add(y, b)
    }

    fn recur(&self, tape: &mut Tape, projected: Var, h: Var) -> Result<Var> {
        let u = tape.param(&self.recurrent);
        let r = tape.matmul(h, u)?;
        tape.add(projected, r)
    }

    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.kernel, &self.recurrent, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.kernel, &mut self.recurrent, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct GruWeights {
    pub update: GateWeights,
    pub reset: GateWeights,
    pub candidate: GateWeights,
}

#[derive(Clone, Debug)]
pub struct LstmWeights {
    pub input: GateWeights,
    pub forget: GateWeights,
    pub output: GateWeights,
    pub cell: GateWeights,
}

fn gru_step(tape: &mut Tape, w: &GruWeights, xz: Var, xr: Var, xh: Var, h_prev: Var) -> Result<Var> {
    let z = w.update.recur(tape, xz, h_prev)?;
    let z = tape.activation(z, Activation::Sigmoid);
    let r = w.reset.recur(tape, xr, h_prev)?;
    let r = tape.activation(r, Activation::Sigmoid);
    let rh = tape.mul(r, h_prev)?;
    let cand = w.candidate.recur(tape, xh, rh)?;
    let cand = tape.activation(cand, Activation::Tanh);
    // (1 − z)⊙h_prev + z⊙h̃
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, delta)?;
    tape.add(h_prev, step)
}

fn lstm_step(tape: &mut Tape, w: &LstmWeights, xs: [Var; 4], h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let [xi, xf, xo, xc] = xs;
    let i = w.input.recur(tape, xi, h_prev)?;
    let i = tape.activation(i, Activation::Sigmoid);
    let f = w.forget.recur(tape, xf, h_prev)?;
    let f = tape.activation(f, Activation::Sigmoid);
    let o = w.output.recur(tape, xo, h_prev)?;
    let o = tape.activation(o, Activation::Sigmoid);
    let g = w.cell.recur(tape, xc, h_prev)?;
    let g = tape.activation(g, Activation::Tanh);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.activation(c, Activation::Tanh);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// One GRU step on a raw input `x_t` of shape (B, in).
pub fn gru_cell(tape: &mut Tape, x_t: Var, h_prev: Var, w: &GruWeights) -> Result<Var> {
    let xz = w.update.project(tape, x_t)?;
    let xr = w.reset.project(tape, x_t)?;
    let xh = w.candidate.project(tape, x_t)?;
    gru_step(tape, w, xz, xr, xh, h_prev)
}

/// One LSTM step on a raw input `x_t` of shape (B, in); returns `(h_t, c_t)`.
pub fn lstm_cell(tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let xs = [
        w.input.project(tape, x_t)?,
        w.forget.project(tape, x_t)?,
        w.output.project(tape, x_t)?,
        w.cell.project(tape, x_t)?,
    ];
    lstm_step(tape, w, xs, h_prev, c_prev)
}

fn sequence_dims(tape: &Tape, x: Var, input: usize, what: &str) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [b, s, f] if f == input && s > 0 => Ok((b, s)),
        ref other => Err(Error::shape(format!(
            "{what} expects (batch, steps>0, {input}), got {other:?}"
        ))),
    }
}

fn finish(tape: &mut Tape, states: Vec<Var>, return_sequences: bool) -> Result<Var> {
    if return_sequences {
        tape.stack(&states, 1)
    } else {
        Ok(*states.last().expect("at least one step"))
    }
}

#[derive(Clone, Debug)]
pub struct GruLayer {
    pub weights: GruWeights,
    pub return_sequences: bool,
}

impl GruLayer {
    pub fn new(name: &str, input: usize, hidden: usize, return_sequences: bool, rng: &mut impl Rng) -> Self {
        GruLayer {
            weights: GruWeights {
                update: GateWeights::new(&format!("{name}.update"), input, hidden, rng),
                reset: GateWeights::new(&format!("{name}.reset"), input, hidden, rng),
                candidate: GateWeights::new(&format!("{name}.candidate"), input, hidden, rng),
            },
            return_sequences,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.update.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.update.hidden_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (batch, steps) = sequence_dims(tape, x, self.input_dim(), "GRU layer")?;
        let w = &self.weights;
        let pz = w.update.project(tape, x)?;
        let pr = w.reset.project(tape, x)?;
        let ph = w.candidate.project(tape, x)?;
        let mut h = tape.constant(Tensor::zeros(&[batch, self.hidden_dim()]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xz = tape.select(pz, 1, t)?;
            let xr = tape.select(pr, 1, t)?;
            let xh = tape.select(ph, 1, t)?;
            h = gru_step(tape, w, xz, xr, xh, h)?;
            states.push(h);
        }
        finish(tape, states, self.return_sequences)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let w = &self.weights;
        [&w.update, &w.reset, &w.candidate].into_iter().flat_map(GateWeights::parameters).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let w = &mut self.weights;
        [&mut w.update, &mut w.reset, &mut w.candidate]
            .into_iter()
            .flat_map(GateWeights::parameters_mut)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub weights: LstmWeights,
    pub return_sequences: bool,
}

impl LstmLayer {
    pub fn new(name: &str, input: usize, hidden: usize, return_sequences: bool, rng: &mut impl Rng) -> Self {
        LstmLayer {
            weights: LstmWeights {
                input: GateWeights::new(&format!("{name}.input"), input, hidden, rng),
                forget: GateWeights::new(&format!("{name}.forget"), input, hidden, rng),
                output: GateWeights::new(&format!("{name}.output"), input, hidden, rng),
                cell: GateWeights::new(&format!("{name}.cell"), input, hidden, rng),
            },
            return_sequences,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.input.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.input.hidden_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (batch, steps) = sequence_dims(tape, x, self.input_dim(), "LSTM layer")?;
        let w = &self.weights;
        let proj = [
            w.input.project(tape, x)?,
            w.forget.project(tape, x)?,
            w.output.project(tape, x)?,
            w.cell.project(tape, x)?,
        ];
        let zeros = Tensor::zeros(&[batch, self.hidden_dim()]);
        let mut h = tape.constant(zeros.clone());
        let mut c = tape.constant(zeros);
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xs = [
                tape.select(proj[0], 1, t)?,
                tape.select(proj[1], 1, t)?,
                tape.select(proj[2], 1, t)?,
                tape.select(proj[3], 1, t)?,
            ];
            (h, c) = lstm_step(tape, w, xs, h, c)?;
            states.push(h);
        }
        finish(tape, states, self.return_sequences)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let w = &self.weights;
        [&w.input, &w.forget, &w.output, &w.cell]
            .into_iter()
            .flat_map(GateWeights::parameters)
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let w = &mut self.weights;
        [&mut w.input, &mut w.forget, &mut w.output, &mut w.cell]
            .into_iter()
            .flat_map(GateWeights::parameters_mut)
            .collect()
    }
}

forward_module!(MlpExpert, KanExpert, GruLayer, LstmLayer);

/// Output layout an expert produces, used to check mixture compatibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertOutput {
    pub width: usize,
    pub sequence: bool,
}

#[derive(Clone, Debug)]
pub enum Expert {
    Mlp(MlpExpert),
    Kan(KanExpert),
    Gru(GruLayer),
    Lstm(LstmLayer),
}

impl Expert {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Expert::Mlp(e) => e.forward(tape, x),
            Expert::Kan(e) => e.forward(tape, x),
            Expert::Gru(e) => e.forward(tape, x),
            Expert::Lstm(e) => e.forward(tape, x),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Expert::Mlp(e) => e.input_dim(),
            Expert::Kan(e) => e.input_dim(),
            Expert::Gru(e) => e.input_dim(),
            Expert::Lstm(e) => e.input_dim(),
        }
    }

    pub fn output(&self) -> ExpertOutput {
        match self {
            Expert::Mlp(e) => ExpertOutput { width: e.output_dim(), sequence: false },
            Expert::Kan(e) => ExpertOutput { width: e.output_dim(), sequence: false },
            Expert::Gru(e) => ExpertOutput { width: e.hidden_dim(), sequence: e.return_sequences },
            Expert::Lstm(e) => ExpertOutput { width: e.hidden_dim(), sequence: e.return_sequences },
        }
    }

    /// Whether the expert consumes (B, s, features) rather than (B, features).
    pub fn is_recurrent(&self) -> bool {
        matches!(self, Expert::Gru(_) | Expert::Lstm(_))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Expert::Mlp(_) => "mlp",
            Expert::Kan(_) => "kan",
            Expert::Gru(_) => "gru",
            Expert::Lstm(_) => "lstm",
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Expert::Mlp(e) => e.parameters(),
            Expert::Kan(e) => e.parameters(),
            Expert::Gru(e) => e.parameters(),
            Expert::Lstm(e) => e.parameters(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Expert::Mlp(e) => e.parameters_mut(),
            Expert::Kan(e) => e.parameters_mut(),
            Expert::Gru(e) => e.parameters_mut(),
            Expert::Lstm(e) => e.parameters_mut(),
        }
    }
}

forward_module!(Expert);

/// Total number of scalar parameters.
pub fn count_parameters(model: &(impl Module + ?Sized)) -> usize {
    model.parameters().iter().map(|p| p.numel()).sum()
}
