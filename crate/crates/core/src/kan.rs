//! B-spline Kolmogorov-Arnold layers.
//!
//! Each input feature is expanded in a B-spline basis over a uniform grid
//! extended by `spline_order` knots on both sides; every (input, output) edge
//! owns one coefficient per basis function, plus a scalar weight on a fixed
//! base activation of the input.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, matmul_last_axis, normal, Activation};
use crate::tensor::Tensor;

/// Grid settings as they appear in configuration files and model manifests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub grid_size: usize,
    pub spline_order: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            grid_size: 5,
            spline_order: 3,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

/// Uniform knot vector of length `G + 2k + 1` covering `[lo, hi]` plus `k`
/// extension intervals on each side.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    config: GridConfig,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(config: GridConfig) -> Result<Self> {
        let GridConfig {
            grid_size,
            spline_order,
            lo,
            hi,
        } = config;
        if grid_size < 1 {
            return Err(Error::config("grid_size must be at least 1"));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("invalid spline domain [{lo}, {hi}]")));
        }
        let h = (hi - lo) / grid_size as f64;
        let k = spline_order as f64;
        let knots = (0..grid_size + 2 * spline_order + 1)
            .map(|j| lo + (j as f64 - k) * h)
            .collect();
        Ok(SplineGrid { config, knots })
    }

    /// Builds a grid from signed sizes, rejecting negative orders.
    pub fn from_signed(grid_size: i64, spline_order: i64, lo: f64, hi: f64) -> Result<Self> {
        if spline_order < 0 {
            return Err(Error::config("spline_order must be non-negative"));
        }
        if grid_size < 1 {
            return Err(Error::config("grid_size must be at least 1"));
        }
        SplineGrid::new(GridConfig {
            grid_size: grid_size as usize,
            spline_order: spline_order as usize,
            lo,
            hi,
        })
    }

    pub fn config(&self) -> GridConfig {
        self.config
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn grid_size(&self) -> usize {
        self.config.grid_size
    }

    pub fn order(&self) -> usize {
        self.config.spline_order
    }

    /// Basis functions per input: `G + k`.
    pub fn num_basis(&self) -> usize {
        self.config.grid_size + self.config.spline_order
    }

    /// Order-`p` basis values for every function the knot vector supports,
    /// written to the front of `scratch` (length `knots - 1 - p`).
    fn cox_de_boor(&self, x: f64, p: usize, scratch: &mut Vec<f64>) {
        let t = &self.knots;
        let intervals = t.len() - 1;
        scratch.clear();
        scratch.resize(intervals, 0.0);
        // The right end of the domain belongs to the last in-domain interval.
        if x == self.config.hi {
            scratch[self.num_basis() - 1] = 1.0;
        } else {
            for i in 0..intervals {
                if t[i] <= x && x < t[i + 1] {
                    scratch[i] = 1.0;
                    break;
                }
            }
        }
        for q in 1..=p {
            for i in 0..intervals - q {
                let left = (x - t[i]) / (t[i + q] - t[i]) * scratch[i];
                let right = (t[i + q + 1] - x) / (t[i + q + 1] - t[i + 1]) * scratch[i + 1];
                scratch[i] = left + right;
            }
            scratch[intervals - q] = 0.0;
        }
    }

    /// Writes the `G + k` basis values at `x` into `out`.
    pub fn basis_into(&self, x: f64, out: &mut [f64]) {
        let mut scratch = Vec::with_capacity(self.knots.len());
        self.cox_de_boor(x, self.order(), &mut scratch);
        out.copy_from_slice(&scratch[..self.num_basis()]);
    }

    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis()];
        self.basis_into(x, &mut out);
        out
    }

    /// Derivative of each basis function at `x`.
    pub fn basis_derivative_into(&self, x: f64, out: &mut [f64]) {
        let k = self.order();
        if k == 0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let mut lower = Vec::with_capacity(self.knots.len());
        self.cox_de_boor(x, k - 1, &mut lower);
        let t = &self.knots;
        let kf = k as f64;
        for (i, o) in out.iter_mut().enumerate() {
            *o = kf * lower[i] / (t[i + k] - t[i]) - kf * lower[i + 1] / (t[i + k + 1] - t[i + 1]);
        }
    }

    /// Evaluates the basis at every entry of `x`, appending an axis of
    /// length `G + k`.
    pub fn basis_tensor(&self, x: &Tensor) -> Tensor {
        let nb = self.num_basis();
        let mut data = vec![0.0; x.len() * nb];
        let mut scratch = Vec::with_capacity(self.knots.len());
        for (i, &v) in x.data().iter().enumerate() {
            self.cox_de_boor(v, self.order(), &mut scratch);
            data[i * nb..(i + 1) * nb].copy_from_slice(&scratch[..nb]);
        }
        let mut shape = x.shape().to_vec();
        shape.push(nb);
        Tensor::new(shape, data).expect("sized")
    }
}

/// Evaluates the spline basis of `grid` on a plain tensor.
pub fn bspline_basis(grid: &SplineGrid, x: &Tensor) -> Tensor {
    grid.basis_tensor(x)
}

/// A KAN layer: `out_j = Σ_i w_base[i,j]·φ(x_i) + Σ_i Σ_b w_spline[i,j,b]·B_b(x_i)`.
#[derive(Clone, Debug)]
pub struct KanLinearLayer {
    grid: Arc<SplineGrid>,
    pub base_weight: Parameter,
    /// Shape (in, out, G + k).
    pub spline_weight: Parameter,
    pub base_activation: Activation,
}

impl KanLinearLayer {
    pub fn new(
        name: &str,
        input: usize,
        output: usize,
        grid: GridConfig,
        base_activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grid = Arc::new(SplineGrid::new(grid)?);
        let nb = grid.num_basis();
        let base = glorot_uniform(rng, input, output);
        let spline = normal(rng, &[input, output, nb], 0.1 / (nb as f64).sqrt());
        Ok(KanLinearLayer {
            grid,
            base_weight: Parameter::new(format!("{name}.base_weight"), base),
            spline_weight: Parameter::new(format!("{name}.spline_weight"), spline),
            base_activation,
        })
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn input_dim(&self) -> usize {
        self.base_weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.base_weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (&last, lead) = shape
            .split_last()
            .ok_or_else(|| Error::shape("KAN layer applied to a scalar"))?;
        let (input, output, nb) = (self.input_dim(), self.output_dim(), self.grid.num_basis());
        if last != input {
            return Err(Error::shape(format!(
                "KAN layer expects {input} input features, got {shape:?}"
            )));
        }
        let act = tape.activation(x, self.base_activation);
        let base_w = tape.param(&self.base_weight);
        let base = matmul_last_axis(tape, act, base_w)?;

        let basis = tape.bspline_basis(x, &self.grid);
        let mut flat_shape = lead.to_vec();
        flat_shape.push(input * nb);
        let basis = tape.reshape(basis, &flat_shape)?;
        let spline_w = tape.param(&self.spline_weight);
        let spline_w = tape.permute(spline_w, &[0, 2, 1])?;
        let spline_w = tape.reshape(spline_w, &[input * nb, output])?;
        let spline = matmul_last_axis(tape, basis, spline_w)?;
        tape.add(base, spline)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.base_weight, &self.spline_weight]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.base_weight, &mut self.spline_weight]
    }
}

crate::nn::forward_module!(KanLinearLayer);

/// `in · out · (1 + G + k)`: base weights plus spline coefficients.
pub fn count_kan_parameters(layer: &KanLinearLayer) -> usize {
    layer.input_dim() * layer.output_dim() * (1 + layer.grid.num_basis())
}
