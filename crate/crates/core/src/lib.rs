//! Mixture-of-experts layers gated by gated residual KAN blocks, built on a
//! small f64 tensor library with tape-based reverse-mode differentiation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod experts;
pub mod gating;
pub mod gradcheck;
pub mod io;
pub mod kan;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use kan::{GridConfig, KanLinearLayer, SplineGrid};
pub use nn::{Activation, LinearLayer};
pub use tensor::Tensor;
pub use experiment::{ExperimentConfig, Task};
pub use model::{ModelKind, ModelSpec, Network, Variant};
pub use train::{RunMetrics, TrainConfig};
