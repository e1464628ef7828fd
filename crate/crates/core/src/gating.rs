//! Gated residual blocks used as mixture gates: the KAN-based variant and the
//! dense baseline share one contract, `LayerNorm(x + GLU(η₁(η₂(x))))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::kan::{GridConfig, KanLinearLayer};
use crate::nn::{forward_module, Activation, GluBlock, LayerNormBlock, LinearLayer};

fn check_width(tape: &Tape, x: Var, d: usize, what: &str) -> Result<()> {
    match tape.shape(x).last() {
        Some(&w) if w == d => Ok(()),
        _ => Err(Error::shape(format!(
            "{what} of width {d} got input {:?}",
            tape.shape(x)
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct GrkanBlock {
    /// ELU-based layer applied to the input.
    pub kan_eta2: KanLinearLayer,
    /// SiLU-based layer applied to η₂.
    pub kan_eta1: KanLinearLayer,
    pub glu: GluBlock,
    pub norm: LayerNormBlock,
}

impl GrkanBlock {
    pub fn new(name: &str, d_model: usize, grid: GridConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(GrkanBlock {
            kan_eta2: KanLinearLayer::new(&format!("{name}.eta2"), d_model, d_model, grid, Activation::Elu, rng)?,
            kan_eta1: KanLinearLayer::new(&format!("{name}.eta1"), d_model, d_model, grid, Activation::Silu, rng)?,
            glu: GluBlock::new(&format!("{name}.glu"), d_model, rng),
            norm: LayerNormBlock::new(&format!("{name}.norm"), d_model),
        })
    }

    pub fn d_model(&self) -> usize {
        self.norm.dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_width(tape, x, self.d_model(), "GRKAN block")?;
        let eta2 = self.kan_eta2.forward(tape, x)?;
        let eta1 = self.kan_eta1.forward(tape, eta2)?;
        let gated = self.glu.forward(tape, eta1)?;
        let skip = tape.add(x, gated)?;
        self.norm.forward(tape, skip)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.kan_eta2.parameters();
        p.extend(self.kan_eta1.parameters());
        p.extend(self.glu.parameters());
        p.extend(self.norm.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.kan_eta2.parameters_mut();
        p.extend(self.kan_eta1.parameters_mut());
        p.extend(self.glu.parameters_mut());
        p.extend(self.norm.parameters_mut());
        p
    }
}

#[derive(Clone, Debug)]
pub struct GrnBlock {
    /// Dense layer followed by ELU.
    pub dense_eta2: LinearLayer,
    pub dense_eta1: LinearLayer,
    pub glu: GluBlock,
    pub norm: LayerNormBlock,
}

impl GrnBlock {
    pub fn new(name: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        GrnBlock {
            dense_eta2: LinearLayer::new(&format!("{name}.eta2"), d_model, d_model, rng),
            dense_eta1: LinearLayer::new(&format!("{name}.eta1"), d_model, d_model, rng),
            glu: GluBlock::new(&format!("{name}.glu"), d_model, rng),
            norm: LayerNormBlock::new(&format!("{name}.norm"), d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.norm.dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_width(tape, x, self.d_model(), "GRN block")?;
        let eta2 = self.dense_eta2.forward(tape, x)?;
        let eta2 = tape.activation(eta2, Activation::Elu);
        let eta1 = self.dense_eta1.forward(tape, eta2)?;
        let gated = self.glu.forward(tape, eta1)?;
        let skip = tape.add(x, gated)?;
        self.norm.forward(tape, skip)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.dense_eta2.parameters();
        p.extend(self.dense_eta1.parameters());
        p.extend(self.glu.parameters());
        p.extend(self.norm.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.dense_eta2.parameters_mut();
        p.extend(self.dense_eta1.parameters_mut());
        p.extend(self.glu.parameters_mut());
        p.extend(self.norm.parameters_mut());
        p
    }
}

forward_module!(GrkanBlock, GrnBlock);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingKind {
    Grkan,
    Grn,
}

/// Either gating block behind one forward contract.
#[derive(Clone, Debug)]
pub enum Gating {
    Grkan(GrkanBlock),
    Grn(GrnBlock),
}

impl Gating {
    pub fn new(kind: GatingKind, name: &str, d_model: usize, grid: GridConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            GatingKind::Grkan => Gating::Grkan(GrkanBlock::new(name, d_model, grid, rng)?),
            GatingKind::Grn => Gating::Grn(GrnBlock::new(name, d_model, rng)),
        })
    }

    pub fn kind(&self) -> GatingKind {
        match self {
            Gating::Grkan(_) => GatingKind::Grkan,
            Gating::Grn(_) => GatingKind::Grn,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            Gating::Grkan(b) => b.d_model(),
            Gating::Grn(b) => b.d_model(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Gating::Grkan(b) => b.forward(tape, x),
            Gating::Grn(b) => b.forward(tape, x),
        }
    }

    pub fn glu_mut(&mut self) -> &mut GluBlock {
        match self {
            Gating::Grkan(b) => &mut b.glu,
            Gating::Grn(b) => &mut b.glu,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Gating::Grkan(b) => b.parameters(),
            Gating::Grn(b) => b.parameters(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Gating::Grkan(b) => b.parameters_mut(),
            Gating::Grn(b) => b.parameters_mut(),
        }
    }
}

forward_module!(Gating);
