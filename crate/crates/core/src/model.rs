//! Whole networks (hidden blocks plus a dense head), architecture
//! introspection, and the on-disk model format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::experts::{Expert, GruLayer, KanExpert, LstmLayer, MlpExpert};
use crate::gating::{Gating, GatingKind};
use crate::kan::{GridConfig, KanLinearLayer, SplineGrid};
use crate::mixture::MixtureLayer;
use crate::nn::{forward_module, Activation, LinearLayer};
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "kamoe-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Kan,
    Gru,
    Lstm,
}

impl ModelKind {
    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelKind::Gru | ModelKind::Lstm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Standard,
    Moe,
    Kamoe,
}

impl Variant {
    pub fn gating(self) -> Option<GatingKind> {
        match self {
            Variant::Standard => None,
            Variant::Moe => Some(GatingKind::Grn),
            Variant::Kamoe => Some(GatingKind::Grkan),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Standard => "Standard",
            Variant::Moe => "MoE",
            Variant::Kamoe => "KAMoE",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Kan => "kan",
            ModelKind::Gru => "gru",
            ModelKind::Lstm => "lstm",
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Standard => "standard",
            Variant::Moe => "moe",
            Variant::Kamoe => "kamoe",
        })
    }
}

/// Everything needed to rebuild a network's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub variant: Variant,
    pub input_dim: usize,
    /// Steps per input window; required by recurrent kinds only.
    #[serde(default)]
    pub seq_len: Option<usize>,
    pub hidden: usize,
    pub layers: usize,
    /// Experts per mixture; ignored by the standard variant.
    pub experts: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub grid: GridConfig,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("output_dim", self.output_dim),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{field} must be positive")));
        }
        if self.variant != Variant::Standard && self.experts == 0 {
            return Err(Error::config("experts must be positive for mixture variants"));
        }
        match (self.kind.is_recurrent(), self.seq_len) {
            (true, None | Some(0)) => return Err(Error::config("recurrent models need a positive seq_len")),
            (false, Some(_)) => return Err(Error::config("seq_len is only valid for recurrent models")),
            _ => {}
        }
        SplineGrid::new(self.grid)?;
        Ok(())
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.seq_len {
            Some(s) if self.kind.is_recurrent() => vec![s, self.input_dim],
            _ => vec![self.input_dim],
        }
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Single(Expert),
    Mixture(MixtureLayer),
}

impl Block {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Option<Var>)> {
        match self {
            Block::Single(e) => Ok((e.forward(tape, x)?, None)),
            Block::Mixture(m) => m.forward_with_gates(tape, x).map(|(y, a)| (y, Some(a))),
        }
    }

    fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Block::Single(e) => e.parameters(),
            Block::Mixture(m) => m.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Block::Single(e) => e.parameters_mut(),
            Block::Mixture(m) => m.parameters_mut(),
        }
    }
}

/// Hidden blocks followed by a dense head.
///
/// Tabular kinds use one single-layer expert per hidden block, or a mixture of
/// `experts` such layers for the mixture variants. Recurrent kinds stack
/// `layers` recurrent layers, all but the last returning sequences, and only
/// the first is wrapped in a mixture.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    pub blocks: Vec<Block>,
    pub head: LinearLayer,
}

fn build_expert(spec: &ModelSpec, name: &str, input: usize, last: bool, rng: &mut impl Rng) -> Result<Expert> {
    let h = spec.hidden;
    Ok(match spec.kind {
        ModelKind::Mlp => Expert::Mlp(MlpExpert::new(name, &[input, h], Activation::Relu, rng)?),
        ModelKind::Kan => Expert::Kan(KanExpert::new(name, &[input, h], spec.grid, rng)?),
        ModelKind::Gru => Expert::Gru(GruLayer::new(name, input, h, !last, rng)),
        ModelKind::Lstm => Expert::Lstm(LstmLayer::new(name, input, h, !last, rng)),
    })
}

impl Network {
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.layers);
        for i in 0..spec.layers {
            let name = format!("block{i}");
            let input = if i == 0 { spec.input_dim } else { spec.hidden };
            let last = i + 1 == spec.layers;
            let mixture = match spec.variant.gating() {
                Some(g) if i == 0 || !spec.kind.is_recurrent() => Some(g),
                _ => None,
            };
            let block = match mixture {
                None => Block::Single(build_expert(&spec, &format!("{name}.expert"), input, last, rng)?),
                Some(gating) => {
                    let experts = (0..spec.experts)
                        .map(|k| build_expert(&spec, &format!("{name}.expert{k}"), input, last, rng))
                        .collect::<Result<Vec<_>>>()?;
                    let sample = if i == 0 { spec.sample_shape() } else { vec![input] };
                    Block::Mixture(MixtureLayer::new(&name, &sample, experts, gating, spec.grid, rng)?)
                }
            };
            blocks.push(block);
        }
        let head = LinearLayer::new("head", spec.hidden, spec.output_dim, rng);
        Ok(Network { spec, blocks, head })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn is_mixture(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b, Block::Mixture(_)))
    }

    /// The first mixture block, whose gates `inspect` reports.
    pub fn first_mixture(&self) -> Option<&MixtureLayer> {
        self.blocks.iter().find_map(|b| match b {
            Block::Mixture(m) => Some(m),
            Block::Single(_) => None,
        })
    }

    pub fn first_mixture_mut(&mut self) -> Option<&mut MixtureLayer> {
        self.blocks.iter_mut().find_map(|b| match b {
            Block::Mixture(m) => Some(m),
            Block::Single(_) => None,
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != self.spec.sample_shape().len() + 1 || shape[1..] != self.spec.sample_shape()[..] {
            return Err(Error::shape(format!(
                "model expects samples of shape {:?}, got {shape:?}",
                self.spec.sample_shape()
            )));
        }
        Ok(())
    }

    /// Returns the prediction and the gate weights of the first mixture block.
    pub fn forward_with_gates(&self, tape: &mut Tape, x: Var) -> Result<(Var, Option<Var>)> {
        self.check_input(tape, x)?;
        let mut h = x;
        let mut gates = None;
        for block in &self.blocks {
            let (y, a) = block.forward(tape, h)?;
            h = y;
            gates = gates.or(a);
        }
        Ok((self.head.forward(tape, h)?, gates))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_with_gates(tape, x).map(|(y, _)| y)
    }

    /// Runs inference in row chunks, each on a fresh tape.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        self.predict_with_gates(x, chunk).map(|(y, _)| y)
    }

    pub fn predict_with_gates(&self, x: &Tensor, chunk: usize) -> Result<(Tensor, Option<Tensor>)> {
        let rows = x.shape().first().copied().unwrap_or(0);
        let chunk = chunk.max(1);
        let mut preds = Vec::with_capacity(rows * self.spec.output_dim);
        let mut gates: Option<Vec<f64>> = None;
        let mut start = 0;
        while start < rows || (rows == 0 && start == 0) {
            let end = (start + chunk).min(rows);
            let mut tape = Tape::new();
            let xv = tape.constant(x.slice_rows(start, end)?);
            let (y, a) = self.forward_with_gates(&mut tape, xv)?;
            preds.extend_from_slice(tape.value(y).data());
            if let Some(a) = a {
                gates.get_or_insert_with(Vec::new).extend_from_slice(tape.value(a).data());
            }
            if rows == 0 {
                break;
            }
            start = end;
        }
        let y = Tensor::new(vec![rows, self.spec.output_dim], preds)?;
        let m = self.first_mixture().map(MixtureLayer::num_experts);
        let a = match (gates, m) {
            (Some(g), Some(m)) => Some(Tensor::new(vec![rows, m], g)?),
            (None, Some(m)) => Some(Tensor::zeros(&[0, m])),
            _ => None,
        };
        Ok((y, a))
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p: Vec<&Parameter> = self.blocks.iter().flat_map(Block::parameters).collect();
        p.extend(self.head.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p: Vec<&mut Parameter> = self.blocks.iter_mut().flat_map(Block::parameters_mut).collect();
        p.extend(self.head.parameters_mut());
        p
    }

    pub fn architecture(&self) -> ArchNode {
        let mut children: Vec<ArchNode> = self.blocks.iter().map(arch_block).collect();
        children.push(arch_linear("head", &self.head));
        ArchNode::new("network", self.spec.kind.to_string(), children)
    }

    /// Flat name → tensor map of every parameter.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        self.parameters()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value().clone()))
            .collect()
    }

    /// Overwrites every parameter from `state`; names and shapes must match
    /// exactly.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut seen = 0;
        for p in self.parameters_mut() {
            let t = state
                .get(p.name())
                .ok_or_else(|| Error::Serialization(format!("missing parameter {}", p.name())))?;
            p.set_value(t.clone())
                .map_err(|e| Error::Serialization(e.to_string()))?;
            seen += 1;
        }
        if seen != state.len() {
            return Err(Error::Serialization(format!(
                "file holds {} parameters, model expects {seen}",
                state.len()
            )));
        }
        Ok(())
    }

    pub fn to_file(&self, metadata: serde_json::Value) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            spec: self.spec.clone(),
            metadata,
            parameters: self.state(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT || file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::new(file.spec.clone(), &mut rng)?;
        net.load_state(&file.parameters)?;
        Ok(net)
    }

    /// Writes the model as one JSON document, atomically.
    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let json = serde_json::to_string(&self.to_file(metadata))?;
        crate::io::write_atomic(path, json.as_bytes())
    }

    /// Returns the network and the metadata stored alongside it.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = crate::io::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        let net = Network::from_file(&file)?;
        Ok((net, file.metadata))
    }
}

forward_module!(Network);

/// Serialized model: manifest fields plus a flat parameter map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub parameters: BTreeMap<String, Tensor>,
}

/// One node of the structural description of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchNode {
    pub kind: String,
    pub detail: String,
    pub children: Vec<ArchNode>,
}

impl ArchNode {
    fn new(kind: impl Into<String>, detail: impl Into<String>, children: Vec<ArchNode>) -> Self {
        ArchNode {
            kind: kind.into(),
            detail: detail.into(),
            children,
        }
    }

    fn leaf(kind: impl Into<String>, detail: impl Into<String>) -> Self {
        ArchNode::new(kind, detail, Vec::new())
    }

    /// Indented one-node-per-line rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(0, &mut out);
        out
    }

    fn render_into(&self, depth: usize, out: &mut String) {
        out.push_str(&"  ".repeat(depth));
        out.push_str(&self.kind);
        if !self.detail.is_empty() {
            out.push(' ');
            out.push_str(&self.detail);
        }
        out.push('\n');
        for c in &self.children {
            c.render_into(depth + 1, out);
        }
    }
}

/// Paths of the outermost nodes at which two architectures differ.
pub fn structural_diff(a: &ArchNode, b: &ArchNode) -> Vec<String> {
    fn walk(a: &ArchNode, b: &ArchNode, path: String, out: &mut Vec<String>) {
        if a.kind != b.kind || a.detail != b.detail || a.children.len() != b.children.len() {
            out.push(path);
            return;
        }
        for (i, (ca, cb)) in a.children.iter().zip(&b.children).enumerate() {
            walk(ca, cb, format!("{path}/{i}:{}", ca.kind), out);
        }
    }
    let mut out = Vec::new();
    walk(a, b, a.kind.clone(), &mut out);
    out
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn arch_linear(kind: &str, l: &LinearLayer) -> ArchNode {
    ArchNode::leaf(kind, format!("{}->{}", l.input_dim(), l.output_dim()))
}

fn arch_kan(kind: &str, l: &KanLinearLayer) -> ArchNode {
    let g = l.grid().config();
    ArchNode::leaf(
        kind,
        format!(
            "{}->{} G={} k={} base={:?}",
            l.input_dim(),
            l.output_dim(),
            g.grid_size,
            g.spline_order,
            l.base_activation
        ),
    )
}

fn arch_expert(e: &Expert) -> ArchNode {
    match e {
        Expert::Mlp(m) => ArchNode::new(
            "mlp",
            format!("out={:?}", m.output_activation),
            m.layers.iter().map(|l| arch_linear("linear", l)).collect(),
        ),
        Expert::Kan(k) => ArchNode::new("kan", "", k.layers.iter().map(|l| arch_kan("kan_linear", l)).collect()),
        Expert::Gru(g) => ArchNode::leaf(
            "gru",
            format!("{}->{} seq={}", g.input_dim(), g.hidden_dim(), g.return_sequences),
        ),
        Expert::Lstm(l) => ArchNode::leaf(
            "lstm",
            format!("{}->{} seq={}", l.input_dim(), l.hidden_dim(), l.return_sequences),
        ),
    }
}

fn arch_gating(g: &Gating) -> ArchNode {
    match g {
        Gating::Grkan(b) => ArchNode::new(
            "grkan",
            format!("d={}", b.d_model()),
            vec![
                arch_kan("eta2", &b.kan_eta2),
                arch_kan("eta1", &b.kan_eta1),
                ArchNode::leaf("glu", format!("d={}", b.glu.dim())),
                ArchNode::leaf("layer_norm", format!("d={}", b.norm.dim())),
            ],
        ),
        Gating::Grn(b) => ArchNode::new(
            "grn",
            format!("d={}", b.d_model()),
            vec![
                arch_linear("eta2", &b.dense_eta2),
                arch_linear("eta1", &b.dense_eta1),
                ArchNode::leaf("glu", format!("d={}", b.glu.dim())),
                ArchNode::leaf("layer_norm", format!("d={}", b.norm.dim())),
            ],
        ),
    }
}

fn arch_block(b: &Block) -> ArchNode {
    match b {
        Block::Single(e) => ArchNode::new("single", "", vec![arch_expert(e)]),
        Block::Mixture(m) => ArchNode::new(
            "mixture",
            format!("m={}", m.num_experts()),
            vec![
                ArchNode::leaf("input_weights", shape_str(m.sample_shape())),
                ArchNode::new("experts", "", m.experts.iter().map(arch_expert).collect()),
                ArchNode::new(
                    "projection",
                    if m.sample_shape().len() == 2 { "mean_pool" } else { "identity" },
                    vec![arch_linear("linear", &m.projection)],
                ),
                ArchNode::new("gating", "", vec![arch_gating(&m.gating)]),
                ArchNode::leaf("gate_activation", "sigmoid"),
            ],
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::count_parameters;
    use rand_chacha::ChaCha8Rng;

    fn spec(kind: ModelKind, variant: Variant, hidden: usize, layers: usize) -> ModelSpec {
        ModelSpec {
            kind,
            variant,
            input_dim: 8,
            seq_len: kind.is_recurrent().then_some(6),
            hidden,
            layers,
            experts: 3,
            output_dim: 1,
            grid: GridConfig::default(),
        }
    }

    fn net(s: ModelSpec) -> Network {
        Network::new(s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn standard_mlp_counts() {
        for (h, l, expect) in [(5, 1, 51), (10, 2, 211), (100, 1, 1001), (800, 2, 648_801)] {
            assert_eq!(count_parameters(&net(spec(ModelKind::Mlp, Variant::Standard, h, l))), expect);
        }
    }

    #[test]
    fn mixture_variants_differ_only_in_gating() {
        for kind in [ModelKind::Mlp, ModelKind::Kan, ModelKind::Lstm, ModelKind::Gru] {
            let a = net(spec(kind, Variant::Kamoe, 4, 2)).architecture();
            let b = net(spec(kind, Variant::Moe, 4, 2)).architecture();
            let diff = structural_diff(&a, &b);
            assert!(!diff.is_empty());
            assert!(diff.iter().all(|p| p.ends_with("/3:gating/0:grkan")), "{diff:?}");
        }
    }

    #[test]
    fn recurrent_mixture_only_wraps_first_layer() {
        let n = net(spec(ModelKind::Lstm, Variant::Kamoe, 4, 2));
        assert!(matches!(n.blocks[0], Block::Mixture(_)));
        assert!(matches!(n.blocks[1], Block::Single(_)));
        let m = n.first_mixture().unwrap();
        assert_eq!(m.sample_shape(), &[6, 8]);
        let tab = net(spec(ModelKind::Mlp, Variant::Moe, 4, 3));
        assert!(tab.blocks.iter().all(|b| matches!(b, Block::Mixture(_))));
    }

    #[test]
    fn parameter_names_unique() {
        for variant in [Variant::Standard, Variant::Moe, Variant::Kamoe] {
            let n = net(spec(ModelKind::Kan, variant, 3, 2));
            let names: std::collections::BTreeSet<&str> = n.parameters().iter().map(|p| p.name()).collect();
            assert_eq!(names.len(), n.parameters().len());
        }
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let mut n = net(spec(ModelKind::Gru, Variant::Kamoe, 3, 2));
        for (i, p) in n.parameters_mut().into_iter().enumerate() {
            for (j, v) in p.values_mut().iter_mut().enumerate() {
                *v = ((i * 31 + j) as f64).sin() / 3.0 + 1e-17 * j as f64;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        n.save(&path, serde_json::json!({"note": 1})).unwrap();
        let (back, meta) = Network::load(&path).unwrap();
        assert_eq!(meta["note"], 1);
        assert_eq!(back.spec(), n.spec());
        for (a, b) in n.parameters().iter().zip(back.parameters()) {
            assert_eq!(a.name(), b.name());
            assert!(a.value().data().iter().zip(b.value().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn load_rejects_mismatched_state() {
        let n = net(spec(ModelKind::Mlp, Variant::Standard, 3, 1));
        let mut file = n.to_file(serde_json::Value::Null);
        file.parameters.remove("head.bias");
        assert!(matches!(Network::from_file(&file), Err(Error::Serialization(_))));
        let mut file = n.to_file(serde_json::Value::Null);
        file.parameters.insert("extra".into(), Tensor::zeros(&[1]));
        assert!(matches!(Network::from_file(&file), Err(Error::Serialization(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(ModelKind::Mlp, Variant::Standard, 3, 1);
        s.seq_len = Some(4);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = spec(ModelKind::Lstm, Variant::Kamoe, 3, 1);
        s.seq_len = None;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = spec(ModelKind::Mlp, Variant::Moe, 3, 1);
        s.experts = 0;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn predict_shapes_and_gates() {
        let n = net(spec(ModelKind::Lstm, Variant::Kamoe, 3, 2));
        let x = Tensor::full(&[5, 6, 8], 0.1);
        let (y, a) = n.predict_with_gates(&x, 2).unwrap();
        assert_eq!(y.shape(), &[5, 1]);
        assert_eq!(a.unwrap().shape(), &[5, 3]);
        let std = net(spec(ModelKind::Mlp, Variant::Standard, 3, 1));
        let (_, a) = std.predict_with_gates(&Tensor::zeros(&[2, 8]), 64).unwrap();
        assert!(a.is_none());
        assert!(std.predict(&Tensor::zeros(&[2, 7]), 64).is_err());
    }
}
