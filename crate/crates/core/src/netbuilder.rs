//! From decoded genomes to executable networks: block expansion into
//! primitive layers, multi-input aggregation, shape inference, plan hashing
//! and a printable summary.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{infer_shapes, Activation, BuildError, LayerSpec, Network, NodeShapes, NodeSpec, Padding, PoolKind, Shape};
use crate::genome::Genome;
use crate::grammar::{decode, AttributeList, Grammar, GrammarError};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Convblock,
    MacroNode,
    Transition,
    Poolblock,
    Fc,
    Softmax,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Convblock => "convblock",
            BlockKind::MacroNode => "macro-node",
            BlockKind::Transition => "transition",
            BlockKind::Poolblock => "poolblock",
            BlockKind::Fc => "fc",
            BlockKind::Softmax => "softmax",
        }
    }
}

/// One decoded layer unit with its input edges (`-1` is the image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub kind: BlockKind,
    pub attrs: AttributeList,
    pub inputs: Vec<i64>,
}

impl LayerDescriptor {
    /// Classifies decoded attributes by their `layer` key; an `fc` whose
    /// activation is `softmax` is the output head.
    pub fn new(attrs: AttributeList, inputs: Vec<i64>) -> Result<Self, PlanError> {
        let kind = match attrs.text("layer").ok_or(PlanError::Missing { kind: "unit", key: "layer" })? {
            "convblock" => BlockKind::Convblock,
            "macro-node" => BlockKind::MacroNode,
            "transition" => BlockKind::Transition,
            "poolblock" => BlockKind::Poolblock,
            "fc" if attrs.text("act") == Some("softmax") => BlockKind::Softmax,
            "fc" => BlockKind::Fc,
            other => return Err(PlanError::UnknownKind(other.to_string())),
        };
        Ok(LayerDescriptor { kind, attrs, inputs })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("unknown layer kind `{0}`")]
    UnknownKind(String),
    #[error("{kind} lacks attribute `{key}`")]
    Missing { kind: &'static str, key: &'static str },
    #[error("{kind}: bad value for `{key}`")]
    BadValue { kind: &'static str, key: &'static str },
    #[error("invalid plan: {0}")]
    Invalid(#[from] BuildError),
    #[error("plan has no output head as its last unit")]
    NoHead,
}

/// A genome resolved into layer descriptors, ready for shape inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub input_shape: Shape,
    pub n_classes: usize,
    pub descriptors: Vec<LayerDescriptor>,
    pub learning: AttributeList,
}

struct Attrs<'a> {
    kind: &'static str,
    a: &'a AttributeList,
}

impl Attrs<'_> {
    fn text(&self, key: &'static str) -> Result<&str, PlanError> {
        self.a.text(key).ok_or(PlanError::Missing { kind: self.kind, key })
    }

    fn count(&self, key: &'static str) -> Result<usize, PlanError> {
        let v = self.a.number(key).ok_or(PlanError::Missing { kind: self.kind, key })?;
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(PlanError::BadValue { kind: self.kind, key })
        }
    }

    fn flag(&self, key: &'static str) -> Result<bool, PlanError> {
        self.a.flag(key).ok_or(PlanError::Missing { kind: self.kind, key })
    }

    fn activation(&self, key: &'static str) -> Result<Activation, PlanError> {
        match self.text(key)? {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "swish" => Ok(Activation::Swish),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => Err(PlanError::BadValue { kind: self.kind, key }),
        }
    }

    fn padding(&self, key: &'static str) -> Result<Padding, PlanError> {
        match self.text(key)? {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            _ => Err(PlanError::BadValue { kind: self.kind, key }),
        }
    }

    fn pool(&self) -> Result<LayerSpec, PlanError> {
        let kind = match self.text("pooling")? {
            "max" => PoolKind::Max,
            "avg" => PoolKind::Avg,
            _ => return Err(PlanError::BadValue { kind: self.kind, key: "pooling" }),
        };
        Ok(LayerSpec::Pool {
            kind,
            kernel: self.count("pool-kernel-size")?,
            stride: self.count("pool-stride")?,
            padding: self.padding("pool-padding")?,
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
enum BnAt {
    Pre,
    Mid,
    Post,
    None,
}

/// Pre-conv region, conv, post-conv region. The activation sits in the pre
/// region iff `preconv`; BN goes first in the pre region, right after the
/// conv, or last in the post region.
fn conv_unit(conv: LayerSpec, act: Activation, preconv: bool, bn: BnAt) -> Vec<LayerSpec> {
    let mut out = Vec::with_capacity(3);
    if bn == BnAt::Pre {
        out.push(LayerSpec::BatchNorm);
    }
    if preconv {
        out.push(LayerSpec::Act(act));
    }
    out.push(conv);
    if bn == BnAt::Mid {
        out.push(LayerSpec::BatchNorm);
    }
    if !preconv {
        out.push(LayerSpec::Act(act));
    }
    if bn == BnAt::Post {
        out.push(LayerSpec::BatchNorm);
    }
    out
}

fn bn_at(a: &Attrs<'_>, key: &'static str) -> Result<BnAt, PlanError> {
    match a.text(key)? {
        "pre" => Ok(BnAt::Pre),
        "mid" => Ok(BnAt::Mid),
        "post" => Ok(BnAt::Post),
        "none" => Ok(BnAt::None),
        _ => Err(PlanError::BadValue { kind: a.kind, key }),
    }
}

fn act_pos(a: &Attrs<'_>) -> Result<bool, PlanError> {
    match a.text("act-pos")? {
        "preconv" => Ok(true),
        "postconv" => Ok(false),
        _ => Err(PlanError::BadValue { kind: a.kind, key: "act-pos" }),
    }
}

/// Primitive layers of one block. Linear activations are dropped. The
/// output head is a dense layer with `n_classes` units; its softmax is part
/// of the loss.
pub fn expand_block(d: &LayerDescriptor, n_classes: usize) -> Result<Vec<LayerSpec>, PlanError> {
    let a = Attrs { kind: d.kind.name(), a: &d.attrs };
    let mut layers = match d.kind {
        BlockKind::Convblock => {
            let conv = LayerSpec::Conv {
                filters: a.count("num-filters")?,
                kernel: a.count("filter-shape")?,
                stride: a.count("stride")?,
                padding: a.padding("padding")?,
                bias: a.flag("bias")?,
            };
            conv_unit(conv, a.activation("act")?, act_pos(&a)?, bn_at(&a, "bn")?)
        }
        BlockKind::MacroNode => {
            let f = a.count("num-filters")?;
            let act = a.activation("act")?;
            vec![
                LayerSpec::BatchNorm,
                LayerSpec::Act(act),
                LayerSpec::Conv {
                    filters: a.count("filters-mult")? * f,
                    kernel: 1,
                    stride: 1,
                    padding: Padding::Valid,
                    bias: false,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Act(act),
                LayerSpec::Conv { filters: f, kernel: 3, stride: 1, padding: Padding::Same, bias: false },
            ]
        }
        BlockKind::Transition => {
            let conv = LayerSpec::Conv {
                filters: a.count("num-filters")?,
                kernel: a.count("conv-filter-shape")?,
                stride: a.count("conv-stride")?,
                padding: a.padding("conv-padding")?,
                bias: a.flag("conv-bias")?,
            };
            let mut l = conv_unit(conv, a.activation("act")?, act_pos(&a)?, bn_at(&a, "conv-bn")?);
            l.push(a.pool()?);
            if bn_at(&a, "pool-bn")? != BnAt::None {
                l.push(LayerSpec::BatchNorm);
            }
            l
        }
        BlockKind::Poolblock => vec![a.pool()?],
        BlockKind::Fc => {
            let bias = d.attrs.get("bias").map_or(Ok(true), |_| a.flag("bias"))?;
            vec![LayerSpec::Dense { units: a.count("num-units")?, bias }, LayerSpec::Act(a.activation("act")?)]
        }
        BlockKind::Softmax => {
            let bias = d.attrs.get("bias").map_or(Ok(true), |_| a.flag("bias"))?;
            vec![LayerSpec::Dense { units: n_classes, bias }]
        }
    };
    layers.retain(|l| *l != LayerSpec::Act(Activation::Linear));
    if layers.is_empty() {
        return Err(PlanError::BadValue { kind: a.kind, key: "act" });
    }
    Ok(layers)
}

impl NetworkPlan {
    /// Decodes every unit of `genome` with `grammar`.
    pub fn from_genome(grammar: &Grammar, genome: &Genome, input_shape: Shape, n_classes: usize) -> Result<Self, PlanError> {
        let mut descriptors = Vec::with_capacity(genome.units.len());
        for (i, u) in genome.units.iter().enumerate() {
            let attrs = decode(grammar, &u.inner, &genome.module_of(i).nonterminal)?;
            descriptors.push(LayerDescriptor::new(attrs, u.inputs.clone())?);
        }
        let learning = decode(grammar, &genome.learning, crate::genome::LEARNING_NONTERMINAL)?;
        Ok(NetworkPlan { input_shape, n_classes, descriptors, learning })
    }

    /// Engine nodes, one per descriptor. A flatten is inserted before the
    /// first dense layer of any node whose aggregated input is still spatial.
    pub fn node_specs(&self) -> Result<Vec<NodeSpec>, PlanError> {
        if self.descriptors.last().map(|d| d.kind) != Some(BlockKind::Softmax) {
            return Err(PlanError::NoHead);
        }
        let mut specs: Vec<NodeSpec> = Vec::with_capacity(self.descriptors.len());
        for d in &self.descriptors {
            let mut layers = expand_block(d, self.n_classes)?;
            if matches!(layers[0], LayerSpec::Dense { .. }) {
                let mut probe = specs.clone();
                probe.push(NodeSpec { inputs: d.inputs.clone(), layers: vec![LayerSpec::BatchNorm] });
                let shapes = infer_shapes(self.input_shape, &probe)?;
                let s = shapes.last().expect("probe node").aggregated;
                if s[0] * s[1] > 1 {
                    layers.insert(0, LayerSpec::Flatten);
                }
            }
            specs.push(NodeSpec { inputs: d.inputs.clone(), layers });
        }
        Ok(specs)
    }

    /// Per-node shapes, or the reason the plan is invalid.
    pub fn infer_shapes(&self) -> Result<Vec<NodeShapes>, PlanError> {
        Ok(infer_shapes(self.input_shape, &self.node_specs()?)?)
    }

    pub fn build<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Network<T>, PlanError> {
        Ok(Network::new(self.input_shape, &self.node_specs()?, rng)?)
    }

    /// SHA-256 over a canonical text form of the input shape, class count
    /// and node list; equal hashes mean identical architectures.
    pub fn hash(&self) -> Result<String, PlanError> {
        let mut canon = format!("input {:?} classes {}\n", self.input_shape, self.n_classes);
        for n in self.node_specs()? {
            let _ = writeln!(canon, "{:?} {:?}", n.inputs, n.layers);
        }
        let digest = Sha256::digest(canon.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        Ok(hex)
    }

    /// Layer table with output shapes and parameter counts.
    pub fn summary(&self) -> Result<String, PlanError> {
        let specs = self.node_specs()?;
        let shapes = infer_shapes(self.input_shape, &specs)?;
        let mut s = String::new();
        let _ = writeln!(s, "{:>4}  {:<12} {:<10} {:<42} {:>14} {:>10}", "unit", "block", "inputs", "layer", "output", "params");
        let mut total = 0usize;
        for (i, (n, sh)) in specs.iter().zip(&shapes).enumerate() {
            let mut shape = sh.aggregated;
            for (k, (l, out)) in n.layers.iter().zip(&sh.outputs).enumerate() {
                let p = param_count(l, shape);
                total += p;
                let (unit, block, inputs) = if k == 0 {
                    (format!("{i}"), self.descriptors[i].kind.name().to_string(), format!("{:?}", n.inputs))
                } else {
                    (String::new(), String::new(), String::new())
                };
                let _ = writeln!(
                    s,
                    "{unit:>4}  {block:<12} {inputs:<10} {:<42} {:>14} {p:>10}",
                    layer_label(l),
                    format!("{}x{}x{}", out[0], out[1], out[2])
                );
                shape = *out;
            }
        }
        let _ = writeln!(s, "total parameters: {total}");
        Ok(s)
    }
}

fn layer_label(l: &LayerSpec) -> String {
    match l {
        LayerSpec::Conv { filters, kernel, stride, padding, bias } => {
            format!("conv {filters} {kernel}x{kernel}/{stride} {padding:?}{}", if *bias { " +b" } else { "" })
        }
        LayerSpec::BatchNorm => "batch-norm".into(),
        LayerSpec::Act(a) => format!("act {a:?}"),
        LayerSpec::Pool { kind, kernel, stride, padding } => format!("{kind:?} pool {kernel}x{kernel}/{stride} {padding:?}"),
        LayerSpec::Flatten => "flatten".into(),
        LayerSpec::Dense { units, bias } => format!("dense {units}{}", if *bias { " +b" } else { "" }),
    }
}

/// Trainable parameters of a primitive on input shape `s`.
pub fn param_count(l: &LayerSpec, s: Shape) -> usize {
    match *l {
        LayerSpec::Conv { filters, kernel, bias, .. } => kernel * kernel * s[2] * filters + if bias { filters } else { 0 },
        LayerSpec::Dense { units, bias } => s[0] * s[1] * s[2] * units + if bias { units } else { 0 },
        LayerSpec::BatchNorm => 2 * s[2],
        _ => 0,
    }
}
