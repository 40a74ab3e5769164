//! Layer graph: nodes aggregate their inputs, then run a primitive sequence.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer, LayerSpec, Mode, ParamRole, Shape};
use crate::{Scalar, Tensor};

/// One graph node before weights exist: input edges (`-1` is the network
/// input) and the primitive layers applied after aggregation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub inputs: Vec<i64>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("network has no nodes")]
    Empty,
    #[error("node {node}: input {input} is not an earlier node")]
    BadInput { node: usize, input: i64 },
    #[error("node {node}: input sizes {shapes:?} do not reduce to a common size by an integral factor")]
    Aggregation { node: usize, shapes: Vec<Shape> },
    #[error("node {node}, layer {layer}: {spec:?} cannot be applied to shape {shape:?}")]
    Geometry { node: usize, layer: usize, spec: LayerSpec, shape: Shape },
    #[error("node {node}: spatial layer after flattening")]
    SpatialAfterFlat { node: usize },
    #[error("node {0} has no layers")]
    EmptyNode(usize),
}

/// Multi-input aggregation: every input is average-pooled down to the
/// smallest spatial size by an integral factor, then channels are
/// concatenated in input order. Returns the per-input factors and the output
/// shape, or `None` if some ratio is not integral.
pub fn aggregate_shapes(shapes: &[Shape]) -> Option<(Vec<usize>, Shape)> {
    let h = shapes.iter().map(|s| s[0]).min()?;
    let w = shapes.iter().map(|s| s[1]).min()?;
    if h == 0 || w == 0 {
        return None;
    }
    let mut factors = Vec::with_capacity(shapes.len());
    for s in shapes {
        let f = s[0] / h;
        if s[0] % h != 0 || s[1] != w * f {
            return None;
        }
        factors.push(f);
    }
    Some((factors, [h, w, shapes.iter().map(|s| s[2]).sum()]))
}

/// Resolved shapes of one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeShapes {
    pub in_shapes: Vec<Shape>,
    pub factors: Vec<usize>,
    pub aggregated: Shape,
    /// Output shape of each layer.
    pub outputs: Vec<Shape>,
}

/// Shape inference over a node list without allocating weights. Nodes may
/// only read earlier nodes, and spatial layers may not follow a flatten or
/// dense layer anywhere upstream.
pub fn infer_shapes(input_shape: Shape, specs: &[NodeSpec]) -> Result<Vec<NodeShapes>, BuildError> {
    if specs.is_empty() {
        return Err(BuildError::Empty);
    }
    let mut out: Vec<NodeShapes> = Vec::with_capacity(specs.len());
    let mut flat: Vec<bool> = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        if spec.layers.is_empty() {
            return Err(BuildError::EmptyNode(i));
        }
        if spec.inputs.is_empty() {
            return Err(BuildError::BadInput { node: i, input: -1 });
        }
        let mut in_shapes = Vec::with_capacity(spec.inputs.len());
        let mut is_flat = false;
        for &j in &spec.inputs {
            if j < -1 || j >= i as i64 {
                return Err(BuildError::BadInput { node: i, input: j });
            }
            if j < 0 {
                in_shapes.push(input_shape);
            } else {
                in_shapes.push(*out[j as usize].outputs.last().expect("non-empty node"));
                is_flat |= flat[j as usize];
            }
        }
        let (factors, aggregated) = aggregate_shapes(&in_shapes)
            .ok_or_else(|| BuildError::Aggregation { node: i, shapes: in_shapes.clone() })?;
        let mut shape = aggregated;
        let mut outputs = Vec::with_capacity(spec.layers.len());
        for (k, ls) in spec.layers.iter().enumerate() {
            match ls {
                LayerSpec::Conv { .. } | LayerSpec::Pool { .. } if is_flat => {
                    return Err(BuildError::SpatialAfterFlat { node: i })
                }
                LayerSpec::Flatten | LayerSpec::Dense { .. } => is_flat = true,
                _ => {}
            }
            shape = ls.output_shape(shape).ok_or_else(|| BuildError::Geometry {
                node: i,
                layer: k,
                spec: ls.clone(),
                shape,
            })?;
            outputs.push(shape);
        }
        flat.push(is_flat);
        out.push(NodeShapes { in_shapes, factors, aggregated, outputs });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub inputs: Vec<i64>,
    pub in_shapes: Vec<Shape>,
    pub factors: Vec<usize>,
    pub layers: Vec<Layer<T>>,
}

impl<T> Node<T> {
    fn aggregates(&self) -> bool {
        self.inputs.len() > 1 || self.factors[0] != 1
    }

    pub fn out_shape(&self) -> Shape {
        self.layers.last().expect("non-empty").out_shape
    }
}

/// Executable network. The last node's output is the logit vector; softmax
/// is applied by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub input_shape: Shape,
    pub nodes: Vec<Node<T>>,
}

/// Per-parameter-tensor gradients in [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.params.iter().flatten().map(|v| v.as_f64() * v.as_f64()).sum())
    }

    pub fn scale(&mut self, s: T) {
        self.params.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }
}

struct NodeTape<T> {
    agg: Option<Tensor<T>>,
    acts: Vec<Tensor<T>>,
    caches: Vec<Cache>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<T> {
    input: Tensor<T>,
    nodes: Vec<NodeTape<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.nodes.last().and_then(|n| n.acts.last()).expect("non-empty network")
    }

    fn output(&self, src: i64) -> &Tensor<T> {
        if src < 0 {
            &self.input
        } else {
            self.nodes[src as usize].acts.last().expect("non-empty node")
        }
    }
}

fn pool_down<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = (h / f, w / f);
    let mut y = Tensor::zeros(&[n, oh, ow, c]);
    let inv = T::one() / T::of((f * f) as f64);
    for i in 0..n {
        let xs = x.sample(i);
        let ys = y.sample_mut(i);
        for oy in 0..oh {
            for ox in 0..ow {
                let out = &mut ys[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for dy in 0..f {
                    for dx in 0..f {
                        let at = ((oy * f + dy) * w + ox * f + dx) * c;
                        out.iter_mut().zip(&xs[at..at + c]).for_each(|(o, &v)| *o += v);
                    }
                }
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
    }
    y
}

fn aggregate<T: Scalar>(parts: &[&Tensor<T>], factors: &[usize], out: Shape) -> Tensor<T> {
    let n = parts[0].batch();
    let [h, w, c] = out;
    let mut y = Tensor::zeros(&[n, h, w, c]);
    let mut offset = 0;
    for (p, &f) in parts.iter().zip(factors) {
        let pooled;
        let src = if f == 1 {
            *p
        } else {
            pooled = pool_down(p, f);
            &pooled
        };
        let pc = src.shape()[3];
        for i in 0..n {
            let (s, d) = (src.sample(i), y.sample_mut(i));
            for px in 0..h * w {
                d[px * c + offset..px * c + offset + pc].copy_from_slice(&s[px * pc..(px + 1) * pc]);
            }
        }
        offset += pc;
    }
    y
}

/// Gradient of aggregation with respect to input `k`.
fn aggregate_grad<T: Scalar>(dy: &Tensor<T>, offset: usize, in_shape: Shape, f: usize) -> Tensor<T> {
    let n = dy.batch();
    let [h, w, c] = [dy.shape()[1], dy.shape()[2], dy.shape()[3]];
    let pc = in_shape[2];
    let mut dx = Tensor::zeros(&[n, in_shape[0], in_shape[1], pc]);
    let inv = T::one() / T::of((f * f) as f64);
    let iw = in_shape[1];
    for i in 0..n {
        let (g, d) = (dy.sample(i), dx.sample_mut(i));
        for oy in 0..h {
            for ox in 0..w {
                let src = &g[(oy * w + ox) * c + offset..(oy * w + ox) * c + offset + pc];
                for ky in 0..f {
                    for kx in 0..f {
                        let at = ((oy * f + ky) * iw + ox * f + kx) * pc;
                        d[at..at + pc].iter_mut().zip(src).for_each(|(a, &b)| *a = b * inv);
                    }
                }
            }
        }
    }
    dx
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Network<T> {
    /// Resolves shapes and initializes weights.
    pub fn new<R: Rng + ?Sized>(input_shape: Shape, specs: &[NodeSpec], rng: &mut R) -> Result<Self, BuildError> {
        let shapes = infer_shapes(input_shape, specs)?;
        let mut nodes: Vec<Node<T>> = Vec::with_capacity(specs.len());
        for (spec, ns) in specs.iter().zip(shapes) {
            let mut shape = ns.aggregated;
            let mut layers = Vec::with_capacity(spec.layers.len());
            for ls in &spec.layers {
                let layer = Layer::new(ls.clone(), shape, rng).expect("shapes inferred");
                shape = layer.out_shape;
                layers.push(layer);
            }
            nodes.push(Node { inputs: spec.inputs.clone(), in_shapes: ns.in_shapes, factors: ns.factors, layers });
        }
        Ok(Network { input_shape, nodes })
    }

    /// A single-chain network.
    pub fn sequential<R: Rng + ?Sized>(input_shape: Shape, layers: &[LayerSpec], rng: &mut R) -> Result<Self, BuildError> {
        Self::new(input_shape, &[NodeSpec { inputs: vec![-1], layers: layers.to_vec() }], rng)
    }

    pub fn output_shape(&self) -> Shape {
        self.nodes.last().expect("non-empty").out_shape()
    }

    pub fn n_outputs(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape,
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    inputs: n.inputs.clone(),
                    in_shapes: n.in_shapes.clone(),
                    factors: n.factors.clone(),
                    layers: n.layers.iter().map(|l| l.cast()).collect(),
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.nodes.iter().flat_map(|n| n.layers.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.nodes.iter_mut().flat_map(|n| n.layers.iter_mut())
    }

    pub fn params(&self) -> Vec<&Vec<T>> {
        self.layers().flat_map(|l| l.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn param_roles(&self) -> Vec<ParamRole> {
        self.layers().flat_map(|l| l.param_roles().iter().copied()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().flat_map(|l| l.params.iter()).map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients { params: self.params().iter().map(|p| vec![T::zero(); p.len()]).collect() }
    }

    fn check_input(&self, x: &Tensor<T>) {
        let [h, w, c] = self.input_shape;
        assert_eq!(&x.shape()[1..], &[h, w, c], "input shape does not match the network");
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tape<T> {
        self.check_input(x);
        let mut tape = Tape { input: x.clone(), nodes: Vec::with_capacity(self.nodes.len()) };
        for node in &self.nodes {
            let agg = node.aggregates().then(|| {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| tape.output(j)).collect();
                aggregate(&parts, &node.factors, node.layers[0].in_shape)
            });
            let mut acts: Vec<Tensor<T>> = Vec::with_capacity(node.layers.len());
            let mut caches = Vec::with_capacity(node.layers.len());
            for (k, layer) in node.layers.iter().enumerate() {
                let xin = match (k, &agg) {
                    (0, Some(a)) => a,
                    (0, None) => tape.output(node.inputs[0]),
                    _ => &acts[k - 1],
                };
                let (y, cache) = layer.forward(xin, mode);
                acts.push(y);
                caches.push(cache);
            }
            tape.nodes.push(NodeTape { agg, acts, caches });
        }
        tape
    }

    /// Inference-mode logits, releasing intermediate activations as soon as
    /// no later node needs them.
    pub fn predict(&self, x: &Tensor<T>) -> Tensor<T> {
        self.check_input(x);
        let mut last_use = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                if j >= 0 {
                    last_use[j as usize] = i;
                }
            }
        }
        let mut outs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let fetch = |j: i64| if j < 0 { x } else { outs[j as usize].as_ref().expect("still live") };
            let mut cur = if node.aggregates() {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| fetch(j)).collect();
                aggregate(&parts, &node.factors, node.layers[0].in_shape)
            } else {
                node.layers[0].forward(fetch(node.inputs[0]), Mode::Inference).0
            };
            let skip = usize::from(!node.aggregates());
            for layer in &node.layers[skip..] {
                cur = layer.forward(&cur, Mode::Inference).0;
            }
            outs[i] = Some(cur);
            for &j in &node.inputs {
                if j >= 0 && last_use[j as usize] == i {
                    outs[j as usize] = None;
                }
            }
        }
        outs.pop().flatten().expect("last node output")
    }

    /// Reverse pass from `d_logits`. Parameter gradients are accumulated into
    /// `grads` when given; the input gradient is returned when requested.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        d_logits: &Tensor<T>,
        mut grads: Option<&mut Gradients<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let mut offsets = Vec::with_capacity(self.nodes.len());
        let mut acc = 0;
        for node in &self.nodes {
            let mut per = Vec::with_capacity(node.layers.len());
            for l in &node.layers {
                per.push(acc);
                acc += l.params.len();
            }
            offsets.push(per);
        }
        let mut d_nodes: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut d_input: Option<Tensor<T>> = None;
        *d_nodes.last_mut().expect("non-empty") = Some(d_logits.clone());

        for i in (0..self.nodes.len()).rev() {
            let Some(mut d) = d_nodes[i].take() else { continue };
            let node = &self.nodes[i];
            let nt = &tape.nodes[i];
            let feeds_input = node.inputs.iter().any(|&j| j >= 0) || need_input;
            for k in (0..node.layers.len()).rev() {
                let layer = &node.layers[k];
                let xin = match (k, &nt.agg) {
                    (0, Some(a)) => a,
                    (0, None) => tape.output(node.inputs[0]),
                    _ => &nt.acts[k - 1],
                };
                let g = grads.as_deref_mut().map(|g| {
                    let o = offsets[i][k];
                    &mut g.params[o..o + layer.params.len()]
                });
                let need_dx = k > 0 || feeds_input;
                match layer.backward(xin, &nt.caches[k], &d, g, need_dx) {
                    Some(dx) => d = dx,
                    None => break,
                }
                if k == 0 {
                    // distribute to sources
                    if nt.agg.is_none() {
                        let j = node.inputs[0];
                        if j < 0 {
                            add_into(&mut d_input, core::mem::replace(&mut d, Tensor::zeros(&[0])));
                        } else {
                            add_into(&mut d_nodes[j as usize], core::mem::replace(&mut d, Tensor::zeros(&[0])));
                        }
                    } else {
                        let mut offset = 0;
                        for (p, &j) in node.inputs.iter().enumerate() {
                            let s = node.in_shapes[p];
                            if j >= 0 || need_input {
                                let part = aggregate_grad(&d, offset, s, node.factors[p]);
                                if j < 0 {
                                    add_into(&mut d_input, part);
                                } else {
                                    add_into(&mut d_nodes[j as usize], part);
                                }
                            }
                            offset += s[2];
                        }
                    }
                }
            }
        }
        if need_input {
            Some(d_input.unwrap_or_else(|| Tensor::zeros(tape.input.shape())))
        } else {
            None
        }
    }

    /// Applies the batch statistics recorded in a training-mode tape.
    pub fn commit_batch_stats(&mut self, tape: &Tape<T>) {
        for (node, nt) in self.nodes.iter_mut().zip(&tape.nodes) {
            for (layer, cache) in node.layers.iter_mut().zip(&nt.caches) {
                layer.commit_stats(cache);
            }
        }
    }
}
