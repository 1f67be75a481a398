//! Recording reverse-mode differentiation over a fixed primitive set.
//!
//! Every primitive applied through a [`Tape`] is evaluated eagerly and
//! appended as a node, so node order is a topological order by
//! construction. [`Tape::grad`] walks the nodes once in reverse.
//! Leaves are either trainable parameters, named non-trainable inputs, or
//! anonymous constants; [`Tape::stop_grad`] cuts the gradient path while
//! passing the value through unchanged.

use super::{kernels, Tensor};
use crate::error::{shape_err, Error, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf { name: Option<String>, trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Exp(Var),
    Square(Var),
    Tanh(Var),
    Abs(Var),
    Broadcast { src: Var, shape: Vec<usize> },
    Reshape { src: Var, shape: Vec<usize> },
    Slice { src: Var, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<Var>, axis: usize },
    StopGrad(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) => vec![*a, *b],
            Scale(a, _) | Offset(a, _) | Transpose(a) | Sum(a) | Exp(a) | Square(a)
            | Tanh(a) | Abs(a) | StopGrad(a) => vec![*a],
            Broadcast { src, .. } | Reshape { src, .. } | Slice { src, .. } => vec![*src],
            Concat { parts, .. } => parts.clone(),
        }
    }

    pub fn primitive(&self) -> Option<Primitive> {
        use Op::*;
        Some(match self {
            Leaf { .. } => return None,
            Add(..) => Primitive::Add,
            Sub(..) => Primitive::Sub,
            Mul(..) => Primitive::Mul,
            Scale(..) => Primitive::Scale,
            Offset(..) => Primitive::Offset,
            Matmul(..) => Primitive::Matmul,
            Transpose(..) => Primitive::Transpose,
            Sum(..) => Primitive::Sum,
            Exp(..) => Primitive::Exp,
            Square(..) => Primitive::Square,
            Tanh(..) => Primitive::Tanh,
            Abs(..) => Primitive::Abs,
            Broadcast { .. } => Primitive::Broadcast,
            Reshape { .. } => Primitive::Reshape,
            Slice { .. } => Primitive::Slice,
            Concat { .. } => Primitive::Concat,
            StopGrad(..) => Primitive::StopGrad,
        })
    }
}

/// Names of the supported primitives, for building computations from text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    Offset,
    Matmul,
    Transpose,
    Sum,
    Exp,
    Square,
    Tanh,
    Abs,
    Broadcast,
    Reshape,
    Slice,
    Concat,
    StopGrad,
}

impl Primitive {
    pub const ALL: [Primitive; 17] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Offset,
        Primitive::Matmul,
        Primitive::Transpose,
        Primitive::Sum,
        Primitive::Exp,
        Primitive::Square,
        Primitive::Tanh,
        Primitive::Abs,
        Primitive::Broadcast,
        Primitive::Reshape,
        Primitive::Slice,
        Primitive::Concat,
        Primitive::StopGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Offset => "offset",
            Primitive::Matmul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Sum => "sum",
            Primitive::Exp => "exp",
            Primitive::Square => "square",
            Primitive::Tanh => "tanh",
            Primitive::Abs => "abs",
            Primitive::Broadcast => "broadcast",
            Primitive::Reshape => "reshape",
            Primitive::Slice => "slice",
            Primitive::Concat => "concat",
            Primitive::StopGrad => "stop_grad",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Construction(format!("unsupported primitive `{s}`")))
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    label: Option<&'static str>,
}

/// An ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    output: Option<Var>,
}

/// Gradients keyed by leaf name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }

    /// Euclidean norm over all leaves whose name satisfies `pred`.
    pub fn norm_where(&self, pred: impl Fn(&str) -> bool) -> f64 {
        self.by_name
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Records `f` over freshly created leaves and returns the output value
/// together with the tape. Each leaf is `(name, value, trainable)`.
pub fn record<F>(leaves: &[(&str, Tensor, bool)], f: F) -> Result<(Tensor, Tape)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|(name, value, trainable)| tape.leaf(Some(name), value.clone(), *trainable))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.set_output(out);
    Ok((tape.value(out).clone(), tape))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Whether any trainable leaf reaches `v` without passing a stop-gradient.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v);
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    /// Attaches a label to a node so callers can inspect the tape later.
    pub fn mark(&mut self, v: Var, label: &'static str) {
        self.nodes[v.0].label = Some(label);
    }

    /// Number of nodes carrying `label` that lie on a gradient path.
    pub fn count_marked(&self, label: &str, on_grad_path: bool) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.label == Some(label) && n.needs_grad == on_grad_path)
            .count()
    }

    /// Primitive counts over the whole tape.
    pub fn primitive_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            if let Some(p) = n.op.primitive() {
                *out.entry(p.name()).or_insert(0) += 1;
            }
        }
        out
    }

    fn leaf(&mut self, name: Option<&str>, value: Tensor, trainable: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Construction(format!(
                "non-finite leaf {}",
                name.unwrap_or("<constant>")
            )));
        }
        Ok(self.push(
            Op::Leaf {
                name: name.map(str::to_owned),
                trainable,
            },
            value,
            trainable,
        ))
    }

    /// Trainable named leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.leaf(Some(name), value, true)
    }

    /// Named non-trainable leaf; can be overridden on replay.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.leaf(Some(name), value, false)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(None, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn apply_op(&mut self, op: Op) -> Result<Var> {
        let value = {
            let values: Vec<&Tensor> = op.inputs().iter().map(|v| self.value(*v)).collect();
            eval(&op, &values)?
        };
        let needs_grad = match op {
            Op::StopGrad(_) => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        Ok(self.push(op, value, needs_grad))
    }

    /// Applies a parameterless primitive by name-level enum; primitives that
    /// carry extra arguments must go through their dedicated methods.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Construction(format!(
                    "`{prim}` takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        let op = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Matmul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match prim {
                    Primitive::Add => Op::Add(a, b),
                    Primitive::Sub => Op::Sub(a, b),
                    Primitive::Mul => Op::Mul(a, b),
                    _ => Op::Matmul(a, b),
                }
            }
            Primitive::Transpose
            | Primitive::Sum
            | Primitive::Exp
            | Primitive::Square
            | Primitive::Tanh
            | Primitive::Abs
            | Primitive::StopGrad => {
                arity(1)?;
                let a = inputs[0];
                match prim {
                    Primitive::Transpose => Op::Transpose(a),
                    Primitive::Sum => Op::Sum(a),
                    Primitive::Exp => Op::Exp(a),
                    Primitive::Square => Op::Square(a),
                    Primitive::Tanh => Op::Tanh(a),
                    Primitive::Abs => Op::Abs(a),
                    _ => Op::StopGrad(a),
                }
            }
            Primitive::Concat => Op::Concat {
                parts: inputs.to_vec(),
                axis: 0,
            },
            other => {
                return Err(Error::Construction(format!(
                    "`{other}` needs arguments beyond its inputs"
                )))
            }
        };
        self.apply_op(op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply_op(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply_op(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply_op(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply_op(Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply_op(Op::Offset(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply_op(Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply_op(Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply_op(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply_op(Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply_op(Op::Square(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply_op(Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply_op(Op::Abs(a))
    }

    /// Numpy-style broadcast: `a`'s shape is right-aligned against `shape`
    /// and every extent must be 1 or equal.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply_op(Op::Broadcast {
            src: a,
            shape: shape.to_vec(),
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply_op(Op::Reshape {
            src: a,
            shape: shape.to_vec(),
        })
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply_op(Op::Slice {
            src: a,
            axis,
            start,
            len,
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply_op(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        self.apply_op(Op::StopGrad(a))
    }

    /// Re-evaluates every node, substituting named leaves found in
    /// `overrides`, and returns the value of the recorded output.
    pub fn replay(&self, overrides: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let out = self
            .output
            .ok_or_else(|| Error::Contract("tape has no recorded output".into()))?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf { name, .. } => match name.as_ref().and_then(|n| overrides.get(n)) {
                    Some(t) => {
                        node.value.check_same_shape(t)?;
                        t.clone()
                    }
                    None => node.value.clone(),
                },
                op => {
                    let ins: Vec<&Tensor> = op.inputs().iter().map(|v| &values[v.0]).collect();
                    eval(op, &ins)?
                }
            };
            values.push(v);
        }
        Ok(values.swap_remove(out.0))
    }

    /// Gradient of `seed · output` with respect to every named leaf, using the
    /// recorded output.
    pub fn grad(&self, seed: &Tensor) -> Result<Gradients> {
        let out = self
            .output
            .ok_or_else(|| Error::Contract("tape has no recorded output".into()))?;
        self.grad_of(out, seed)
    }

    /// Gradient of `seed · v` with respect to every named leaf. Non-trainable
    /// named leaves are reported with exact zeros.
    pub fn grad_of(&self, v: Var, seed: &Tensor) -> Result<Gradients> {
        let out_shape = self.shape(v);
        if seed.shape() != out_shape {
            return Err(shape_err!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                out_shape
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; v.0 + 1];
        if self.nodes[v.0].needs_grad {
            adj[v.0] = Some(seed.data().to_vec());
        }
        for idx in (0..=v.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf { .. } = node.op {
                adj[idx] = Some(g);
                continue;
            }
            self.backprop(idx, &g, &mut adj);
        }

        let mut by_name = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                name: Some(name), ..
            } = &node.op
            {
                let shape = node.value.shape().to_vec();
                let g = adj
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                let entry = by_name
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(&shape));
                for (e, gv) in entry.data_mut().iter_mut().zip(g) {
                    *e += gv;
                }
            }
        }
        Ok(Gradients { by_name })
    }

    fn backprop(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf { .. } | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| {
                    for ((x, y), z) in s.iter_mut().zip(g).zip(bv) {
                        *x += y * z;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, y), z) in s.iter_mut().zip(g).zip(av) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for (x, y) in s.iter_mut().zip(g) {
                    *x += c * y;
                }
            }),
            Op::Offset(a, _) => acc(*a, &mut |s| add_into(s, g)),
            Op::Matmul(a, b) => {
                let (m, k) = val(*a).as_matrix().expect("matmul lhs");
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let bv = val(*b).data();
                    acc(*a, &mut |s| kernels::matmul_nt(g, bv, s, m, n, k));
                }
                if wants(*b) {
                    let av = val(*a).data();
                    acc(*b, &mut |s| kernels::matmul_tn(av, g, s, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).as_matrix().expect("transpose input");
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Exp(a) => {
                let out = node.value.data();
                acc(*a, &mut |s| {
                    for ((x, y), o) in s.iter_mut().zip(g).zip(out) {
                        *x += y * o;
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a).data();
                acc(*a, &mut |s| {
                    for ((x, y), z) in s.iter_mut().zip(g).zip(av) {
                        *x += 2.0 * z * y;
                    }
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                acc(*a, &mut |s| {
                    for ((x, y), o) in s.iter_mut().zip(g).zip(out) {
                        *x += y * (1.0 - o * o);
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a).data();
                acc(*a, &mut |s| {
                    for ((x, y), z) in s.iter_mut().zip(g).zip(av) {
                        *x += y * sign(*z);
                    }
                });
            }
            Op::Broadcast { src, shape } => {
                let map = broadcast_index_map(val(*src).shape(), shape).expect("broadcast");
                acc(*src, &mut |s| {
                    for (o, &i) in map.iter().enumerate() {
                        s[i] += g[o];
                    }
                });
            }
            Op::Reshape { src, .. } => acc(*src, &mut |s| add_into(s, g)),
            Op::Slice {
                src,
                axis,
                start,
                len,
            } => {
                let (outer, dim, inner) = split_axis(val(*src).shape(), *axis);
                acc(*src, &mut |s| {
                    for o in 0..outer {
                        let src_off = (o * dim + start) * inner;
                        let g_off = o * len * inner;
                        add_into(
                            &mut s[src_off..src_off + len * inner],
                            &g[g_off..g_off + len * inner],
                        );
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let d = val(*p).shape()[*axis];
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            let g_off = (o * total + offset) * inner;
                            add_into(
                                &mut s[o * d * inner..(o + 1) * d * inner],
                                &g[g_off..g_off + d * inner],
                            );
                        }
                    });
                    offset += d;
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each flat output index of the broadcast, the flat source index.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(shape_err!("cannot broadcast {src:?} to {dst:?}"));
    }
    let pad = dst.len() - src.len();
    let padded: Vec<usize> = std::iter::repeat(1).take(pad).chain(src.iter().copied()).collect();
    for (s, d) in padded.iter().zip(dst) {
        if *s != 1 && s != d {
            return Err(shape_err!("cannot broadcast {src:?} to {dst:?}"));
        }
    }
    // Source strides, zeroed on broadcast axes.
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1;
    for i in (0..dst.len()).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let n: usize = dst.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.zip_map(b, f)
}

/// Forward evaluation shared by recording and replay.
fn eval(op: &Op, ins: &[&Tensor]) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::Add(..) => elementwise(ins[0], ins[1], |a, b| a + b)?,
        Op::Sub(..) => elementwise(ins[0], ins[1], |a, b| a - b)?,
        Op::Mul(..) => elementwise(ins[0], ins[1], |a, b| a * b)?,
        Op::Scale(_, c) => ins[0].map(|v| v * c),
        Op::Offset(_, c) => ins[0].map(|v| v + c),
        Op::Matmul(..) => ins[0].matmul(ins[1])?,
        Op::Transpose(_) => ins[0].transpose()?,
        Op::Sum(_) => Tensor::scalar(ins[0].sum()),
        Op::Exp(_) => ins[0].map(f64::exp),
        Op::Square(_) => ins[0].map(|v| v * v),
        Op::Tanh(_) => ins[0].map(f64::tanh),
        Op::Abs(_) => ins[0].map(f64::abs),
        Op::StopGrad(_) => ins[0].clone(),
        Op::Reshape { shape, .. } => ins[0].clone().reshape(shape)?,
        Op::Broadcast { shape, .. } => {
            let map = broadcast_index_map(ins[0].shape(), shape)?;
            let src = ins[0].data();
            Tensor::from_parts(shape.clone(), map.iter().map(|&i| src[i]).collect())
        }
        Op::Slice {
            axis, start, len, ..
        } => {
            let shape = ins[0].shape();
            if *axis >= shape.len() || *len == 0 || start + len > shape[*axis] {
                return Err(shape_err!(
                    "slice axis {axis} [{start}, {}) out of bounds for {shape:?}",
                    start + len
                ));
            }
            let (outer, dim, inner) = split_axis(shape, *axis);
            let src = ins[0].data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let off = (o * dim + start) * inner;
                out.extend_from_slice(&src[off..off + len * inner]);
            }
            let mut new_shape = shape.to_vec();
            new_shape[*axis] = *len;
            Tensor::from_parts(new_shape, out)
        }
        Op::Concat { axis, .. } => {
            let first = ins
                .first()
                .ok_or_else(|| Error::Construction("concat of zero tensors".into()))?
                .shape();
            if *axis >= first.len() {
                return Err(shape_err!("concat axis {axis} out of range for {first:?}"));
            }
            for t in ins {
                let s = t.shape();
                let ok = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(shape_err!("concat {first:?} with {s:?} on axis {axis}"));
                }
            }
            let total: usize = ins.iter().map(|t| t.shape()[*axis]).sum();
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in ins {
                    let d = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::from_parts(shape, out)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn square_value_and_grad() {
        let (v, tape) = record(&[("x", s(3.0), true)], |t, x| t.square(x[0])).unwrap();
        assert_eq!(v.item().unwrap(), 9.0);
        let g = tape.grad(&s(1.0)).unwrap();
        assert_eq!(g.get("x").unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn stop_grad_is_identity_on_values() {
        let (v, tape) = record(&[("x", s(2.0), true)], |t, x| {
            let d = t.stop_grad(x[0])?;
            t.add(d, x[0])
        })
        .unwrap();
        assert_eq!(v.item().unwrap(), 4.0);
        assert_eq!(tape.grad(&s(1.0)).unwrap().get("x").unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn stop_grad_detaches_one_factor() {
        let (_, tape) = record(&[("x", s(5.0), true)], |t, x| {
            let d = t.stop_grad(x[0])?;
            t.mul(d, x[0])
        })
        .unwrap();
        assert_eq!(tape.grad(&s(1.0)).unwrap().get("x").unwrap().item().unwrap(), 5.0);
    }

    #[test]
    fn only_stop_grad_path_gives_exact_zero() {
        let (_, tape) = record(&[("x", s(1.5), true), ("y", s(-0.5), true)], |t, v| {
            let d = t.stop_grad(v[0])?;
            let e = t.exp(d)?;
            t.mul(e, v[1])
        })
        .unwrap();
        let g = tape.grad(&s(1.0)).unwrap();
        assert_eq!(g.get("x").unwrap().item().unwrap(), 0.0);
        assert_eq!(g.get("y").unwrap().item().unwrap(), 1.5f64.exp());
    }

    fn affine_chain(t: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
        let h = t.matmul(w1, x)?;
        let h = t.offset(h, 0.25)?;
        let y = t.matmul(w2, h)?;
        t.offset(y, -1.0)
    }

    #[test]
    fn two_layer_affine_matches_eager() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[4, 1], &mut rng);
        let w1 = Tensor::randn(&[4, 4], &mut rng);
        let w2 = Tensor::randn(&[4, 4], &mut rng);
        let (v, tape) = record(
            &[("x", x.clone(), false), ("w1", w1.clone(), true), ("w2", w2.clone(), true)],
            |t, l| affine_chain(t, l[0], l[1], l[2]),
        )
        .unwrap();
        let eager = w2
            .matmul(&w1.matmul(&x).unwrap().map(|v| v + 0.25))
            .unwrap()
            .map(|v| v - 1.0);
        assert_eq!(v, eager);
        assert_eq!(tape.replay(&BTreeMap::new()).unwrap(), v);
    }

    #[test]
    fn seed_shape_mismatch_is_shape_error() {
        let (_, tape) = record(&[("x", Tensor::zeros(&[2]), true)], |t, x| t.exp(x[0])).unwrap();
        assert!(matches!(tape.grad(&s(1.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn unsupported_primitive_and_arity() {
        assert!(matches!("conv2d".parse::<Primitive>(), Err(Error::Construction(_))));
        assert_eq!("matmul".parse::<Primitive>().unwrap(), Primitive::Matmul);
        let mut t = Tape::new();
        let x = t.param("x", s(1.0)).unwrap();
        assert!(matches!(t.apply(Primitive::Add, &[x]), Err(Error::Construction(_))));
        assert!(matches!(t.apply(Primitive::Slice, &[x]), Err(Error::Construction(_))));
        let y = t.apply("square".parse().unwrap(), &[x]).unwrap();
        assert_eq!(t.value(y).item().unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_on_record() {
        let r = record(
            &[("a", Tensor::zeros(&[2]), true), ("b", Tensor::zeros(&[3]), true)],
            |t, v| t.add(v[0], v[1]),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    /// Three tanh layers, 17 parameters, scalar output.
    fn net(t: &mut Tape, l: &[Var]) -> Result<Var> {
        let (x, w1, b1, w2, b2, w3) = (l[0], l[1], l[2], l[3], l[4], l[5]);
        let h = t.matmul(x, w1)?;
        let bb = t.broadcast(b1, &[1, 2])?;
        let h = t.add(h, bb)?;
        let h = t.tanh(h)?;
        let h = t.matmul(h, w2)?;
        let h = t.add(h, b2)?;
        let h = t.tanh(h)?;
        let y = t.matmul(h, w3)?;
        let y = t.exp(y)?;
        let y = t.square(y)?;
        t.sum(y)
    }

    #[test]
    fn random_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut leaves = BTreeMap::new();
        leaves.insert("w1".to_string(), Tensor::randn_scaled(&[2, 2], 0.7, &mut rng));
        leaves.insert("b1".to_string(), Tensor::randn_scaled(&[2], 0.7, &mut rng));
        leaves.insert("w2".to_string(), Tensor::randn_scaled(&[2, 2], 0.7, &mut rng));
        leaves.insert("b2".to_string(), Tensor::randn_scaled(&[1, 2], 0.7, &mut rng));
        leaves.insert("w3".to_string(), Tensor::randn_scaled(&[2, 1], 0.7, &mut rng));
        leaves.insert("x".to_string(), Tensor::randn_scaled(&[1, 2], 0.7, &mut rng));
        leaves.insert("s".to_string(), Tensor::randn_scaled(&[1], 0.7, &mut rng));
        let n_params: usize = leaves.values().map(Tensor::len).sum();
        assert_eq!(n_params, 17);

        let names = ["x", "w1", "b1", "w2", "b2", "w3", "s"];
        let build = |l: &BTreeMap<String, Tensor>| {
            let spec: Vec<(&str, Tensor, bool)> =
                names.iter().map(|n| (*n, l[*n].clone(), true)).collect();
            record(&spec, |t, v| {
                let y = net(t, v)?;
                let sb = t.reshape(v[6], &[])?;
                let sq = t.square(sb)?;
                t.add(y, sq)
            })
        };
        let (_, tape) = build(&leaves).unwrap();
        let analytic = tape.grad(&s(1.0)).unwrap();
        let numeric = finite_diff(|l| Ok(build(l)?.0), &leaves, 1e-6).unwrap();
        for name in names {
            let err = crate::tensor::max_relative_error(
                analytic.get(name).unwrap(),
                &numeric[name],
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn slice_concat_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut leaves = BTreeMap::new();
        leaves.insert("a".to_string(), Tensor::randn(&[3, 4], &mut rng));
        leaves.insert("b".to_string(), Tensor::randn(&[3, 1], &mut rng));
        leaves.insert("c".to_string(), Tensor::randn(&[2, 4], &mut rng));
        let build = |l: &BTreeMap<String, Tensor>| {
            record(
                &[("a", l["a"].clone(), true), ("b", l["b"].clone(), true), ("c", l["c"].clone(), true)],
                |t, v| {
                    let bb = t.broadcast(v[1], &[3, 4])?;
                    let x = t.mul(v[0], bb)?;
                    let top = t.slice(x, 0, 1, 2)?;
                    let cat = t.concat(&[top, v[2]], 0)?;
                    let side = t.concat(&[cat, cat], 1)?;
                    let tr = t.transpose(side)?;
                    let ab = t.abs(tr)?;
                    let q = t.square(ab)?;
                    let e = t.scale(q, 0.3)?;
                    let sb = t.sub(e, q)?;
                    t.sum(sb)
                },
            )
        };
        let (_, tape) = build(&leaves).unwrap();
        let analytic = tape.grad(&s(1.0)).unwrap();
        let numeric = finite_diff(|l| Ok(build(l)?.0), &leaves, 1e-6).unwrap();
        for k in ["a", "b", "c"] {
            let err =
                crate::tensor::max_relative_error(analytic.get(k).unwrap(), &numeric[k]).unwrap();
            assert!(err < 1e-7, "{k}: {err}");
        }
    }

    #[test]
    fn marks_and_counts() {
        let mut t = Tape::new();
        let x = t.param("x", s(1.0)).unwrap();
        let c = t.constant(s(2.0)).unwrap();
        let a = t.mul(x, c).unwrap();
        let b = t.mul(c, c).unwrap();
        t.mark(a, "step");
        t.mark(b, "step");
        assert_eq!(t.count_marked("step", true), 1);
        assert_eq!(t.count_marked("step", false), 1);
        assert_eq!(t.primitive_counts()["mul"], 2);
    }

    proptest! {
        #[test]
        fn backward_is_linear_in_seed(
            seed in any::<u64>(),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::randn(&[3, 3], &mut rng);
            let x = Tensor::randn(&[3, 2], &mut rng);
            let (_, tape) = record(&[("w", w, true), ("x", x, true)], |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.tanh(h)?;
                t.exp(h)
            }).unwrap();
            let s1 = Tensor::randn(&[3, 2], &mut rng);
            let s2 = Tensor::randn(&[3, 2], &mut rng);
            let mut combo = s1.scale(a);
            combo.axpy(b, &s2).unwrap();
            let g = tape.grad(&combo).unwrap();
            let g1 = tape.grad(&s1).unwrap();
            let g2 = tape.grad(&s2).unwrap();
            for name in ["w", "x"] {
                let mut expect = g1.get(name).unwrap().scale(a);
                expect.axpy(b, g2.get(name).unwrap()).unwrap();
                prop_assert!(g.get(name).unwrap().max_abs_diff(&expect).unwrap() <= 1e-12);
            }
        }

        #[test]
        fn replay_is_bit_identical(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::randn(&[4, 4], &mut rng);
            let x = Tensor::randn(&[4, 1], &mut rng);
            let build = || record(&[("w", w.clone(), true), ("x", x.clone(), false)], |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.tanh(h)?;
                let h = t.square(h)?;
                t.sum(h)
            }).unwrap();
            let (v1, tape) = build();
            let (v2, _) = build();
            prop_assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
            let r = tape.replay(&BTreeMap::new()).unwrap();
            prop_assert_eq!(r.data()[0].to_bits(), v1.data()[0].to_bits());
        }
    }
}
