use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Bindings;
use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Floating-point precision used for node values during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Values are rounded to single precision after every node.
    F32,
}

/// Evaluation settings for a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Mode {
    pub fn eval() -> Self {
        Mode::default()
    }

    pub fn train(seed: u64) -> Self {
        Mode {
            training: true,
            seed,
            precision: Precision::F64,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Param,
    Const,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    MaskedMax,
    MaskedMean,
    Concat,
    Dropout,
    Broadcast,
    Gather,
    TimeStep,
    StackTime,
    Conv1d,
    Reshape,
    Sum,
    SumLast,
    Scale,
    AddScalar,
    Bce,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Input,
        OpKind::Param,
        OpKind::Const,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::MaskedMax,
        OpKind::MaskedMean,
        OpKind::Concat,
        OpKind::Dropout,
        OpKind::Broadcast,
        OpKind::Gather,
        OpKind::TimeStep,
        OpKind::StackTime,
        OpKind::Conv1d,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::SumLast,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::Const => "const",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::MaskedMax => "masked_max",
            OpKind::MaskedMean => "masked_mean",
            OpKind::Concat => "concat",
            OpKind::Dropout => "dropout",
            OpKind::Broadcast => "broadcast",
            OpKind::Gather => "gather",
            OpKind::TimeStep => "time_step",
            OpKind::StackTime => "stack_time",
            OpKind::Conv1d => "conv1d",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::SumLast => "sum_last",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Result<OpKind> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::UnknownOp(name.to_string()))
    }

    /// Leaf kinds carry no computation and have no gradient rule of their own.
    pub fn is_leaf(self) -> bool {
        matches!(self, OpKind::Input | OpKind::Param | OpKind::Const)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Const(Array),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax { x: NodeId, mask: Option<NodeId> },
    MaskedMax { x: NodeId, mask: NodeId },
    MaskedMean { x: NodeId, mask: NodeId },
    Concat(Vec<NodeId>),
    Dropout { x: NodeId, keep: f64 },
    Broadcast { x: NodeId, axis: usize, count: usize },
    Gather { table: NodeId, rows: Vec<Option<usize>>, prefix: Vec<usize> },
    TimeStep { x: NodeId, t: usize },
    StackTime(Vec<NodeId>),
    Conv1d { x: NodeId, w: NodeId, b: NodeId, width: usize },
    Reshape { x: NodeId, shape: Vec<usize> },
    Sum(NodeId),
    SumLast(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Bce { y: NodeId, labels: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input(_) => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Const(_) => OpKind::Const,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::MaskedMax { .. } => OpKind::MaskedMax,
            Op::MaskedMean { .. } => OpKind::MaskedMean,
            Op::Concat(_) => OpKind::Concat,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Broadcast { .. } => OpKind::Broadcast,
            Op::Gather { .. } => OpKind::Gather,
            Op::TimeStep { .. } => OpKind::TimeStep,
            Op::StackTime(_) => OpKind::StackTime,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::SumLast(_) => OpKind::SumLast,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Bce { .. } => OpKind::Bce,
        }
    }

    /// Inputs that receive gradient (masks are excluded).
    fn differentiable_inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::SumLast(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _) => vec![*x],
            Op::Softmax { x, .. }
            | Op::MaskedMax { x, .. }
            | Op::MaskedMean { x, .. }
            | Op::Dropout { x, .. }
            | Op::Broadcast { x, .. }
            | Op::TimeStep { x, .. }
            | Op::Reshape { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat(xs) | Op::StackTime(xs) => xs.clone(),
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Bce { y, .. } => vec![*y],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// A computation recorded in topological order. Nodes can only refer to
/// nodes created before them, so the graph is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    inputs: HashMap<String, NodeId>,
    fault: Option<OpKind>,
}

/// Per-node values from a forward pass.
#[derive(Clone, Debug)]
pub struct Values {
    values: Vec<Array>,
    aux: Vec<Aux>,
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Mask(Vec<f64>),
    ArgMax(Vec<usize>),
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Array {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gradients of a scalar loss with respect to every parameter and free input
/// appearing in the graph.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Array>,
    pub inputs: BTreeMap<String, Array>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Negate the backward rule of one op kind. Used to check that the
    /// gradient harness catches broken derivatives.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Input(_) | Op::Param(_) => true,
            Op::Const(_) => false,
            other => other
                .differentiable_inputs()
                .iter()
                .any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Free input bound by name at forward time.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Trainable parameter bound by name. Repeated calls with the same name
    /// return the same node, so weights are shared wherever they are used.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// Softmax along the last axis. Positions where `mask` is zero get weight
    /// zero and are excluded from the normalization.
    pub fn softmax(&mut self, x: NodeId, mask: Option<NodeId>) -> NodeId {
        self.push(Op::Softmax { x, mask })
    }

    /// Max over the time axis (second to last) of `[.., T, d]`, skipping
    /// positions where `mask` (`[.., T]`) is zero.
    pub fn masked_max(&mut self, x: NodeId, mask: NodeId) -> NodeId {
        self.push(Op::MaskedMax { x, mask })
    }

    /// Mean over the time axis, skipping masked positions.
    pub fn masked_mean(&mut self, x: NodeId, mask: NodeId) -> NodeId {
        self.push(Op::MaskedMean { x, mask })
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat of nothing");
        self.push(Op::Concat(xs.to_vec()))
    }

    /// Inverted dropout with keep probability `keep`: identity outside
    /// training mode.
    pub fn dropout(&mut self, x: NodeId, keep: f64) -> NodeId {
        assert!(keep > 0.0 && keep <= 1.0, "keep probability {keep}");
        self.push(Op::Dropout { x, keep })
    }

    /// Repeat `x` `count` times along a new axis inserted at `axis`.
    pub fn broadcast(&mut self, x: NodeId, axis: usize, count: usize) -> NodeId {
        self.push(Op::Broadcast { x, axis, count })
    }

    /// Rows of `table` (`[V, d]`) arranged into shape `prefix + [d]`; `None`
    /// yields a zero row.
    pub fn gather(&mut self, table: NodeId, rows: Vec<Option<usize>>, prefix: Vec<usize>) -> NodeId {
        assert_eq!(rows.len(), prefix.iter().product::<usize>());
        self.push(Op::Gather {
            table,
            rows,
            prefix,
        })
    }

    /// Slice `[.., T, d]` at time `t`, giving `[.., d]`.
    pub fn time_step(&mut self, x: NodeId, t: usize) -> NodeId {
        self.push(Op::TimeStep { x, t })
    }

    /// Stack `[.., d]` arrays into `[.., T, d]`.
    pub fn stack_time(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "stack of nothing");
        self.push(Op::StackTime(xs.to_vec()))
    }

    /// Valid 1-d convolution over the time axis of `[.., T, d]` with weights
    /// `[width * d, f]` and bias `[f]`, giving `[.., T - width + 1, f]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, width: usize) -> NodeId {
        assert!(width > 0);
        self.push(Op::Conv1d { x, w, b, width })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape { x, shape })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumLast(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(x, c))
    }

    /// Summed binary cross-entropy of `y` against `labels`, shape `[1]`.
    /// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, y: NodeId, labels: Vec<f64>) -> NodeId {
        self.push(Op::Bce { y, labels })
    }

    /// `x @ w + b` with the bias broadcast over every leading position.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId, rows: usize) -> NodeId {
        let xw = self.matmul(x, w);
        let bb = self.broadcast(b, 0, rows);
        self.add(xw, bb)
    }

    pub fn forward(&self, bindings: &dyn Bindings, mode: &Mode) -> Result<Values> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let (mut value, extra) = eval_node(i, &node.op, &values, bindings, mode)?;
            if mode.precision == Precision::F32 {
                for v in value.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
            if !value.is_finite() {
                return Err(Error::NonFinite { node: i });
            }
            values.push(value);
            aux.push(extra);
        }
        Ok(Values { values, aux })
    }

    pub fn backward(&self, loss: NodeId, values: &Values) -> Result<Gradients> {
        if values.len() != self.nodes.len() {
            return Err(Error::InvalidArgument(
                "values do not belong to this graph".into(),
            ));
        }
        let loss_value = values.get(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::from_parts(loss_value.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input(_) | Op::Param(_) | Op::Const(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                op => {
                    let mut contributions =
                        backprop_node(op, &g, &values.values[i], values, &values.aux[i]);
                    if self.fault == Some(op.kind()) {
                        for (_, c) in &mut contributions {
                            for v in c.data_mut() {
                                *v = -*v;
                            }
                        }
                    }
                    for (id, c) in contributions {
                        if !self.nodes[id.0].requires_grad {
                            continue;
                        }
                        match &mut grads[id.0] {
                            Some(acc) => acc.add_assign(&c),
                            slot => *slot = Some(c),
                        }
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (name, &id) in &self.params {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Array::zeros(values.get(id).shape()));
            out.params.insert(name.clone(), g);
        }
        for (name, &id) in &self.inputs {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Array::zeros(values.get(id).shape()));
            out.inputs.insert(name.clone(), g);
        }
        Ok(out)
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(node: usize, detail: impl Into<String>) -> Error {
    Error::Shape {
        node,
        detail: detail.into(),
    }
}

/// Split a shape `[.., T, d]` into (outer, T, d).
fn time_dims(node: usize, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(node, format!("need rank >= 2, got {shape:?}")));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

fn check_mask(node: usize, x: &[usize], mask: &[usize]) -> Result<()> {
    if mask != &x[..x.len() - 1] {
        return Err(shape_err(
            node,
            format!("mask {mask:?} does not match time layout of {x:?}"),
        ));
    }
    Ok(())
}

fn same_shape(node: usize, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            node,
            format!("operands {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_with(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn eval_node(
    i: usize,
    op: &Op,
    vals: &[Array],
    bindings: &dyn Bindings,
    mode: &Mode,
) -> Result<(Array, Aux)> {
    let v = |id: &NodeId| &vals[id.0];
    let out = match op {
        Op::Input(name) | Op::Param(name) => bindings
            .lookup(name)
            .cloned()
            .ok_or_else(|| Error::Unbound(name.clone()))?,
        Op::Const(a) => a.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            if b.rank() != 2 || a.last_dim() != b.shape()[0] {
                return Err(shape_err(
                    i,
                    format!("matmul {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.len() / k;
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            let mut shape = a.shape()[..a.rank() - 1].to_vec();
            shape.push(n);
            Array::from_parts(shape, out)
        }
        Op::Add(a, b) => {
            same_shape(i, v(a), v(b))?;
            zip_with(v(a), v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(i, v(a), v(b))?;
            zip_with(v(a), v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(i, v(a), v(b))?;
            zip_with(v(a), v(b), |x, y| x * y)
        }
        Op::Div(a, b) => {
            same_shape(i, v(a), v(b))?;
            zip_with(v(a), v(b), |x, y| x / y)
        }
        Op::Sigmoid(x) => v(x).map(sigmoid),
        Op::Tanh(x) => v(x).map(f64::tanh),
        Op::Relu(x) => v(x).map(|z| if z > 0.0 { z } else { 0.0 }),
        Op::Softmax { x, mask } => {
            let x = v(x);
            let mask = match mask {
                Some(m) => {
                    same_shape(i, x, v(m))?;
                    Some(v(m).data())
                }
                None => None,
            };
            let d = x.last_dim();
            let mut out = vec![0.0; x.len()];
            for (r, row) in x.data().chunks(d).enumerate() {
                let on = |j: usize| mask.is_none_or(|m| m[r * d + j] != 0.0);
                let mx = (0..d)
                    .filter(|&j| on(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(shape_err(i, format!("softmax row {r} fully masked")));
                }
                let mut z = 0.0;
                for j in (0..d).filter(|&j| on(j)) {
                    let e = (row[j] - mx).exp();
                    out[r * d + j] = e;
                    z += e;
                }
                for o in &mut out[r * d..(r + 1) * d] {
                    *o /= z;
                }
            }
            Array::from_parts(x.shape().to_vec(), out)
        }
        Op::MaskedMax { x, mask } => {
            let (x, m) = (v(x), v(mask));
            check_mask(i, x.shape(), m.shape())?;
            let (outer, t_len, d) = time_dims(i, x.shape())?;
            let mut out = vec![0.0; outer * d];
            let mut arg = vec![0usize; outer * d];
            for o in 0..outer {
                for j in 0..d {
                    let mut best: Option<(usize, f64)> = None;
                    for t in 0..t_len {
                        if m.data()[o * t_len + t] == 0.0 {
                            continue;
                        }
                        let val = x.data()[(o * t_len + t) * d + j];
                        // strict comparison keeps the lowest index on ties
                        if best.is_none_or(|(_, b)| val > b) {
                            best = Some((t, val));
                        }
                    }
                    let (t, val) =
                        best.ok_or_else(|| shape_err(i, format!("row {o} fully masked")))?;
                    out[o * d + j] = val;
                    arg[o * d + j] = t;
                }
            }
            let shape = drop_time_axis(x.shape());
            return Ok((Array::from_parts(shape, out), Aux::ArgMax(arg)));
        }
        Op::MaskedMean { x, mask } => {
            let (x, m) = (v(x), v(mask));
            check_mask(i, x.shape(), m.shape())?;
            let (outer, t_len, d) = time_dims(i, x.shape())?;
            let mut out = vec![0.0; outer * d];
            for o in 0..outer {
                let count: f64 = m.data()[o * t_len..(o + 1) * t_len]
                    .iter()
                    .filter(|&&w| w != 0.0)
                    .count() as f64;
                if count == 0.0 {
                    return Err(shape_err(i, format!("row {o} fully masked")));
                }
                for t in 0..t_len {
                    if m.data()[o * t_len + t] == 0.0 {
                        continue;
                    }
                    let row = &x.data()[(o * t_len + t) * d..(o * t_len + t + 1) * d];
                    for (acc, &val) in out[o * d..(o + 1) * d].iter_mut().zip(row) {
                        *acc += val / count;
                    }
                }
            }
            Array::from_parts(drop_time_axis(x.shape()), out)
        }
        Op::Concat(xs) => {
            let first = v(&xs[0]).shape();
            let lead = &first[..first.len() - 1];
            let rows: usize = lead.iter().product();
            let mut width = 0;
            for x in xs {
                let s = v(x).shape();
                if s.len() != first.len() || &s[..s.len() - 1] != lead {
                    return Err(shape_err(
                        i,
                        format!("concat {:?} with {:?}", first, s),
                    ));
                }
                width += v(x).last_dim();
            }
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for x in xs {
                    let a = v(x);
                    let d = a.last_dim();
                    out.extend_from_slice(&a.data()[r * d..(r + 1) * d]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Array::from_parts(shape, out)
        }
        Op::Dropout { x, keep } => {
            let x = v(x);
            if !mode.training || *keep >= 1.0 {
                return Ok((x.clone(), Aux::None));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mode.seed);
            rng.set_stream(i as u64);
            let scale = 1.0 / keep;
            let mask: Vec<f64> = (0..x.len())
                .map(|_| if rng.gen::<f64>() < *keep { scale } else { 0.0 })
                .collect();
            let out = x.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
            return Ok((
                Array::from_parts(x.shape().to_vec(), out),
                Aux::Mask(mask),
            ));
        }
        Op::Broadcast { x, axis, count } => {
            let x = v(x);
            if *axis > x.rank() || *count == 0 {
                return Err(shape_err(
                    i,
                    format!("broadcast axis {axis} x{count} of {:?}", x.shape()),
                ));
            }
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[*axis..].iter().product();
            let mut out = Vec::with_capacity(x.len() * count);
            for o in 0..outer {
                let block = &x.data()[o * inner..(o + 1) * inner];
                for _ in 0..*count {
                    out.extend_from_slice(block);
                }
            }
            let mut shape = x.shape().to_vec();
            shape.insert(*axis, *count);
            Array::from_parts(shape, out)
        }
        Op::Gather {
            table,
            rows,
            prefix,
        } => {
            let t = v(table);
            if t.rank() != 2 {
                return Err(shape_err(i, format!("gather table {:?}", t.shape())));
            }
            let d = t.shape()[1];
            let mut out = vec![0.0; rows.len() * d];
            for (r, row) in rows.iter().enumerate() {
                if let Some(k) = *row {
                    if k >= t.shape()[0] {
                        return Err(shape_err(i, format!("row {k} out of {:?}", t.shape())));
                    }
                    out[r * d..(r + 1) * d].copy_from_slice(&t.data()[k * d..(k + 1) * d]);
                }
            }
            let mut shape = prefix.clone();
            shape.push(d);
            Array::from_parts(shape, out)
        }
        Op::TimeStep { x, t } => {
            let x = v(x);
            let (outer, t_len, d) = time_dims(i, x.shape())?;
            if *t >= t_len {
                return Err(shape_err(i, format!("time {t} of {:?}", x.shape())));
            }
            let mut out = Vec::with_capacity(outer * d);
            for o in 0..outer {
                let start = (o * t_len + t) * d;
                out.extend_from_slice(&x.data()[start..start + d]);
            }
            Array::from_parts(drop_time_axis(x.shape()), out)
        }
        Op::StackTime(xs) => {
            let first = v(&xs[0]).shape().to_vec();
            for x in xs {
                if v(x).shape() != first.as_slice() {
                    return Err(shape_err(
                        i,
                        format!("stack {:?} with {:?}", first, v(x).shape()),
                    ));
                }
            }
            let d = *first.last().unwrap();
            let outer = v(&xs[0]).len() / d;
            let t_len = xs.len();
            let mut out = vec![0.0; outer * t_len * d];
            for (t, x) in xs.iter().enumerate() {
                let a = v(x).data();
                for o in 0..outer {
                    out[(o * t_len + t) * d..(o * t_len + t + 1) * d]
                        .copy_from_slice(&a[o * d..(o + 1) * d]);
                }
            }
            let mut shape = first[..first.len() - 1].to_vec();
            shape.push(t_len);
            shape.push(d);
            Array::from_parts(shape, out)
        }
        Op::Conv1d { x, w, b, width } => {
            let (x, w, b) = (v(x), v(w), v(b));
            let (outer, t_len, d) = time_dims(i, x.shape())?;
            if t_len < *width
                || w.rank() != 2
                || w.shape()[0] != width * d
                || b.shape() != [w.shape()[1]]
            {
                return Err(shape_err(
                    i,
                    format!(
                        "conv1d width {width} over {:?} with w {:?}, b {:?}",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    ),
                ));
            }
            let f = w.shape()[1];
            let positions = t_len - width + 1;
            let mut out = vec![0.0; outer * positions * f];
            for o in 0..outer {
                for p in 0..positions {
                    let start = (o * t_len + p) * d;
                    let window = &x.data()[start..start + width * d];
                    let dst = &mut out[(o * positions + p) * f..(o * positions + p + 1) * f];
                    dst.copy_from_slice(b.data());
                    matmul_into_acc(window, w.data(), dst, 1, width * d, f);
                }
            }
            let mut shape = x.shape()[..x.rank() - 2].to_vec();
            shape.push(positions);
            shape.push(f);
            Array::from_parts(shape, out)
        }
        Op::Reshape { x, shape } => v(x)
            .clone()
            .reshaped(shape.clone())
            .map_err(|e| shape_err(i, e.to_string()))?,
        Op::Sum(x) => Array::scalar(v(x).sum()),
        Op::SumLast(x) => {
            let x = v(x);
            let d = x.last_dim();
            let data: Vec<f64> = x.data().chunks(d).map(|c| c.iter().sum()).collect();
            let shape = if x.rank() == 1 {
                vec![1]
            } else {
                x.shape()[..x.rank() - 1].to_vec()
            };
            Array::from_parts(shape, data)
        }
        Op::Scale(x, c) => v(x).map(|z| z * c),
        Op::AddScalar(x, c) => v(x).map(|z| z + c),
        Op::Bce { y, labels } => {
            let y = v(y);
            if y.len() != labels.len() {
                return Err(shape_err(
                    i,
                    format!("{} predictions vs {} labels", y.len(), labels.len()),
                ));
            }
            let loss = y
                .data()
                .iter()
                .zip(labels)
                .map(|(&p, &l)| {
                    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -l * p.ln() - (1.0 - l) * (1.0 - p).ln()
                })
                .sum();
            Array::scalar(loss)
        }
    };
    Ok((out, Aux::None))
}

fn drop_time_axis(shape: &[usize]) -> Vec<usize> {
    let n = shape.len();
    let mut s = shape[..n - 2].to_vec();
    s.push(shape[n - 1]);
    s
}

/// out = a @ b for row-major `a` (m x k) and `b` (k x n).
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|o| *o = 0.0);
    matmul_into_acc(a, b, out, m, k, n);
}

/// out += a @ b
fn matmul_into_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for (p, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// out += aᵀ @ g for `a` (m x k) and `g` (m x n), giving k x n.
fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let grow = &g[r * n..(r + 1) * n];
        for (p, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// out += g @ bᵀ for `g` (m x n) and `b` (k x n), giving m x k.
fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let grow = &g[r * n..(r + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn backprop_node(
    op: &Op,
    g: &Array,
    out: &Array,
    values: &Values,
    aux: &Aux,
) -> Vec<(NodeId, Array)> {
    let v = |id: &NodeId| values.get(*id);
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (v(a), v(b));
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.len() / k;
            let mut ga = vec![0.0; av.len()];
            matmul_nt_acc(g.data(), bv.data(), &mut ga, m, k, n);
            let mut gb = vec![0.0; bv.len()];
            matmul_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
            vec![
                (*a, Array::from_parts(av.shape().to_vec(), ga)),
                (*b, Array::from_parts(bv.shape().to_vec(), gb)),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|z| -z))],
        Op::Mul(a, b) => vec![
            (*a, zip_with(g, v(b), |x, y| x * y)),
            (*b, zip_with(g, v(a), |x, y| x * y)),
        ],
        Op::Div(a, b) => {
            let (av, bv) = (v(a), v(b));
            let ga = zip_with(g, bv, |x, y| x / y);
            let gb = Array::from_parts(
                bv.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((gv, x), y)| -gv * x / (y * y))
                    .collect(),
            );
            vec![(*a, ga), (*b, gb)]
        }
        Op::Sigmoid(x) => vec![(*x, zip_with(g, out, |gv, sv| gv * sv * (1.0 - sv)))],
        Op::Tanh(x) => vec![(*x, zip_with(g, out, |gv, tv| gv * (1.0 - tv * tv)))],
        Op::Relu(x) => vec![(
            *x,
            zip_with(g, v(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
        )],
        Op::Softmax { x, .. } => {
            let xv = v(x);
            let d = xv.last_dim();
            let s = out.data();
            let mut gx = vec![0.0; xv.len()];
            for ((srow, grow), out) in s
                .chunks(d)
                .zip(g.data().chunks(d))
                .zip(gx.chunks_mut(d))
            {
                let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    out[j] = srow[j] * (grow[j] - dot);
                }
            }
            vec![(*x, Array::from_parts(xv.shape().to_vec(), gx))]
        }
        Op::MaskedMax { x, .. } => {
            let xv = v(x);
            let (outer, t_len, d) = time_dims(0, xv.shape()).expect("checked in forward");
            let Aux::ArgMax(arg) = aux else {
                unreachable!("masked max without argmax")
            };
            let mut gx = vec![0.0; xv.len()];
            for o in 0..outer {
                for j in 0..d {
                    let t = arg[o * d + j];
                    gx[(o * t_len + t) * d + j] += g.data()[o * d + j];
                }
            }
            vec![(*x, Array::from_parts(xv.shape().to_vec(), gx))]
        }
        Op::MaskedMean { x, mask } => {
            let (xv, m) = (v(x), v(mask));
            let (outer, t_len, d) = time_dims(0, xv.shape()).expect("checked in forward");
            let mut gx = vec![0.0; xv.len()];
            for o in 0..outer {
                let mrow = &m.data()[o * t_len..(o + 1) * t_len];
                let count = mrow.iter().filter(|&&w| w != 0.0).count() as f64;
                for t in 0..t_len {
                    if mrow[t] == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        gx[(o * t_len + t) * d + j] = g.data()[o * d + j] / count;
                    }
                }
            }
            vec![(*x, Array::from_parts(xv.shape().to_vec(), gx))]
        }
        Op::Concat(xs) => {
            let width = g.last_dim();
            let rows = g.len() / width;
            let mut out = Vec::with_capacity(xs.len());
            let mut offset = 0;
            for x in xs {
                let xv = v(x);
                let d = xv.last_dim();
                let mut gx = Vec::with_capacity(xv.len());
                for r in 0..rows {
                    gx.extend_from_slice(&g.data()[r * width + offset..r * width + offset + d]);
                }
                offset += d;
                out.push((*x, Array::from_parts(xv.shape().to_vec(), gx)));
            }
            out
        }
        Op::Dropout { x, .. } => match aux {
            Aux::Mask(mask) => vec![(
                *x,
                Array::from_parts(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(a, b)| a * b).collect(),
                ),
            )],
            _ => vec![(*x, g.clone())],
        },
        Op::Broadcast { x, axis, count } => {
            let xv = v(x);
            let outer: usize = xv.shape()[..*axis].iter().product();
            let inner: usize = xv.shape()[*axis..].iter().product();
            let mut gx = vec![0.0; xv.len()];
            for o in 0..outer {
                for c in 0..*count {
                    let src = &g.data()[(o * count + c) * inner..(o * count + c + 1) * inner];
                    for (a, b) in gx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            vec![(*x, Array::from_parts(xv.shape().to_vec(), gx))]
        }
        Op::Gather { table, rows, .. } => {
            let tv = v(table);
            let d = tv.shape()[1];
            let mut gt = vec![0.0; tv.len()];
            for (r, row) in rows.iter().enumerate() {
                if let Some(k) = *row {
                    for (a, b) in gt[k * d..(k + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[r * d..(r + 1) * d])
                    {
                        *a += b;
                    }
                }
            }
            vec![(*table, Array::from_parts(tv.shape().to_vec(), gt))]
        }
        Op::TimeStep { x, t } => {
            let xv = v(x);
            let (outer, t_len, d) = time_dims(0, xv.shape()).expect("checked in forward");
            let mut gx = vec![0.0; xv.len()];
            for o in 0..outer {
                let start = (o * t_len + t) * d;
                gx[start..start + d].copy_from_slice(&g.data()[o * d..(o + 1) * d]);
            }
            vec![(*x, Array::from_parts(xv.shape().to_vec(), gx))]
        }
        Op::StackTime(xs) => {
            let t_len = xs.len();
            let d = g.last_dim();
            let outer = g.len() / (t_len * d);
            xs.iter()
                .enumerate()
                .map(|(t, x)| {
                    let mut gx = Vec::with_capacity(outer * d);
                    for o in 0..outer {
                        gx.extend_from_slice(
                            &g.data()[(o * t_len + t) * d..(o * t_len + t + 1) * d],
                        );
                    }
                    (*x, Array::from_parts(v(x).shape().to_vec(), gx))
                })
                .collect()
        }
        Op::Conv1d { x, w, b, width } => {
            let (xv, wv, bv) = (v(x), v(w), v(b));
            let (outer, t_len, d) = time_dims(0, xv.shape()).expect("checked in forward");
            let f = wv.shape()[1];
            let positions = t_len - width + 1;
            let span = width * d;
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let mut gb = vec![0.0; bv.len()];
            for o in 0..outer {
                for p in 0..positions {
                    let start = (o * t_len + p) * d;
                    let grow = &g.data()[(o * positions + p) * f..(o * positions + p + 1) * f];
                    for (a, b) in gb.iter_mut().zip(grow) {
                        *a += b;
                    }
                    let window = &xv.data()[start..start + span];
                    matmul_tn_acc(window, grow, &mut gw, 1, span, f);
                    matmul_nt_acc(grow, wv.data(), &mut gx[start..start + span], 1, span, f);
                }
            }
            vec![
                (*x, Array::from_parts(xv.shape().to_vec(), gx)),
                (*w, Array::from_parts(wv.shape().to_vec(), gw)),
                (*b, Array::from_parts(bv.shape().to_vec(), gb)),
            ]
        }
        Op::Reshape { x, .. } => vec![(
            *x,
            Array::from_parts(v(x).shape().to_vec(), g.data().to_vec()),
        )],
        Op::Sum(x) => vec![(*x, Array::filled(v(x).shape(), g.item()))],
        Op::SumLast(x) => {
            let xv = v(x);
            let d = xv.last_dim();
            let gx = g
                .data()
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv, d))
                .collect();
            vec![(*x, Array::from_parts(xv.shape().to_vec(), gx))]
        }
        Op::Scale(x, c) => vec![(*x, g.map(|z| z * c))],
        Op::AddScalar(x, _) => vec![(*x, g.clone())],
        Op::Bce { y, labels } => {
            let yv = v(y);
            let gv = g.item();
            let gy = yv
                .data()
                .iter()
                .zip(labels)
                .map(|(&p, &l)| {
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                        0.0
                    } else {
                        gv * (-l / p + (1.0 - l) / (1.0 - p))
                    }
                })
                .collect();
            vec![(*y, Array::from_parts(yv.shape().to_vec(), gy))]
        }
    }
}
