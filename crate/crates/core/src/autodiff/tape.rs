use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The differentiable operation catalogue.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    /// `[m,k] x [k,n]`
    MatMul,
    /// Inputs: image `[c,h,w]`, kernel `[o,c,k,k]`, bias `[o]`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Non-overlapping `window x window` pooling over `[c,h,w]`.
    MaxPool2d {
        window: usize,
    },
    Sigmoid,
    Tanh,
    Relu,
    Reshape(Vec<usize>),
    /// Concatenation along the leading axis.
    Concat,
    /// Rows `start..end` of the leading axis.
    Slice {
        start: usize,
        end: usize,
    },
    Sum,
    Mean,
    L2Norm,
    /// Inverted dropout; identity when `training` is false.
    Dropout {
        rate: f64,
        training: bool,
        seed: u64,
    },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "elementwise_mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool2d { .. } => "maxpool2d",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::L2Norm => "l2norm",
            OpKind::Dropout { .. } => "dropout",
        }
    }
}

// What backward needs beyond the input and output values.
#[derive(Debug)]
enum Saved {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d(ConvGeom),
    MaxPool(Vec<usize>),
    Sigmoid,
    Tanh,
    Relu,
    Reshape,
    Concat,
    Slice { offset: usize },
    Sum,
    Mean,
    L2Norm,
    Dropout(Option<Vec<f64>>),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    saved: Saved,
    inputs: Vec<Var>,
    param: Option<usize>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every parameter registered on the
/// tape, keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<usize, Tensor>);

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.0.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Gradients for parameters `0..n` in order. Missing ids are an error.
    pub fn into_ordered(mut self, n: usize) -> Result<Vec<Tensor>> {
        (0..n)
            .map(|i| {
                self.0
                    .remove(&i)
                    .ok_or_else(|| Error::Precondition(format!("parameter {i} was never registered on the tape")))
            })
            .collect()
    }
}

/// A parameter gradient handed to the optimizer. A matrix used in exactly
/// one matrix-vector product has gradient `u v^T` and stays in that rank-1
/// form so the update can stream it without materializing the matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Dense(Tensor),
    /// Row `i` is `u[i] * v`, or exactly zero when `u[i] == 0`.
    Outer {
        u: Vec<f64>,
        v: Vec<f64>,
    },
}

impl ParamGrad {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamGrad::Dense(t) => t.shape().to_vec(),
            ParamGrad::Outer { u, v } => vec![u.len(), v.len()],
        }
    }

    pub fn into_dense(self) -> Tensor {
        match self {
            ParamGrad::Dense(t) => t,
            ParamGrad::Outer { u, v } => {
                Tensor::new(vec![u.len(), v.len()], kernels::outer(&u, &v)).expect("outer product matches its shape")
            }
        }
    }

    /// Whether every entry of the (materialized) gradient is finite.
    pub fn all_finite(&self) -> bool {
        match self {
            ParamGrad::Dense(t) => t.all_finite(),
            ParamGrad::Outer { u, v } => {
                let mut umax = 0.0f64;
                for &x in u {
                    if x != 0.0 {
                        if !x.is_finite() {
                            return false;
                        }
                        umax = umax.max(x.abs());
                    }
                }
                if umax == 0.0 {
                    return true;
                }
                if !v.iter().all(|y| y.is_finite()) {
                    return false;
                }
                let vmax = v.iter().fold(0.0f64, |m, y| m.max(y.abs()));
                // every entry is bounded by umax * vmax; check one by one
                // only when that bound overflows
                (umax * vmax).is_finite()
                    || u.iter()
                        .filter(|&&x| x != 0.0)
                        .all(|&x| v.iter().all(|&y| (x * y).is_finite()))
            }
        }
    }
}

/// Records a computation for reverse-mode differentiation. Parameters are
/// borrowed, not copied, so the tape cannot outlive them.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape_err(kind: &OpKind, shapes: &[&[usize]]) -> Error {
    Error::shape(kind.name(), format!("incompatible input shapes {shapes:?}"))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Saved::Leaf, vec![], None, false)
    }

    /// A differentiable leaf identified by `id` in the returned gradients.
    pub fn param(&mut self, id: usize, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Saved::Leaf, vec![], Some(id), true)
    }

    pub fn param_owned(&mut self, id: usize, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Saved::Leaf, vec![], Some(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(
        &mut self,
        value: Cow<'a, Tensor>,
        saved: Saved,
        inputs: Vec<Var>,
        param: Option<usize>,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            saved,
            inputs,
            param,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies `kind` to `inputs`, recording the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => Some(2),
            OpKind::Conv2d { .. } => Some(3),
            OpKind::Concat => None,
            _ => Some(1),
        };
        if let Some(a) = arity {
            if inputs.len() != a {
                return Err(Error::shape(
                    kind.name(),
                    format!("expected {a} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(kind.name(), "expected at least one input"));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
        let shapes: Vec<&[usize]> = vals.iter().map(|t| t.shape()).collect();

        let (out, saved) = match &kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                if shapes[0] != shapes[1] {
                    return Err(shape_err(&kind, &shapes));
                }
                let (a, b) = (vals[0].data(), vals[1].data());
                let (data, saved): (Vec<f64>, _) = match kind {
                    OpKind::Add => (a.iter().zip(b).map(|(x, y)| x + y).collect(), Saved::Add),
                    OpKind::Sub => (a.iter().zip(b).map(|(x, y)| x - y).collect(), Saved::Sub),
                    _ => (a.iter().zip(b).map(|(x, y)| x * y).collect(), Saved::Mul),
                };
                (Tensor::new(shapes[0].to_vec(), data)?, saved)
            }
            OpKind::MatMul => {
                let (sa, sb) = (shapes[0], shapes[1]);
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(shape_err(&kind, &shapes));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let data = kernels::matmul(vals[0].data(), vals[1].data(), m, k, n);
                (Tensor::new(vec![m, n], data)?, Saved::MatMul)
            }
            OpKind::Conv2d { stride, padding } => {
                let (si, sw, sb) = (shapes[0], shapes[1], shapes[2]);
                let ok = si.len() == 3
                    && sw.len() == 4
                    && sw[1] == si[0]
                    && sw[2] == sw[3]
                    && sb == [sw[0]]
                    && *stride > 0
                    && si[1] + 2 * padding >= sw[2]
                    && si[2] + 2 * padding >= sw[3];
                if !ok {
                    return Err(shape_err(&kind, &shapes));
                }
                let k = sw[2];
                let geom = ConvGeom {
                    c: si[0],
                    h: si[1],
                    w: si[2],
                    o: sw[0],
                    k,
                    stride: *stride,
                    pad: *padding,
                    oh: (si[1] + 2 * padding - k) / stride + 1,
                    ow: (si[2] + 2 * padding - k) / stride + 1,
                };
                let data = kernels::conv2d(vals[0].data(), vals[1].data(), vals[2].data(), &geom);
                (Tensor::new(vec![geom.o, geom.oh, geom.ow], data)?, Saved::Conv2d(geom))
            }
            OpKind::MaxPool2d { window } => {
                let s = shapes[0];
                if s.len() != 3 || *window == 0 || s[1] < *window || s[2] < *window {
                    return Err(shape_err(&kind, &shapes));
                }
                let (data, arg) = kernels::maxpool2d(vals[0].data(), s[0], s[1], s[2], *window);
                (
                    Tensor::new(vec![s[0], s[1] / window, s[2] / window], data)?,
                    Saved::MaxPool(arg),
                )
            }
            OpKind::Sigmoid | OpKind::Tanh | OpKind::Relu => {
                let x = vals[0].data();
                let (data, saved): (Vec<f64>, _) = match kind {
                    OpKind::Sigmoid => (x.iter().map(|&v| sigmoid(v)).collect(), Saved::Sigmoid),
                    OpKind::Tanh => (x.iter().map(|v| v.tanh()).collect(), Saved::Tanh),
                    _ => (x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(), Saved::Relu),
                };
                (Tensor::new(shapes[0].to_vec(), data)?, saved)
            }
            OpKind::Reshape(new_shape) => {
                let n: usize = new_shape.iter().product();
                if n != vals[0].len() {
                    return Err(Error::shape(
                        "reshape",
                        format!("cannot reshape {:?} to {new_shape:?}", shapes[0]),
                    ));
                }
                (Tensor::new(new_shape.clone(), vals[0].data().to_vec())?, Saved::Reshape)
            }
            OpKind::Concat => {
                let first = shapes[0];
                if first.is_empty() || shapes.iter().any(|s| s.len() != first.len() || s[1..] != first[1..]) {
                    return Err(shape_err(&kind, &shapes));
                }
                let rows: usize = shapes.iter().map(|s| s[0]).sum();
                let mut shape = first.to_vec();
                shape[0] = rows;
                let data: Vec<f64> = vals.iter().flat_map(|t| t.data().iter().copied()).collect();
                (Tensor::new(shape, data)?, Saved::Concat)
            }
            OpKind::Slice { start, end } => {
                let s = shapes[0];
                if s.is_empty() || start >= end || *end > s[0] {
                    return Err(Error::shape(
                        "slice",
                        format!("rows {start}..{end} out of range for {s:?}"),
                    ));
                }
                let inner: usize = s[1..].iter().product();
                let mut shape = s.to_vec();
                shape[0] = end - start;
                let data = vals[0].data()[start * inner..end * inner].to_vec();
                (Tensor::new(shape, data)?, Saved::Slice { offset: start * inner })
            }
            OpKind::Sum => (Tensor::scalar(vals[0].data().iter().sum()), Saved::Sum),
            OpKind::Mean => {
                if vals[0].is_empty() {
                    return Err(Error::shape("mean", "empty input"));
                }
                let n = vals[0].len() as f64;
                (Tensor::scalar(vals[0].data().iter().sum::<f64>() / n), Saved::Mean)
            }
            OpKind::L2Norm => {
                let n2: f64 = vals[0].data().iter().map(|v| v * v).sum();
                (Tensor::scalar(n2.sqrt()), Saved::L2Norm)
            }
            OpKind::Dropout { rate, training, seed } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Range {
                        what: "dropout rate",
                        value: *rate,
                        range: "[0, 1)",
                    });
                }
                if !training {
                    (vals[0].clone(), Saved::Dropout(None))
                } else {
                    let mask = dropout_mask(vals[0].len(), *rate, *seed);
                    let data = vals[0].data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                    (Tensor::new(shapes[0].to_vec(), data)?, Saved::Dropout(Some(mask)))
                }
            }
        };

        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Cow::Owned(out), saved, inputs.to_vec(), None, needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(OpKind::Conv2d { stride, padding }, &[input, weight, bias])
    }
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        self.apply(OpKind::MaxPool2d { window }, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, xs)
    }
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { start, end }, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::L2Norm, &[x])
    }
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        self.apply(OpKind::Dropout { rate, training, seed }, &[x])
    }

    /// Differentiates the scalar `output` with respect to every parameter on
    /// the tape. Parameters the output does not depend on get zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let grads = self.sweep(output, None)?;
        Ok(Gradients(
            grads.into_iter().map(|(id, g)| (id, g.into_dense())).collect(),
        ))
    }

    /// Like [`backward`](Self::backward) but for an optimizer step: a
    /// parameter whose only use is as the matrix of one matrix-vector
    /// product gets [`ParamGrad::Outer`]. Returns parameters `0..n` in order.
    pub fn backward_factored(&self, output: Var, n: usize) -> Result<Vec<ParamGrad>> {
        let last = output.0;
        let mut uses = vec![0usize; self.nodes.len()];
        for node in &self.nodes[..=last] {
            for v in &node.inputs {
                uses[v.0] += 1;
            }
        }
        let mut eligible = vec![false; self.nodes.len()];
        for node in &self.nodes[..=last] {
            if matches!(node.saved, Saved::MatMul) && node.value.shape()[1] == 1 {
                let a = node.inputs[0].0;
                eligible[a] = uses[a] == 1 && self.nodes[a].param.is_some();
            }
        }
        let mut factoring = Factoring {
            eligible,
            found: BTreeMap::new(),
        };
        let mut grads = self.sweep(output, Some(&mut factoring))?;
        (0..n)
            .map(|i| {
                grads
                    .remove(&i)
                    .ok_or_else(|| Error::Precondition(format!("parameter {i} was never registered on the tape")))
            })
            .collect()
    }

    fn sweep(&self, output: Var, mut factoring: Option<&mut Factoring>) -> Result<BTreeMap<usize, ParamGrad>> {
        let out_shape = self.nodes[output.0].value.shape();
        if self.nodes[output.0].value.len() != 1 || out_shape.len() > 1 {
            return Err(Error::Rank(out_shape.to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![1.0]);
        let mut result = BTreeMap::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if let Some(id) = node.param {
                // an eligible parameter has a single use, so nothing dense
                // can be waiting in its slot
                if let Some((u, v)) = factoring.as_mut().and_then(|f| f.found.remove(&idx)) {
                    add_param_grad(&mut result, id, ParamGrad::Outer { u, v });
                    continue;
                }
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(id) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches its node");
                add_param_grad(&mut result, id, ParamGrad::Dense(t));
                continue;
            }
            self.backprop_node(node, &g, &mut grads, factoring.as_deref_mut())?;
        }

        for node in &self.nodes {
            if let Some(id) = node.param {
                result
                    .entry(id)
                    .or_insert_with(|| ParamGrad::Dense(Tensor::zeros(node.value.shape())));
            }
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        node: &Node<'a>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        factoring: Option<&mut Factoring>,
    ) -> Result<()> {
        let inp = &node.inputs;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();

        match &node.saved {
            Saved::Leaf => {}
            Saved::Add | Saved::Sub => {
                if want(inp[0]) {
                    add_into(slot(grads, inp[0], g.len()), g);
                }
                if want(inp[1]) {
                    let dst = slot(grads, inp[1], g.len());
                    if matches!(node.saved, Saved::Add) {
                        add_into(dst, g);
                    } else {
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d -= gv;
                        }
                    }
                }
            }
            Saved::Mul => {
                for (this, other) in [(inp[0], inp[1]), (inp[1], inp[0])] {
                    if want(this) {
                        let o = val(other);
                        let dst = slot(grads, this, g.len());
                        for ((d, gv), ov) in dst.iter_mut().zip(g).zip(o) {
                            *d += gv * ov;
                        }
                    }
                }
            }
            Saved::MatMul => {
                let sa = self.nodes[inp[0].0].value.shape();
                let sb = self.nodes[inp[1].0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(inp[0]) {
                    let b = val(inp[1]);
                    match (&mut grads[inp[0].0], factoring) {
                        (None, Some(f)) if n == 1 && f.eligible[inp[0].0] => {
                            f.found.insert(inp[0].0, (g.to_vec(), b.to_vec()));
                        }
                        // first contribution of a matrix-vector product: write
                        // the outer product directly instead of zero-fill + add
                        (empty @ None, _) if n == 1 => *empty = Some(kernels::outer(g, b)),
                        _ => kernels::matmul_grad_a(g, b, slot(grads, inp[0], m * k), m, k, n),
                    }
                }
                if want(inp[1]) {
                    let a = val(inp[0]);
                    kernels::matmul_grad_b(a, g, slot(grads, inp[1], k * n), m, k, n);
                }
            }
            Saved::Conv2d(geom) => {
                let (x, w) = (val(inp[0]), val(inp[1]));
                // three distinct nodes, so take the slots out to borrow them together
                let mut gi = want(inp[0]).then(|| take_slot(grads, inp[0], x.len()));
                let mut gw = want(inp[1]).then(|| take_slot(grads, inp[1], w.len()));
                let mut gb = want(inp[2]).then(|| take_slot(grads, inp[2], geom.o));
                kernels::conv2d_backward(x, w, g, geom, gi.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                for (v, buf) in [(inp[0], gi), (inp[1], gw), (inp[2], gb)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Saved::MaxPool(arg) => {
                if want(inp[0]) {
                    let n = self.nodes[inp[0].0].value.len();
                    let dst = slot(grads, inp[0], n);
                    for (gv, &a) in g.iter().zip(arg) {
                        dst[a] += gv;
                    }
                }
            }
            Saved::Sigmoid => {
                if want(inp[0]) {
                    let dst = slot(grads, inp[0], g.len());
                    for ((d, gv), y) in dst.iter_mut().zip(g).zip(out) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Saved::Tanh => {
                if want(inp[0]) {
                    let dst = slot(grads, inp[0], g.len());
                    for ((d, gv), y) in dst.iter_mut().zip(g).zip(out) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Saved::Relu => {
                if want(inp[0]) {
                    let x = val(inp[0]);
                    let dst = slot(grads, inp[0], g.len());
                    for ((d, gv), xv) in dst.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Saved::Reshape => {
                if want(inp[0]) {
                    add_into(slot(grads, inp[0], g.len()), g);
                }
            }
            Saved::Concat => {
                let mut offset = 0;
                for &v in inp {
                    let n = self.nodes[v.0].value.len();
                    if want(v) {
                        add_into(slot(grads, v, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Saved::Slice { offset } => {
                if want(inp[0]) {
                    let n = self.nodes[inp[0].0].value.len();
                    let dst = slot(grads, inp[0], n);
                    add_into(&mut dst[*offset..offset + g.len()], g);
                }
            }
            Saved::Sum | Saved::Mean => {
                if want(inp[0]) {
                    let n = self.nodes[inp[0].0].value.len();
                    let scale = if matches!(node.saved, Saved::Mean) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    for d in slot(grads, inp[0], n) {
                        *d += scale;
                    }
                }
            }
            Saved::L2Norm => {
                if want(inp[0]) {
                    let norm = out[0];
                    let x = val(inp[0]);
                    let dst = slot(grads, inp[0], x.len());
                    // subgradient 0 at the origin
                    if norm > 0.0 {
                        for (d, xv) in dst.iter_mut().zip(x) {
                            *d += g[0] * xv / norm;
                        }
                    }
                }
            }
            Saved::Dropout(mask) => {
                if want(inp[0]) {
                    let dst = slot(grads, inp[0], g.len());
                    match mask {
                        Some(m) => {
                            for ((d, gv), mv) in dst.iter_mut().zip(g).zip(m) {
                                *d += gv * mv;
                            }
                        }
                        None => add_into(dst, g),
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Keep-mask with survivors scaled by `1 / (1 - rate)`; a function of
/// `(len, rate, seed)` only.
fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn take_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> Vec<f64> {
    grads[v.0].take().unwrap_or_else(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Parameters eligible for a rank-1 gradient (by node) and the factors
/// collected for them during the sweep.
struct Factoring {
    eligible: Vec<bool>,
    found: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

/// Adds a gradient for parameter `id`, which may sit on several nodes.
fn add_param_grad(result: &mut BTreeMap<usize, ParamGrad>, id: usize, g: ParamGrad) {
    let sum = match result.remove(&id) {
        None => g,
        Some(prev) => {
            let mut t = prev.into_dense();
            add_into(t.data_mut(), g.into_dense().data());
            ParamGrad::Dense(t)
        }
    };
    result.insert(id, sum);
}
