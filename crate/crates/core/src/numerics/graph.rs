//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every primitive appends one node holding its value,
//! its operation tag and its parents. Because nodes can only reference
//! earlier nodes, the tape is acyclic by construction and `backward` is a
//! single reverse sweep.

use super::tensor::{axis_extents, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Affine { x: Var, scale: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    L2Norm(Var),
    Repeat { x: Var, axis: usize, n: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool { .. } => "maxpool",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Affine { .. } => "affine",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2Norm(_) => "l2norm",
            Op::Repeat { .. } => "repeat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv1d { x, w, b } => vec![*x, *w, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::MaxPool { x, .. }
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Affine { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::L2Norm(x)
            | Op::Repeat { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape(x) => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of differentiable operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// d(root)/d(var); zeros when `var` does not reach the root.
    pub fn of(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.values_mut());
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the primitive that produced `v`.
    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Trainable leaf tagged with its parameter index.
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(id))
    }

    /// Parameter index of a leaf created by [`Graph::param`].
    pub fn param_id(&self, v: Var) -> Option<usize> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    fn elementwise(
        &mut self,
        tag: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(tag, ta, tb)?;
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), values)?;
        Ok(self.push(out, op))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let values = t.values().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), values).expect("same shape");
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.values(), tb.values(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// 1-D convolution with stride 1 and zero "same" padding.
    ///
    /// `x: [batch, c_in, len]`, `w: [c_out, c_in, k]`, `b: [c_out]`.
    /// The kernel is applied flipped (true convolution):
    /// `y[t] = b + sum_k w[k] * x[t + (k_w - 1) / 2 - k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || tb.shape() != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
        let (c_out, k_w) = (sw[0], sw[2]);
        let cols = im2col(tx.values(), batch, c_in, len, k_w);
        let mut flat = vec![0.0; c_out * batch * len];
        matmul_into(tw.values(), &cols, &mut flat, c_out, c_in * k_w, batch * len);
        let bv = tb.values();
        let mut out = vec![0.0; batch * c_out * len];
        for bi in 0..batch {
            for o in 0..c_out {
                let src = &flat[o * batch * len + bi * len..o * batch * len + (bi + 1) * len];
                for (d, s) in out[(bi * c_out + o) * len..(bi * c_out + o + 1) * len].iter_mut().zip(src) {
                    *d = s + bv[o];
                }
            }
        }
        let out = Tensor::new(vec![batch, c_out, len], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, b }))
    }

    /// Width-2, stride-2 max pooling over the last axis. An odd trailing
    /// element forms a window of its own, so the output length is `ceil(len / 2)`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "maxpool",
                lhs: shape.to_vec(),
                rhs: vec![2],
            });
        }
        let len = *shape.last().unwrap();
        let rows = tx.len() / len.max(1);
        let out_len = len.div_ceil(2);
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        let xv = tx.values();
        for r in 0..rows {
            for j in 0..out_len {
                let i0 = r * len + 2 * j;
                let mut best = i0;
                if 2 * j + 1 < len && xv[i0 + 1] > xv[i0] {
                    best = i0 + 1;
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = out_len;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis] * inner;
                out.extend_from_slice(&t.values()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: if mean { "mean" } else { "sum" },
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = axis_extents(shape, axis);
        let mut out = vec![0.0; outer * inner];
        let xv = tx.values();
        for o in 0..outer {
            for a in 0..n {
                let src = &xv[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        if mean {
            let scale = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(out, op))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Euclidean norm over the last axis, removing it.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "l2norm",
                lhs: vec![],
                rhs: vec![1],
            });
        }
        let n = *shape.last().unwrap();
        let out: Vec<f64> = tx
            .values()
            .chunks(n.max(1))
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        Ok(self.push(out, Op::L2Norm(x)))
    }

    /// Inserts a new axis of extent `n` at `axis`, copying values along it.
    pub fn repeat(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis > shape.len() {
            return Err(Error::ShapeMismatch {
                op: "repeat",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xv = tx.values();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.insert(axis, n);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Repeat { x, axis, n }))
    }

    /// Slice `[start, start + len)` of `axis`, keeping the axis.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                lhs: shape.to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = axis_extents(shape, axis);
        let xv = tx.values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `x [batch, in] · w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let rows = self.shape(y)[0];
        let bias = self.repeat(b, 0, rows)?;
        self.add(y, bias)
    }

    /// Rows of `x [.., n]` divided by `‖row‖ + floor`. `floor` keeps the
    /// all-zero row finite.
    pub fn l2_normalize(&mut self, x: Var, floor: f64) -> Result<Var> {
        let last = self.shape(x).len() - 1;
        let n = self.shape(x)[last];
        let norm = self.l2norm(x)?;
        let norm = self.affine(norm, 1.0, floor);
        let norm = self.repeat(norm, last, n)?;
        self.div(x, norm)
    }

    /// Computes d(root)/d(node) for every node reachable backwards from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.values();
        let val = |v: Var| &self.nodes[v.0].value;
        let shape = |v: Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    accumulate(&mut grads[v.0], &shape(v), |d| {
                        d.iter_mut().zip(gv).for_each(|(d, g)| *d += g)
                    });
                }
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], &shape(*a), |d| {
                    d.iter_mut().zip(gv).for_each(|(d, g)| *d += g)
                });
                accumulate(&mut grads[b.0], &shape(*b), |d| {
                    d.iter_mut().zip(gv).for_each(|(d, g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).values(), val(*b).values());
                accumulate(&mut grads[a.0], &shape(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += gv[i] * bv[i];
                    }
                });
                accumulate(&mut grads[b.0], &shape(*b), |d| {
                    for i in 0..d.len() {
                        d[i] += gv[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).values(), val(*b).values());
                accumulate(&mut grads[a.0], &shape(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += gv[i] / bv[i];
                    }
                });
                accumulate(&mut grads[b.0], &shape(*b), |d| {
                    for i in 0..d.len() {
                        d[i] -= gv[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (av, bv) = (ta.values(), tb.values());
                // dA = G · Bᵀ, dB = Aᵀ · G
                let bt = transpose(bv, k, n);
                accumulate(&mut grads[a.0], &shape(*a), |d| matmul_into(gv, &bt, d, m, n, k));
                let at = transpose(av, m, k);
                accumulate(&mut grads[b.0], &shape(*b), |d| matmul_into(&at, gv, d, k, m, n));
            }
            Op::Conv1d { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (batch, c_in, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (c_out, k_w) = (tw.shape()[0], tw.shape()[2]);
                let pad = (k_w - 1) / 2;
                let (xv, wv) = (tx.values(), tw.values());
                accumulate(&mut grads[b.0], &shape(*b), |d| {
                    for bi in 0..batch {
                        for (o, d_o) in d.iter_mut().enumerate() {
                            let base = (bi * c_out + o) * len;
                            *d_o += gv[base..base + len].iter().sum::<f64>();
                        }
                    }
                });
                // Gradient laid out as [c_out, batch * len] to match the im2col product.
                let bl = batch * len;
                let mut gp = vec![0.0; c_out * bl];
                for bi in 0..batch {
                    for o in 0..c_out {
                        gp[o * bl + bi * len..o * bl + (bi + 1) * len]
                            .copy_from_slice(&gv[(bi * c_out + o) * len..(bi * c_out + o + 1) * len]);
                    }
                }
                let ck = c_in * k_w;
                let cols = im2col(xv, batch, c_in, len, k_w);
                let mut dw = vec![0.0; wv.len()];
                matmul_into(&gp, &transpose(&cols, ck, bl), &mut dw, c_out, bl, ck);
                let mut dcols = vec![0.0; ck * bl];
                matmul_into(&transpose(wv, c_out, ck), &gp, &mut dcols, ck, c_out, bl);
                let mut dx = vec![0.0; xv.len()];
                for c in 0..c_in {
                    for kk in 0..k_w {
                        let row = &dcols[(c * k_w + kk) * bl..(c * k_w + kk + 1) * bl];
                        let (t_lo, t_hi) = tap_range(len, pad, kk);
                        for bi in 0..batch {
                            let xoff = (bi * c_in + c) * len;
                            for t in t_lo..t_hi {
                                dx[xoff + t + pad - kk] += row[bi * len + t];
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    d.iter_mut().zip(&dx).for_each(|(d, v)| *d += v)
                });
                accumulate(&mut grads[w.0], &shape(*w), |d| {
                    d.iter_mut().zip(&dw).for_each(|(d, v)| *d += v)
                });
            }
            Op::MaxPool { x, argmax } => {
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    for (j, &src) in argmax.iter().enumerate() {
                        d[src] += gv[j];
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).values();
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += gv[i];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.values();
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    for i in 0..d.len() {
                        d[i] += gv[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.values();
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    for i in 0..d.len() {
                        d[i] += gv[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let yv = node.value.values();
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    for i in 0..d.len() {
                        d[i] += gv[i] * yv[i];
                    }
                });
            }
            Op::Ln(x) => {
                let xv = val(*x).values();
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    for i in 0..d.len() {
                        d[i] += gv[i] / xv[i];
                    }
                });
            }
            Op::Affine { x, scale } => {
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    d.iter_mut().zip(gv).for_each(|(d, g)| *d += scale * g)
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_extents(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis];
                    accumulate(&mut grads[p.0], &shape(p), |d| {
                        for o in 0..outer {
                            let src = &gv[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (dst, s) in d[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *dst += s;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let in_shape = shape(*x);
                let (outer, n, inner) = axis_extents(&in_shape, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                accumulate(&mut grads[x.0], &in_shape, |d| {
                    for o in 0..outer {
                        let src = &gv[o * inner..(o + 1) * inner];
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            for (dst, s) in d[base..base + inner].iter_mut().zip(src) {
                                *dst += scale * s;
                            }
                        }
                    }
                });
            }
            Op::L2Norm(x) => {
                let tx = val(*x);
                let n = *tx.shape().last().unwrap();
                let xv = tx.values();
                let yv = node.value.values();
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    for (r, (&y, &g)) in yv.iter().zip(gv).enumerate() {
                        if y == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            d[r * n + j] += g * xv[r * n + j] / y;
                        }
                    }
                });
            }
            Op::Repeat { x, axis, n } => {
                let in_shape = shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis..].iter().product();
                accumulate(&mut grads[x.0], &in_shape, |d| {
                    for o in 0..outer {
                        for r in 0..*n {
                            let src = &gv[(o * n + r) * inner..(o * n + r + 1) * inner];
                            for (dst, s) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *dst += s;
                            }
                        }
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = shape(*x);
                let (outer, n, inner) = axis_extents(&in_shape, *axis);
                let len = node.value.shape()[*axis];
                accumulate(&mut grads[x.0], &in_shape, |d| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let src = &gv[o * len * inner..(o + 1) * len * inner];
                        for (dst, s) in d[base..base + len * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                accumulate(&mut grads[x.0], &shape(*x), |d| {
                    d.iter_mut().zip(gv).for_each(|(d, g)| *d += g)
                });
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

/// Output positions `t` for which tap `k` reads an in-range source `t + pad - k`.
fn tap_range(len: usize, pad: usize, k: usize) -> (usize, usize) {
    (k.saturating_sub(pad), (len + k).saturating_sub(pad).min(len))
}

/// `[c_in * k_w, batch * len]` matrix of shifted inputs: row `c * k_w + k`,
/// column `b * len + t` holds `x[b, c, t + pad - k]` (zero outside the sequence).
fn im2col(x: &[f64], batch: usize, c_in: usize, len: usize, k_w: usize) -> Vec<f64> {
    let pad = (k_w - 1) / 2;
    let bl = batch * len;
    let mut cols = vec![0.0; c_in * k_w * bl];
    for c in 0..c_in {
        for k in 0..k_w {
            let row = &mut cols[(c * k_w + k) * bl..(c * k_w + k + 1) * bl];
            let (t_lo, t_hi) = tap_range(len, pad, k);
            for b in 0..batch {
                let src = &x[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                for t in t_lo..t_hi {
                    row[b * len + t] = src[t + pad - k];
                }
            }
        }
    }
    cols
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_ip * bv;
            }
        }
    }
}
