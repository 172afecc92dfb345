use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastTo(Var),
    Scale(Var, f64),
    Maximum(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log { x: Var, floor: f64 },
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, index: Vec<Option<usize>> },
    Embedding { table: Var, ids: Vec<usize> },
    ScaleMask { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so inputs always precede the nodes
/// that consume them and a reverse sweep is a valid topological traversal.
/// All methods take `&self`; the tape lives behind a `RefCell` so calls can be
/// nested freely.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    params: RefCell<HashMap<String, Var>>,
    param_order: RefCell<Vec<String>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter. Repeated calls with the same name return the
    /// same leaf so gradients from every use accumulate in one place.
    pub fn param(&self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.borrow().get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.borrow_mut().insert(name.to_string(), v);
        self.param_order.borrow_mut().push(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v), g.clone()))
    }

    /// Gradients of every bound parameter that the loss reached, in binding order.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let params = self.params.borrow();
        self.param_order
            .borrow()
            .iter()
            .filter_map(|name| {
                let v = params[name];
                self.grad(v).map(|g| (name.clone(), g))
            })
            .collect()
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::rm(va.data(), k),
            MatRef::rm(vb.data(), n),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: va.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let out = transpose_data(va.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), self.rg(a)))
    }

    // ----- elementwise with broadcasting ----------------------------------

    fn binary(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            Error::Shape {
                op: op_name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            }
        })?;
        let out: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_map(va.shape(), &out_shape);
            let mb = kernels::broadcast_map(vb.shape(), &out_shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out_shape, out), make(a, b), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        match kernels::broadcast_shape(va.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::Shape {
                    op: "broadcast_to",
                    lhs: va.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let map = kernels::broadcast_map(va.shape(), shape);
        let out = map.iter().map(|&i| va.data()[i]).collect();
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::BroadcastTo(a),
            self.rg(a),
        ))
    }

    /// Elementwise maximum of two same-shape tensors; ties route gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "maximum",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| x.max(y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(va.shape().to_vec(), out),
            Op::Maximum(a, b),
            rg,
        ))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let out = va.map(f);
        self.push(out, op, self.rg(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log { x: a, floor: 0.0 }))
    }

    /// `log(max(x, floor))`; entries below the floor receive no gradient.
    pub fn clamped_log(&self, a: Var, floor: f64) -> Var {
        self.unary(a, move |x| x.max(floor).ln(), Op::Log { x: a, floor })
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), self.rg(a))
    }

    // ----- normalisation --------------------------------------------------

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.ndim() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                va.shape()
            )));
        }
        if va.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, len, inner) = kernels::split_axis(va.shape(), axis);
        let out = kernels::softmax(va.data(), outer, len, inner);
        Ok(self.push(
            Tensor::from_parts(va.shape().to_vec(), out),
            Op::Softmax { x: a, axis },
            self.rg(a),
        ))
    }

    /// Normalises each slice along the last axis to zero mean and unit
    /// variance. No affine transform is applied.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let d = *va.shape().last().unwrap();
        let rows = va.len() / d;
        let mut out = vec![0.0; va.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &va.data()[r * d..(r + 1) * d];
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mu) * s;
            }
            rstd.push(s);
        }
        self.push(
            Tensor::from_parts(va.shape().to_vec(), out),
            Op::LayerNorm { x: a, rstd },
            self.rg(a),
        )
    }

    // ----- structure ------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), self.rg(a)))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if axis >= first.ndim() {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        for v in &values[1..] {
            let ok = v.ndim() == first.ndim()
                && v.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.ndim() || len == 0 || start + len > va.shape()[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{} on axis {axis} of shape {:?}",
                start + len,
                va.shape()
            )));
        }
        let (outer, full, inner) = kernels::split_axis(va.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x: a, axis, start },
            self.rg(a),
        ))
    }

    /// Builds a tensor of `shape` whose entry `i` is `a.flat[index[i]]`, or
    /// zero where the index is `None`.
    pub fn gather(&self, a: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= va.len()) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {} elements",
                va.len()
            )));
        }
        let out = index.iter().map(|i| i.map_or(0.0, |i| va.data()[i])).collect();
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Gather { x: a, index },
            self.rg(a),
        ))
    }

    /// Rows of a `[rows, width]` table selected by `ids`, as `[ids.len(), width]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: vt.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, width) = (vt.shape()[0], vt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "embedding id {bad} out of range for table of {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(vt.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), width], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            self.rg(table),
        ))
    }

    /// Inverted dropout. The identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, rate: f64, train: bool, rng: &mut R) -> Var {
        if !train || rate <= 0.0 {
            return a;
        }
        let va = self.value(a);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..va.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.push(
            Tensor::from_parts(va.shape().to_vec(), out),
            Op::ScaleMask { x: a, mask },
            self.rg(a),
        )
    }

    /// Replaces entries where `mask` is true by `value`; those entries get no gradient.
    pub fn masked_fill(&self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: va.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = va
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let keep = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
        Ok(self.push(
            Tensor::from_parts(va.shape().to_vec(), out),
            Op::ScaleMask { x: a, mask: keep },
            self.rg(a),
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires a gradient.
    /// Gradients from multiple consumers of a node are summed.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let seed = &nodes[loss.0].value;
        if seed.len() != 1 {
            return Err(Error::contract(format!(
                "backward seed must be scalar, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: &[f64]) {
    accumulate(grads, nodes, v, |s| {
        s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    });
}

/// Sums a broadcast gradient back to the source shape.
fn reduce_into(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    out_shape: &[usize],
    g: impl Iterator<Item = f64>,
) {
    let src_shape = nodes[v.0].value.shape().to_vec();
    if src_shape == out_shape {
        let g: Vec<f64> = g.collect();
        add_into(grads, nodes, v, &g);
        return;
    }
    let map = kernels::broadcast_map(&src_shape, out_shape);
    accumulate(grads, nodes, v, |s| {
        for (i, gi) in map.iter().zip(g) {
            s[*i] += gi;
        }
    });
}

fn operand_at(nodes: &[Node], v: Var, out_shape: &[usize]) -> Vec<f64> {
    let t = &nodes[v.0].value;
    if t.shape() == out_shape {
        t.data().to_vec()
    } else {
        let map = kernels::broadcast_map(t.shape(), out_shape);
        map.iter().map(|&i| t.data()[i]).collect()
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            // grad_a = g · bᵀ ; grad_b = aᵀ · g
            accumulate(grads, nodes, *a, |s| {
                kernels::gemm(m, n, k, MatRef::rm(g, n), MatRef::rm_t(vb.data(), n), 1.0, s)
            });
            accumulate(grads, nodes, *b, |s| {
                kernels::gemm(k, m, n, MatRef::rm_t(va.data(), k), MatRef::rm(g, n), 1.0, s)
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            add_into(grads, nodes, *a, &transpose_data(g, r, c));
        }
        Op::Add(a, b) => {
            reduce_into(grads, nodes, *a, out.shape(), g.iter().copied());
            reduce_into(grads, nodes, *b, out.shape(), g.iter().copied());
        }
        Op::Sub(a, b) => {
            reduce_into(grads, nodes, *a, out.shape(), g.iter().copied());
            reduce_into(grads, nodes, *b, out.shape(), g.iter().map(|x| -x));
        }
        Op::Mul(a, b) => {
            if nodes[a.0].requires_grad {
                let vb = operand_at(nodes, *b, out.shape());
                reduce_into(grads, nodes, *a, out.shape(), g.iter().zip(vb).map(|(x, y)| x * y));
            }
            if nodes[b.0].requires_grad {
                let va = operand_at(nodes, *a, out.shape());
                reduce_into(grads, nodes, *b, out.shape(), g.iter().zip(va).map(|(x, y)| x * y));
            }
        }
        Op::BroadcastTo(a) => reduce_into(grads, nodes, *a, out.shape(), g.iter().copied()),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)
            });
        }
        Op::Maximum(a, b) => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    if va[i] >= vb[i] {
                        s[i] += g[i];
                    }
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for i in 0..s.len() {
                    if va[i] < vb[i] {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Relu(a) => {
            let x = nodes[a.0].value.data();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    if x[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Exp(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            });
        }
        Op::Log { x, floor } => {
            let xv = nodes[x.0].value.data();
            let floor = *floor;
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    if xv[i] > floor {
                        s[i] += g[i] / xv[i];
                    }
                }
            });
        }
        Op::Sum(a) => {
            let g0 = g[0];
            accumulate(grads, nodes, *a, |s| s.iter_mut().for_each(|x| *x += g0));
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.len() as f64;
            let g0 = g[0] / n;
            accumulate(grads, nodes, *a, |s| s.iter_mut().for_each(|x| *x += g0));
        }
        Op::Softmax { x, axis } => {
            let y = out.data();
            let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
            accumulate(grads, nodes, *x, |s| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, rstd } => {
            let y = out.data();
            let d = *out.shape().last().unwrap();
            accumulate(grads, nodes, *x, |s| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let gy = &g[r * d..(r + 1) * d];
                    let yy = &y[r * d..(r + 1) * d];
                    let mean_g = gy.iter().sum::<f64>() / d as f64;
                    let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        s[r * d + j] += rs * (gy[j] - mean_g - yy[j] * mean_gy);
                    }
                }
            });
        }
        Op::Reshape(a) => add_into(grads, nodes, *a, g),
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                accumulate(grads, nodes, *p, |s| {
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        let dst = o * len * inner;
                        for k in 0..len * inner {
                            s[dst + k] += g[src + k];
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let full = nodes[x.0].value.shape()[*axis];
            let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
            accumulate(grads, nodes, *x, |s| {
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        s[dst + k] += g[src + k];
                    }
                }
            });
        }
        Op::Gather { x, index } => {
            accumulate(grads, nodes, *x, |s| {
                for (gi, idx) in g.iter().zip(index) {
                    if let Some(i) = idx {
                        s[*i] += gi;
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let width = out.shape()[1];
            accumulate(grads, nodes, *table, |s| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..width {
                        s[id * width + j] += g[r * width + j];
                    }
                }
            });
        }
        Op::ScaleMask { x, mask } => {
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            });
        }
    }
}
