//! Tensor-level reverse-mode tape.
//!
//! Every primitive appends one record holding its operand ids and enough
//! information to form the local vector-Jacobian product. [`Var::backward`]
//! walks the records in reverse and accumulates adjoints additively, so fan-out
//! is handled without special cases.
//!
//! Elementwise binary ops broadcast only over a leading singleton axis: shapes
//! must be equal, or one operand must be `[1, rest..]` against `[n, rest..]`.

use std::cell::RefCell;

use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Divisors smaller than this in magnitude are rejected by [`Var::div`].
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Affine { input: usize, scale: f64 },
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Stack { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Select { input: usize, axis: usize, index: usize },
    Sigmoid(usize),
    Softplus(usize),
    Tanh(usize),
    Relu(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Sqrt(usize),
    Square(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations for one evaluation context.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    /// Untracked `[1]` constant, broadcastable against any rank-1 value.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::from_vec(vec![value]))
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn is_tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }
}

/// Gradients of a scalar root with respect to tape nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zero when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = &self.shapes[var.id];
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

struct Bcast {
    shape: Vec<usize>,
    len_a: usize,
    len_b: usize,
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<Bcast> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    let shape = if a == b {
        a.to_vec()
    } else if a.len() == b.len() && !a.is_empty() && a[0] == 1 && a[1..] == b[1..] {
        b.to_vec()
    } else if a.len() == b.len() && !b.is_empty() && b[0] == 1 && a[1..] == b[1..] {
        a.to_vec()
    } else {
        return Err(Error::shape(format!(
            "operands {:?} and {:?} do not conform",
            a, b
        )));
    };
    Ok(Bcast {
        shape,
        len_a: numel(a),
        len_b: numel(b),
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element var.
    pub fn item(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.with_value(|v| v.map(f));
        let tracked = self.is_tracked();
        self.tape.push(value, op, tracked)
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let bc = broadcast(a.shape(), b.shape())?;
            let n: usize = bc.shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let data = (0..n)
                .map(|i| f(ad[i % bc.len_a], bd[i % bc.len_b]))
                .collect();
            Tensor::new(bc.shape, data)?
        };
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.tape.push(value, op, tracked))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Elementwise quotient; fails if any divisor is within [`DIV_GUARD`] of zero.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.with_value(|v| v.data().iter().any(|d| d.abs() < DIV_GUARD)) {
            return Err(Error::NumericGuard(format!(
                "divisor magnitude below {DIV_GUARD:e}"
            )));
        }
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Maximum(self.id, other.id), f64::max)
    }

    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Minimum(self.id, other.id), f64::min)
    }

    /// `scale * self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(Op::Affine { input: self.id, scale }, move |x| {
            scale * x + shift
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape(format!(
                    "matmul of {:?} and {:?}",
                    sa, sb
                )));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), tracked))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.with_value(|v| {
            let s = v.shape();
            if s.len() != 2 {
                return Err(Error::shape(format!("transpose of {:?}", s)));
            }
            let (m, n) = (s[0], s[1]);
            let d = v.data();
            let data = (0..n * m).map(|idx| d[(idx % m) * n + idx / m]).collect();
            Tensor::new(vec![n, m], data)
        })?;
        let tracked = self.is_tracked();
        Ok(self.tape.push(value, Op::Transpose(self.id), tracked))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape.to_vec())?;
        let tracked = self.is_tracked();
        Ok(self.tape.push(value, Op::Reshape(self.id), tracked))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.with_value(Tensor::sum));
        let tracked = self.is_tracked();
        self.tape.push(value, Op::Sum(self.id), tracked)
    }

    pub fn mean(self) -> Var<'t> {
        let value = self.with_value(|v| Tensor::scalar(v.sum() / v.numel() as f64));
        let tracked = self.is_tracked();
        self.tape.push(value, Op::Mean(self.id), tracked)
    }

    /// Stacks equal-shape values along a new axis at position `axis`.
    pub fn stack(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let shape = nodes[first.id].value.shape().to_vec();
            if axis > shape.len() {
                return Err(Error::shape(format!("stack axis {axis} for {:?}", shape)));
            }
            if let Some(bad) = vars
                .iter()
                .find(|v| nodes[v.id].value.shape() != shape.as_slice())
            {
                return Err(Error::shape(format!(
                    "stack of {:?} with {:?}",
                    shape,
                    nodes[bad.id].value.shape()
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis..].iter().product();
            let n = vars.len();
            let mut data = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for v in vars {
                    data.extend_from_slice(&nodes[v.id].value.data()[o * inner..(o + 1) * inner]);
                }
            }
            let mut out_shape = shape.clone();
            out_shape.insert(axis, n);
            Tensor::new(out_shape, data)?
        };
        let tracked = vars.iter().any(Var::is_tracked);
        Ok(tape.push(
            value,
            Op::Stack {
                inputs: vars.iter().map(|v| v.id).collect(),
                axis,
            },
            tracked,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let value = self.with_value(|v| {
            let s = v.shape();
            if axis >= s.len() || start > end || end > s[axis] {
                return Err(Error::shape(format!(
                    "slice {start}..{end} on axis {axis} of {:?}",
                    s
                )));
            }
            let (outer, dim, inner) = axis_split(s, axis);
            let len = end - start;
            let d = v.data();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                data.extend_from_slice(&d[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)
        })?;
        let tracked = self.is_tracked();
        Ok(self.tape.push(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            tracked,
        ))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(self, axis: usize, index: usize) -> Result<Var<'t>> {
        let value = self.with_value(|v| {
            let s = v.shape();
            if axis >= s.len() || index >= s[axis] {
                return Err(Error::shape(format!(
                    "select {index} on axis {axis} of {:?}",
                    s
                )));
            }
            let (outer, dim, inner) = axis_split(s, axis);
            let d = v.data();
            let mut data = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let base = (o * dim + index) * inner;
                data.extend_from_slice(&d[base..base + inner]);
            }
            let mut shape = s.to_vec();
            shape.remove(axis);
            Tensor::new(shape, data)
        })?;
        let tracked = self.is_tracked();
        Ok(self.tape.push(
            value,
            Op::Select {
                input: self.id,
                axis,
                index,
            },
            tracked,
        ))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// Clamps into `[lo, hi]`. The local gradient is 1 strictly inside the
    /// interval and 0 at or beyond either bound.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { input: self.id, lo, hi }, move |x| {
            x.max(lo).min(hi)
        })
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.with_value(|v| v.data().iter().any(|&x| x < 0.0)) {
            return Err(Error::NumericGuard("sqrt of a negative value".into()));
        }
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                root.value.shape()
            )));
        }
        let count = self.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..count).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = nodes[..count]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Only leaves are meaningful to callers; drop interior adjoints.
        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].tracked {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let elementwise = |grads: &mut [Option<Vec<f64>>],
                       a: usize,
                       b: usize,
                       da: &dyn Fn(f64, f64) -> f64,
                       db: &dyn Fn(f64, f64) -> f64| {
        let av = nodes[a].value.data();
        let bv = nodes[b].value.data();
        let (la, lb) = (av.len(), bv.len());
        if let Some(ga) = accumulate(grads, nodes, a) {
            for (i, gi) in g.iter().enumerate() {
                ga[i % la] += gi * da(av[i % la], bv[i % lb]);
            }
        }
        if let Some(gb) = accumulate(grads, nodes, b) {
            for (i, gi) in g.iter().enumerate() {
                gb[i % lb] += gi * db(av[i % la], bv[i % lb]);
            }
        }
    };
    let unary = |grads: &mut [Option<Vec<f64>>], a: usize, d: &dyn Fn(f64, f64) -> f64| {
        let av = nodes[a].value.data();
        let yv = out.data();
        if let Some(ga) = accumulate(grads, nodes, a) {
            for i in 0..g.len() {
                ga[i] += g[i] * d(av[i], yv[i]);
            }
        }
    };

    match &nodes[id].op {
        Op::Leaf | Op::Const => {}
        Op::Add(a, b) => elementwise(grads, *a, *b, &|_, _| 1.0, &|_, _| 1.0),
        Op::Sub(a, b) => elementwise(grads, *a, *b, &|_, _| 1.0, &|_, _| -1.0),
        Op::Mul(a, b) => elementwise(grads, *a, *b, &|_, y| y, &|x, _| x),
        Op::Div(a, b) => elementwise(grads, *a, *b, &|_, y| 1.0 / y, &|x, y| -x / (y * y)),
        Op::Maximum(a, b) => elementwise(
            grads,
            *a,
            *b,
            &|x, y| if x >= y { 1.0 } else { 0.0 },
            &|x, y| if x >= y { 0.0 } else { 1.0 },
        ),
        Op::Minimum(a, b) => elementwise(
            grads,
            *a,
            *b,
            &|x, y| if x <= y { 1.0 } else { 0.0 },
            &|x, y| if x <= y { 0.0 } else { 1.0 },
        ),
        Op::Affine { input, scale } => {
            let s = *scale;
            unary(grads, *input, &move |_, _| s)
        }
        Op::Sigmoid(a) => unary(grads, *a, &|_, y| y * (1.0 - y)),
        Op::Softplus(a) => unary(grads, *a, &|x, _| sigmoid(x)),
        Op::Tanh(a) => unary(grads, *a, &|_, y| 1.0 - y * y),
        Op::Relu(a) => unary(grads, *a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Clamp { input, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary(grads, *input, &move |x, _| {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Op::Sqrt(a) => unary(grads, *a, &|_, y| 0.5 / y),
        Op::Square(a) => unary(grads, *a, &|x, _| 2.0 * x),
        Op::Reshape(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (acc, gi) in ga.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel() as f64;
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::Transpose(a) => {
            let s = nodes[*a].value.shape();
            let (m, n) = (s[0], s[1]);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                // out[j, i] = in[i, j]
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            // dA = G · Bᵀ
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            // dB = Aᵀ · G
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (d, gv) in dst.iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
            }
        }
        Op::Stack { inputs, axis } => {
            let in_shape = nodes[inputs[0]].value.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis..].iter().product();
            let count = inputs.len();
            for (k, &input) in inputs.iter().enumerate() {
                if let Some(gi) = accumulate(grads, nodes, input) {
                    for o in 0..outer {
                        let src = &g[(o * count + k) * inner..(o * count + k + 1) * inner];
                        for (d, s) in gi[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Slice { input, axis, start } => {
            let (outer, dim, inner) = axis_split(nodes[*input].value.shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(gi) = accumulate(grads, nodes, *input) {
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in gi[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::Select { input, axis, index } => {
            let (outer, dim, inner) = axis_split(nodes[*input].value.shape(), *axis);
            if let Some(gi) = accumulate(grads, nodes, *input) {
                for o in 0..outer {
                    let base = (o * dim + index) * inner;
                    let src = &g[o * inner..(o + 1) * inner];
                    for (d, s) in gi[base..base + inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}
