//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation executed through its [`Var`] handles in
//! execution order, so node inputs always precede the node itself. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns per-node gradients; [`Gradients::accumulate`] adds the gradients of
//! bound parameters into their [`ParamStore`] buffers.
//!
//! Broadcasting is limited to scalar-with-tensor in `add`/`sub`/`mul`. Row
//! vectors are combined with matrices only through the explicit `add_row` /
//! `mul_row` ops.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{contract, shape_err, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::{
    dims2, gelu, gelu_grad, log_sigmoid, matmul_at_into, matmul_bt_into, matmul_into, numel,
    row_mean, row_stats, sigmoid, softmax_rows_inplace, Tensor,
};

/// Pointwise single-input operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Log,
    Square,
    LogSigmoid,
}

/// Precomputed rotation angles: one `(cos, sin)` per row and value pair.
#[derive(Clone, Debug)]
pub struct RotaryTable<T> {
    pub(crate) rows: usize,
    pub(crate) pairs: usize,
    pub(crate) cos: Rc<Vec<T>>,
    pub(crate) sin: Rc<Vec<T>>,
}

impl<T> RotaryTable<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        2 * self.pairs
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(Unary, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Gather(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Rotary(usize, RotaryTable<T>),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The gradient tape. Confined to one logical context (not `Sync`).
#[derive(Debug)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<(u64, usize), usize>>,
    grad_enabled: bool,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let shape = self.graph.nodes.borrow()[self.id].shape.clone();
        write!(f, "Var#{}{:?}", self.id, shape)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A graph whose parameter leaves never require gradients (evaluation).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, t: &Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf(t, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(&Tensor::scalar(v), false)
    }

    /// Unbound differentiable leaf.
    pub fn variable(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf(t, true)
    }

    /// Binds parameter `idx` of `store`; repeated binds reuse the same node.
    pub fn param(&self, store: &ParamStore<T>, idx: usize) -> Var<'_, T> {
        let key = (store.id(), idx);
        if let Some(&id) = self.bound.borrow().get(&key) {
            return Var { graph: self, id };
        }
        let t = &store.by_index(idx).tensor;
        let v = self.leaf(t, self.grad_enabled && t.requires_grad());
        self.bound.borrow_mut().insert(key, v.id);
        v
    }

    pub fn param_named(&self, store: &ParamStore<T>, name: &str) -> Result<Var<'_, T>> {
        Ok(self.param(store, store.require(name)?))
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or_else(|| contract("concat_rows of nothing"))?;
        let (_, d) = dims2(&nodes[first.id].shape, "concat_rows")?;
        let mut rows = 0;
        let mut value = Vec::new();
        for p in parts {
            let (m, dd) = dims2(&nodes[p.id].shape, "concat_rows")?;
            if dd != d {
                return Err(shape_err("concat_rows", &nodes[first.id].shape, &nodes[p.id].shape));
            }
            rows += m;
            value.extend_from_slice(&nodes[p.id].value);
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(
            vec![rows, d],
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or_else(|| contract("concat_cols of nothing"))?;
        let (m, _) = dims2(&nodes[first.id].shape, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (mm, w) = dims2(&nodes[p.id].shape, "concat_cols")?;
            if mm != m {
                return Err(shape_err("concat_cols", &nodes[first.id].shape, &nodes[p.id].shape));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&nodes[p.id].value[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(
            vec![m, total],
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let bound = self
            .bound
            .borrow()
            .iter()
            .map(|(&(store, idx), &node)| (store, idx, node))
            .collect();
        Ok(Gradients { grads, bound })
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

/// Adds `g` into `slot`, reducing to a single value if the target is a broadcast scalar.
fn add_broadcast<T: Real>(slot: &mut Option<Vec<T>>, target_len: usize, g: &[T], sign: T) {
    if target_len == g.len() {
        add_into(slot, target_len, |b| {
            for (x, &y) in b.iter_mut().zip(g) {
                *x += sign * y;
            }
        });
    } else {
        let s: T = g.iter().copied().sum();
        add_into(slot, 1, |b| b[0] += sign * s);
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let rg = |i: usize| nodes[i].requires_grad;
    let len = |i: usize| nodes[i].value.len();
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                add_broadcast(&mut grads[*a], len(*a), g, T::one());
            }
            if rg(*b) {
                add_broadcast(&mut grads[*b], len(*b), g, T::one());
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                add_broadcast(&mut grads[*a], len(*a), g, T::one());
            }
            if rg(*b) {
                add_broadcast(&mut grads[*b], len(*b), g, -T::one());
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let at = |v: &Vec<T>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
            if rg(*a) {
                let prod: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * at(vb, i)).collect();
                add_broadcast(&mut grads[*a], len(*a), &prod, T::one());
            }
            if rg(*b) {
                let prod: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * at(va, i)).collect();
                add_broadcast(&mut grads[*b], len(*b), &prod, T::one());
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            add_into(&mut grads[*a], len(*a), |b| {
                for (x, &y) in b.iter_mut().zip(g) {
                    *x += c * y;
                }
            });
        }
        Op::AddScalar(a) => add_broadcast(&mut grads[*a], len(*a), g, T::one()),
        Op::Unary(kind, a) => {
            let x = val(*a);
            let y = &nodes[id].value;
            add_into(&mut grads[*a], len(*a), |b| {
                for i in 0..b.len() {
                    let d = match kind {
                        Unary::Sigmoid => y[i] * (T::one() - y[i]),
                        Unary::Gelu => gelu_grad(x[i]),
                        Unary::Log => T::one() / x[i],
                        Unary::Square => T::lit(2.0) * x[i],
                        Unary::LogSigmoid => sigmoid(-x[i]),
                    };
                    b[i] += g[i] * d;
                }
            });
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if rg(*a) {
                add_into(&mut grads[*a], m * k, |buf| matmul_bt_into(g, val(*b), buf, m, n, k));
            }
            if rg(*b) {
                add_into(&mut grads[*b], k * n, |buf| matmul_at_into(val(*a), g, buf, m, k, n));
            }
        }
        Op::MatMulT(a, b) => {
            // out[m×n] = a[m×k] · b[n×k]ᵀ
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[0];
            if rg(*a) {
                add_into(&mut grads[*a], m * k, |buf| matmul_into(g, val(*b), buf, m, n, k));
            }
            if rg(*b) {
                add_into(&mut grads[*b], n * k, |buf| matmul_at_into(g, val(*a), buf, m, n, k));
            }
        }
        Op::AddRow(x, v) => {
            let d = len(*v);
            if rg(*x) {
                add_broadcast(&mut grads[*x], len(*x), g, T::one());
            }
            if rg(*v) {
                add_into(&mut grads[*v], d, |b| {
                    for row in g.chunks(d) {
                        for (bj, &gj) in b.iter_mut().zip(row) {
                            *bj += gj;
                        }
                    }
                });
            }
        }
        Op::MulRow(x, v) => {
            let d = len(*v);
            let (vx, vv) = (val(*x), val(*v));
            if rg(*x) {
                add_into(&mut grads[*x], len(*x), |b| {
                    for (i, bi) in b.iter_mut().enumerate() {
                        *bi += g[i] * vv[i % d];
                    }
                });
            }
            if rg(*v) {
                add_into(&mut grads[*v], d, |b| {
                    for (i, &gi) in g.iter().enumerate() {
                        b[i % d] += gi * vx[i];
                    }
                });
            }
        }
        Op::Softmax(a) => {
            let y = &nodes[id].value;
            let n = nodes[id].shape[1];
            add_into(&mut grads[*a], y.len(), |b| {
                for ((yr, gr), br) in y.chunks(n).zip(g.chunks(n)).zip(b.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        br[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = len(*gain);
            let gv = val(*gain);
            if rg(*x) {
                add_into(&mut grads[*x], len(*x), |b| {
                    let dn = T::lit(d as f64);
                    for (r, ((gr, xr), br)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(b.chunks_mut(d))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            s1 += gh;
                            s2 += gh * xr[j];
                        }
                        let k = rstd[r] / dn;
                        for j in 0..d {
                            br[j] += k * (dn * gr[j] * gv[j] - s1 - xr[j] * s2);
                        }
                    }
                });
            }
            if rg(*gain) {
                add_into(&mut grads[*gain], d, |b| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            b[j] += gr[j] * xr[j];
                        }
                    }
                });
            }
            if rg(*bias) {
                add_into(&mut grads[*bias], d, |b| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            b[j] += gr[j];
                        }
                    }
                });
            }
        }
        Op::Sum(a) => {
            let g0 = g[0];
            add_into(&mut grads[*a], len(*a), |b| b.iter_mut().for_each(|x| *x += g0));
        }
        Op::Mean(a) => {
            let g0 = g[0] / T::lit(len(*a) as f64);
            add_into(&mut grads[*a], len(*a), |b| b.iter_mut().for_each(|x| *x += g0));
        }
        Op::Reshape(a) => add_broadcast(&mut grads[*a], len(*a), g, T::one()),
        Op::Gather(a, idx) => {
            let d = nodes[*a].shape[1];
            add_into(&mut grads[*a], len(*a), |b| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        b[src * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let l = len(p);
                if rg(p) {
                    add_broadcast(&mut grads[p], l, &g[off..off + l], T::one());
                }
                off += l;
            }
        }
        Op::SliceCols(a, start) => {
            let (m, total) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let w = nodes[id].shape[1];
            let start = *start;
            add_into(&mut grads[*a], m * total, |b| {
                for i in 0..m {
                    for j in 0..w {
                        b[i * total + start + j] += g[i * w + j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = nodes[id].shape[1];
            let m = nodes[id].shape[0];
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].shape[1];
                if rg(p) {
                    add_into(&mut grads[p], m * w, |b| {
                        for i in 0..m {
                            for j in 0..w {
                                b[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                }
                off += w;
            }
        }
        Op::Rotary(a, table) => {
            let width = table.width();
            add_into(&mut grads[*a], len(*a), |b| {
                for r in 0..table.rows {
                    for j in 0..table.pairs {
                        let (c, s) = (table.cos[r * table.pairs + j], table.sin[r * table.pairs + j]);
                        let i0 = r * width + 2 * j;
                        let (g0, g1) = (g[i0], g[i0 + 1]);
                        b[i0] += g0 * c + g1 * s;
                        b[i0 + 1] += g1 * c - g0 * s;
                    }
                }
            });
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<(u64, usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if unreachable.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Tensor::new(v.shape(), g.clone()).ok()
    }

    /// Adds parameter gradients into the matching buffers of `store`.
    /// Parameters reached by no path receive an explicit zero gradient.
    pub fn accumulate(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(sid, idx, node) in &self.bound {
            if sid != store.id() {
                continue;
            }
            let t = &mut store.by_index_mut(idx).tensor;
            if !t.requires_grad() {
                continue;
            }
            match &self.grads[node] {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
            }
        }
        Ok(())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn rows(&self) -> usize {
        self.shape().first().copied().unwrap_or(1)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    /// The single value of a one-element node.
    pub fn item(&self) -> T {
        let nodes = self.graph.nodes.borrow();
        nodes[self.id].value[0]
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(contract("vars from different graphs"))
        }
    }

    fn binary(
        self,
        other: Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        mk: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let (shape, value) = if a.shape == b.shape {
            (a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
        } else if b.value.len() == 1 {
            let y = b.value[0];
            (a.shape.clone(), a.value.iter().map(|&x| f(x, y)).collect())
        } else if a.value.len() == 1 {
            let x = a.value[0];
            (b.shape.clone(), b.value.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(shape_err(op, &a.shape, &b.shape));
        };
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.graph.push(shape, value, mk(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    fn map_unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let value = a.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        self.graph.push(shape, value, op, rg)
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.map_unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.map_unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn unary(self, kind: Unary) -> Result<Var<'g, T>> {
        if kind == Unary::Log {
            let nodes = self.graph.nodes.borrow();
            if let Some(bad) = nodes[self.id].value.iter().find(|x| **x <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => gelu,
            Unary::Log => T::ln,
            Unary::Square => |x| x * x,
            Unary::LogSigmoid => log_sigmoid,
        };
        Ok(self.map_unary(f, Op::Unary(kind, self.id)))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.map_unary(sigmoid, Op::Unary(Unary::Sigmoid, self.id))
    }

    pub fn gelu(self) -> Var<'g, T> {
        self.map_unary(gelu, Op::Unary(Unary::Gelu, self.id))
    }

    pub fn square(self) -> Var<'g, T> {
        self.map_unary(|x| x * x, Op::Unary(Unary::Square, self.id))
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        self.unary(Unary::Log)
    }

    pub fn log_sigmoid(self) -> Var<'g, T> {
        self.map_unary(log_sigmoid, Op::Unary(Unary::LogSigmoid, self.id))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let (m, k) = dims2(&a.shape, "matmul")?;
        let (k2, n) = dims2(&b.shape, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &a.shape, &b.shape));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&a.value, &b.value, &mut out, m, k, n);
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.graph.push(vec![m, n], out, Op::MatMul(self.id, other.id), rg))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let (m, k) = dims2(&a.shape, "matmul_t")?;
        let (n, k2) = dims2(&b.shape, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", &a.shape, &b.shape));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_into(&a.value, &b.value, &mut out, m, k, n);
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.graph.push(vec![m, n], out, Op::MatMulT(self.id, other.id), rg))
    }

    fn row_op(
        self,
        v: Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        mk: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&v)?;
        let nodes = self.graph.nodes.borrow();
        let (x, r) = (&nodes[self.id], &nodes[v.id]);
        let d = r.value.len();
        if x.shape.last() != Some(&d) || d == 0 {
            return Err(shape_err(op, &x.shape, &r.shape));
        }
        let value = x
            .value
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, r.value[i % d]))
            .collect();
        let (shape, rg) = (x.shape.clone(), x.requires_grad || r.requires_grad);
        drop(nodes);
        Ok(self.graph.push(shape, value, mk(self.id, v.id), rg))
    }

    /// Adds a length-`d` vector to every row.
    pub fn add_row(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        self.row_op(v, "add_row", |a, b| a + b, Op::AddRow)
    }

    /// Multiplies every row elementwise by a length-`d` vector.
    pub fn mul_row(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        self.row_op(v, "mul_row", |a, b| a * b, Op::MulRow)
    }

    pub fn softmax_rows(self) -> Result<Var<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let (m, n) = dims2(&a.shape, "softmax_rows")?;
        let mut out = a.value.clone();
        softmax_rows_inplace(&mut out, m, n);
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self.graph.push(vec![m, n], out, Op::Softmax(self.id), rg))
    }

    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        self.same_graph(&gain)?;
        self.same_graph(&bias)?;
        let nodes = self.graph.nodes.borrow();
        let (x, gv, bv) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
        let d = gv.value.len();
        if x.shape.last() != Some(&d) || bv.value.len() != d || d == 0 {
            return Err(shape_err("layer_norm", &x.shape, &gv.shape));
        }
        let rows = x.value.len() / d;
        let mut xhat = Vec::with_capacity(x.value.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.value.len());
        for row in x.value.chunks(d) {
            let mean = row_mean(row);
            let (_, rs) = row_stats(row, eps);
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * gv.value[j] + bv.value[j]);
            }
        }
        let rg = x.requires_grad || gv.requires_grad || bv.requires_grad;
        let shape = x.shape.clone();
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(self) -> Var<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let s: T = a.value.iter().copied().sum();
        let rg = a.requires_grad;
        drop(nodes);
        self.graph.push(vec![], vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let s: T = a.value.iter().copied().sum::<T>() / T::lit(a.value.len() as f64);
        let rg = a.requires_grad;
        drop(nodes);
        self.graph.push(vec![], vec![s], Op::Mean(self.id), rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        if numel(shape) != a.value.len() {
            return Err(shape_err("reshape", &a.shape, shape));
        }
        let (value, rg) = (a.value.clone(), a.requires_grad);
        drop(nodes);
        Ok(self.graph.push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// Row `r` of the output is row `idx[r]` of `self`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let (m, d) = dims2(&a.shape, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(contract(format!("gather index {bad} out of {m} rows")));
        }
        let mut value = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            value.extend_from_slice(&a.value[i * d..(i + 1) * d]);
        }
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self
            .graph
            .push(vec![idx.len(), d], value, Op::Gather(self.id, idx.to_vec()), rg))
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let (m, total) = dims2(&a.shape, "slice_cols")?;
        if start + width > total {
            return Err(contract(format!("columns {start}..{} of {total}", start + width)));
        }
        let mut value = Vec::with_capacity(m * width);
        for i in 0..m {
            value.extend_from_slice(&a.value[i * total + start..i * total + start + width]);
        }
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self
            .graph
            .push(vec![m, width], value, Op::SliceCols(self.id, start), rg))
    }

    /// Rotates consecutive value pairs of each row by the table's angles.
    pub fn rotary(self, table: &RotaryTable<T>) -> Result<Var<'g, T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let (m, w) = dims2(&a.shape, "rotary")?;
        if m != table.rows || w != table.width() {
            return Err(shape_err("rotary", &a.shape, &[table.rows, table.width()]));
        }
        let out = rotate(&a.value, table);
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self
            .graph
            .push(vec![m, w], out, Op::Rotary(self.id, table.clone()), rg))
    }
}

pub(crate) fn rotate<T: Real>(x: &[T], table: &RotaryTable<T>) -> Vec<T> {
    let width = table.width();
    let mut out = x.to_vec();
    for r in 0..table.rows {
        for j in 0..table.pairs {
            let (c, s) = (table.cos[r * table.pairs + j], table.sin[r * table.pairs + j]);
            let i0 = r * width + 2 * j;
            let (x0, x1) = (x[i0], x[i0 + 1]);
            out[i0] = x0 * c - x1 * s;
            out[i0 + 1] = x0 * s + x1 * c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_derivative() {
        let g = Graph::new();
        let x = g.variable(&Tensor::scalar(3.0));
        let loss = x.square();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_product_by_hand() {
        // d/dA sum(A·B) = ones · Bᵀ
        let g = Graph::new();
        let a = g.variable(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let loss = a.matmul(b).unwrap().sum();
        let ga = g.backward(loss).unwrap().get(a).unwrap();
        assert_eq!(ga.data(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        store.insert("used", t(&[2], &[1.0, 2.0])).unwrap();
        store.insert("unused", t(&[2], &[1.0, 2.0])).unwrap();
        let g = Graph::new();
        let u = g.param_named(&store, "used").unwrap();
        let _ = g.param_named(&store, "unused").unwrap();
        let loss = u.square().sum();
        g.backward(loss).unwrap().accumulate(&mut store).unwrap();
        assert_eq!(store.get("unused").unwrap().grad().unwrap(), &[0.0, 0.0]);
        assert_eq!(store.get("used").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.variable(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[1], &[3.0])).unwrap();
        for _ in 0..2 {
            let g = Graph::new();
            let w = g.param_named(&store, "w").unwrap();
            let loss = w.square().sum();
            g.backward(loss).unwrap().accumulate(&mut store).unwrap();
        }
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[12.0]);
    }

    #[test]
    fn scalar_broadcast_in_binary_ops() {
        let g = Graph::new();
        let x = g.variable(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.variable(&Tensor::scalar(2.0));
        let y = x.mul(s).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        let bad = g.variable(&t(&[2], &[1.0, 1.0]));
        assert!(x.add(bad).is_err());
    }

    #[test]
    fn log_domain_error() {
        let g = Graph::new();
        let x = g.variable(&t(&[2], &[1.0, -1.0]));
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
    }

    /// Every differentiable op composed into one scalar and checked against
    /// central differences over many seeds.
    #[test]
    fn every_op_passes_grad_check() {
        for seed in 0..24u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("a", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
            store.insert("b", Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
            store.insert("v", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
            store.insert("gain", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
            store.insert("bias", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
            store.insert("s", Tensor::randn(&[], 1.0, &mut rng)).unwrap();
            let angles: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 + seed as f64).collect();
            let table = RotaryTable {
                rows: 3,
                pairs: 2,
                cos: Rc::new(angles.iter().map(|a| a.cos()).collect()),
                sin: Rc::new(angles.iter().map(|a| a.sin()).collect()),
            };
            let report = grad_check(
                &store,
                |g, p| {
                    let a = g.param_named(p, "a")?;
                    let b = g.param_named(p, "b")?;
                    let v = g.param_named(p, "v")?;
                    let s = g.param_named(p, "s")?;
                    let h = a.matmul(b)?.add_row(v)?.gelu();
                    let h = h.layer_norm(g.param_named(p, "gain")?, g.param_named(p, "bias")?, 1e-5)?;
                    let h = h.mul_row(v)?.rotary(&table)?;
                    let att = h.matmul_t(a)?.softmax_rows()?;
                    let left = h.slice_cols(1, 2)?;
                    let right = h.slice_cols(0, 1)?;
                    let cols = g.concat_cols(&[left, right, h.slice_cols(3, 1)?])?;
                    let tail = g.concat_cols(&[att.gather_rows(&[2, 0])?, h.gather_rows(&[1, 1])?.slice_cols(2, 1)?])?;
                    let stacked = g.concat_rows(&[cols, tail])?;
                    let z = stacked.sigmoid().add_scalar(0.5).log()?.mul(s)?;
                    let w = z.reshape(&[20])?.square().mean();
                    let u = att.sub(att.scale(0.5))?.sum().log_sigmoid();
                    w.add(u)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let run = |which: u8| {
            let g = Graph::new();
            let x = g.variable(&x0);
            let l1 = x.matmul(x).unwrap().gelu().sum();
            let l2 = x.softmax_rows().unwrap().square().mean();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => l1.add(l2).unwrap(),
            };
            g.backward(loss).unwrap().get(x).unwrap()
        };
        let (g1, g2, g12) = (run(0), run(1), run(2));
        let summed = g1.add(&g2).unwrap();
        assert!(summed.max_abs_diff(&g12).unwrap() < 1e-12);
    }
}
