//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are either parameters
//! (which receive gradients) or constants (data, masks). Every primitive
//! records its inputs by node index, so the node list is already in
//! topological order and [`Tape::grad`] is a single reverse sweep.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{softmax_in_place, Real, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MulConst(usize, Vec<T>),
    Sum(usize),
    Relu(usize),
    Reshape(usize),
    MatMulNt(usize, usize),
    GroupedNt(usize, usize),
    AddBias(usize, usize),
    SoftmaxLast(usize),
    Stack(Vec<usize>),
    Mix(usize, usize),
    MseMean(usize, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<String>,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    fn ng(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.index].param = Some(name.into());
        v
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, ctx: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(ctx, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a.index, b.index), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a.index, b.index), ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a.index, factor), ng)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(shape_err("mul_const", x.shape(), &[mask.len()]));
        }
        let mut out = x.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a.index, mask), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a.index), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a.index), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a.index), ng))
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNt(a.index, b.index), ng))
    }

    /// Per-group `x[.., g, :] · w[g]ᵀ` with `x: [B, G, d]`, `w: [G, o, d]`,
    /// producing `[B, G, o]`.
    pub fn grouped_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (&[b, g, d], &[gw, o, dw]) = (xs, ws) else {
            return Err(shape_err("grouped_nt rank", &[3, 3], &[xs.len(), ws.len()]));
        };
        if g != gw || d != dw {
            return Err(shape_err("grouped_nt", xs, ws));
        }
        let mut out = Tensor::zeros(&[b, g, o]);
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            let od = out.data_mut();
            for gi in 0..g {
                T::gemm(
                    b,
                    d,
                    o,
                    T::one(),
                    &xv[gi * d..],
                    (g * d) as isize,
                    1,
                    &wv[gi * o * d..],
                    1,
                    d as isize,
                    T::zero(),
                    &mut od[gi * o..],
                    (g * o) as isize,
                    1,
                );
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::GroupedNt(x.index, w.index), ng))
    }

    /// Adds `bias` to every trailing block of `x` with the bias's size.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let s = bv.len();
        let trailing: usize = xv.shape()[xv.shape().len().saturating_sub(bv.shape().len())..]
            .iter()
            .product();
        if trailing != s || !xv.shape().ends_with(bv.shape()) {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(s) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x.index, bias.index), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = *out.shape().last().unwrap();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxLast(x.index), ng)
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let first = items.first().ok_or(Error::Empty("stack input"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * items.len());
        for &v in items {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("stack", &shape, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut full = vec![items.len()];
        full.extend_from_slice(&shape);
        let ng = items.iter().any(|&v| self.ng(v));
        let out = Tensor::new(&full, data)?;
        Ok(self.push(out, Op::Stack(items.iter().map(|v| v.index).collect()), ng))
    }

    /// Gated mixture: `out[b, k, :] = Σ_m gates[b, k, m] · experts[m, b, :]`.
    pub fn mix(&mut self, gates: Var, experts: Var) -> Result<Var> {
        let (gs, es) = (self.value(gates).shape(), self.value(experts).shape());
        let (&[b, k, m], &[me, be, w]) = (gs, es) else {
            return Err(shape_err("mix rank", &[3, 3], &[gs.len(), es.len()]));
        };
        if m != me || b != be {
            return Err(shape_err("mix", gs, es));
        }
        let mut out = Tensor::zeros(&[b, k, w]);
        {
            let (gv, ev) = (self.value(gates).data(), self.value(experts).data());
            let od = out.data_mut();
            for bi in 0..b {
                for ki in 0..k {
                    let dst = &mut od[(bi * k + ki) * w..(bi * k + ki + 1) * w];
                    for mi in 0..m {
                        let g = gv[(bi * k + ki) * m + mi];
                        let src = &ev[(mi * b + bi) * w..(mi * b + bi + 1) * w];
                        for (o, &e) in dst.iter_mut().zip(src) {
                            *o = *o + g * e;
                        }
                    }
                }
            }
        }
        let ng = self.ng(gates) || self.ng(experts);
        Ok(self.push(out, Op::Mix(gates.index, experts.index), ng))
    }

    /// Mean squared error over all entries, as a scalar.
    pub fn mse_mean(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_mean", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = T::from_f64(p.len() as f64);
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(s / n), Op::MseMean(pred.index, target.index), ng))
    }

    /// Gradient of the scalar `loss` with respect to each of `params`.
    ///
    /// Adjoints live only for the duration of the call.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        if loss.tape != self.id {
            return Err(Error::NotOnTape(format!("loss #{}", loss.index)));
        }
        let lv = &self.nodes[loss.index].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(format!("{:?}", lv.shape())));
        }
        for p in params {
            let ok = p.tape == self.id
                && self.nodes.get(p.index).is_some_and(|n| n.param.is_some());
            if !ok {
                let name = self
                    .nodes
                    .get(p.index)
                    .filter(|_| p.tape == self.id)
                    .and_then(|n| n.param.clone())
                    .unwrap_or_else(|| format!("#{}", p.index));
                return Err(Error::NotOnTape(name));
            }
        }

        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        adj[loss.index] = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(i, &dy, &mut adj);
            adj[i] = Some(dy);
        }

        Ok(params
            .iter()
            .map(|p| {
                let shape = self.nodes[p.index].value.shape();
                match adj[..].get(p.index).and_then(|a| a.clone()) {
                    Some(g) => Tensor::new(shape, g).expect("adjoint shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn backprop(&self, i: usize, dy: &[T], adj: &mut [Option<Vec<T>>]) {
        let val = |j: usize| self.nodes[j].value.data();
        let wants = |j: usize| self.nodes[j].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if wants(j) {
                        accumulate(adj, j, dy.iter().copied());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(adj, *a, dy.iter().zip(bv).map(|(&d, &y)| d * y));
                }
                if wants(*b) {
                    accumulate(adj, *b, dy.iter().zip(av).map(|(&d, &x)| d * x));
                }
            }
            Op::Scale(a, f) => accumulate(adj, *a, dy.iter().map(|&d| d * *f)),
            Op::MulConst(a, mask) => {
                accumulate(adj, *a, dy.iter().zip(mask).map(|(&d, &m)| d * m))
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(adj, *a, core::iter::repeat_n(dy[0], n));
            }
            Op::Relu(a) => accumulate(
                adj,
                *a,
                dy.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }),
            ),
            Op::Reshape(a) => accumulate(adj, *a, dy.iter().copied()),
            Op::MatMulNt(a, b) => {
                let (at, bt) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
                if wants(*a) {
                    let g = slot(adj, *a, m * k);
                    T::gemm(m, n, k, T::one(), dy, n as isize, 1, bt.data(), k as isize, 1, T::one(), g, k as isize, 1);
                }
                if wants(*b) {
                    let g = slot(adj, *b, n * k);
                    T::gemm(n, m, k, T::one(), dy, 1, n as isize, at.data(), k as isize, 1, T::one(), g, k as isize, 1);
                }
            }
            Op::GroupedNt(x, w) => {
                let (xt, wt) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (b, g, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let o = wt.shape()[1];
                if wants(*x) {
                    let gx = slot(adj, *x, b * g * d);
                    for gi in 0..g {
                        T::gemm(
                            b, o, d, T::one(),
                            &dy[gi * o..], (g * o) as isize, 1,
                            &wt.data()[gi * o * d..], d as isize, 1,
                            T::one(), &mut gx[gi * d..], (g * d) as isize, 1,
                        );
                    }
                }
                if wants(*w) {
                    let gw = slot(adj, *w, g * o * d);
                    for gi in 0..g {
                        T::gemm(
                            o, b, d, T::one(),
                            &dy[gi * o..], 1, (g * o) as isize,
                            &xt.data()[gi * d..], (g * d) as isize, 1,
                            T::one(), &mut gw[gi * o * d..], d as isize, 1,
                        );
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(adj, *x, dy.iter().copied());
                }
                if wants(*bias) {
                    let s = val(*bias).len();
                    let gb = slot(adj, *bias, s);
                    for row in dy.chunks(s) {
                        for (o, &d) in gb.iter_mut().zip(row) {
                            *o = *o + d;
                        }
                    }
                }
            }
            Op::SoftmaxLast(x) => {
                let y = self.nodes[i].value.data();
                let d = *self.nodes[i].value.shape().last().unwrap();
                let gx = slot(adj, *x, y.len());
                for ((gr, yr), dr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &dd) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = *o + yy * (dd - dot);
                    }
                }
            }
            Op::Stack(items) => {
                let n = dy.len() / items.len();
                for (pos, &j) in items.iter().enumerate() {
                    if wants(j) {
                        accumulate(adj, j, dy[pos * n..(pos + 1) * n].iter().copied());
                    }
                }
            }
            Op::Mix(gates, experts) => {
                let (gt, et) = (&self.nodes[*gates].value, &self.nodes[*experts].value);
                let (b, k, m) = (gt.shape()[0], gt.shape()[1], gt.shape()[2]);
                let w = et.shape()[2];
                let (gv, ev) = (gt.data(), et.data());
                if wants(*gates) {
                    let gg = slot(adj, *gates, b * k * m);
                    for bi in 0..b {
                        for ki in 0..k {
                            let dr = &dy[(bi * k + ki) * w..(bi * k + ki + 1) * w];
                            for mi in 0..m {
                                let er = &ev[(mi * b + bi) * w..(mi * b + bi + 1) * w];
                                let dot: T = dr.iter().zip(er).map(|(&x, &y)| x * y).sum();
                                let o = &mut gg[(bi * k + ki) * m + mi];
                                *o = *o + dot;
                            }
                        }
                    }
                }
                if wants(*experts) {
                    let ge = slot(adj, *experts, m * b * w);
                    for bi in 0..b {
                        for ki in 0..k {
                            let dr = &dy[(bi * k + ki) * w..(bi * k + ki + 1) * w];
                            for mi in 0..m {
                                let g = gv[(bi * k + ki) * m + mi];
                                let er = &mut ge[(mi * b + bi) * w..(mi * b + bi + 1) * w];
                                for (o, &d) in er.iter_mut().zip(dr) {
                                    *o = *o + g * d;
                                }
                            }
                        }
                    }
                }
            }
            Op::MseMean(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let c = dy[0] * T::from_f64(2.0 / pv.len() as f64);
                if wants(*p) {
                    accumulate(adj, *p, pv.iter().zip(tv).map(|(&a, &b)| c * (a - b)));
                }
                if wants(*t) {
                    accumulate(adj, *t, pv.iter().zip(tv).map(|(&a, &b)| c * (b - a)));
                }
            }
        }
    }
}

fn slot<T: Real>(adj: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut [T] {
    adj[j].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(adj: &mut [Option<Vec<T>>], j: usize, grad: impl Iterator<Item = T>) {
    match &mut adj[j] {
        Some(existing) => {
            for (o, g) in existing.iter_mut().zip(grad) {
                *o = *o + g;
            }
        }
        slot @ None => *slot = Some(grad.collect()),
    }
}
