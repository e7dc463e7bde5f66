//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! One tape is owned by one thread; batch parallelism uses one tape per
//! sample.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_shape, gemm_nt, gemm_tn, matmul_plan, softmax_row, transpose_into,
    Broadcast, MatmulPlan, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    TanhBackward,
    SoftmaxBackward,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var, MatmulPlan),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a parameter, if it took part in the computation.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }

    /// Add every parameter gradient into `acc` (one buffer per parameter).
    pub fn accumulate_into(&self, acc: &mut [Vec<T>]) {
        for (i, slot) in acc.iter_mut().enumerate() {
            if let Some(g) = self.param(ParamId(i)) {
                for (a, &b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that records its gradient (used by tests and gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Load a parameter; repeated loads return the same node so shared
    /// parameters accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if id.0 >= self.params.len() {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let value = Tensor::from_vec(store.get(id).shape(), store.get(id).data().to_vec())
            .expect("stored parameter is well formed");
        let v = self.push(value, Op::Param, true);
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, plan) = matmul_plan(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); shape.iter().product()];
        crate::tensor::matmul_forward(&plan, self.data(a), self.data(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MatMul(a, b, plan), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let bc = Broadcast::new(&shape, self.shape(a), self.shape(b));
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); shape.iter().product()];
        bc.for_each(|o, ia, ib| out[o] = f(da[ia], db[ib]));
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, op, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Softmax over the last axis; `mask` (same length as `a`, `true` =
    /// masked) sets entries to the sentinel before normalizing. Fully
    /// masked rows become zero.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = self.data(a).to_vec();
        if let Some(m) = mask {
            if m.len() != out.len() {
                return Err(Error::shape("softmax_mask", &shape, &[m.len()]));
            }
        }
        for (r, row) in out.chunks_mut(n.max(1)).enumerate() {
            softmax_row(row, mask.map(|m| &m[r * n..(r + 1) * n]));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Softmax(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(&new_shape, out)?,
            Op::Narrow { x: a, axis, start },
            rg,
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let w = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let src = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = 1;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(&new_shape, out)?, Op::SumAxis { x: a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::of(n as f64)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().copied().fold(T::zero(), |acc, x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let eps = T::of(1e-5);
        let inv_d = T::one() / T::of(d as f64);
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) * inv_d;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, v| a + v)
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of a 2-D table (embedding lookup / row selection).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", &shape, &[ids.len()]));
        }
        let w = shape[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            if i >= shape[0] {
                return Err(Error::shape("gather_rows", &shape, &[i]));
            }
            out.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), w], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`)
    /// for `logits: [n, classes]`. Rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let c = shape[1];
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        let mut count = 0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            softmax_row(row, None);
            if let Some(t) = targets[r] {
                if t >= c {
                    return Err(Error::shape("cross_entropy", &shape, &[t]));
                }
                loss -= row[t].max(T::min_positive_value()).ln();
                count += 1;
            }
        }
        if count > 0 {
            loss /= T::of(count as f64);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b, plan) => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.rg(*a) {
                    let ad = self.data(*b);
                    let ga = self.grad_buf(grads, *a);
                    for &(oa, ob, oc) in &plan.batches {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[oc..oc + m * n],
                            &ad[ob..ob + k * n],
                            &mut ga[oa..oa + m * k],
                        );
                    }
                }
                if self.rg(*b) {
                    let av = self.data(*a);
                    let gb = self.grad_buf(grads, *b);
                    for &(oa, ob, oc) in &plan.batches {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &av[oa..oa + m * k],
                            &g[oc..oc + m * n],
                            &mut gb[ob..ob + k * n],
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let r = s.len();
                let (rows, cols) = (s[r - 2], s[r - 1]);
                let mut back = vec![T::zero(); g.len()];
                for (src, dst) in g.chunks(rows * cols).zip(back.chunks_mut(rows * cols)) {
                    transpose_into(src, rows, cols, dst);
                }
                add_into(self.grad_buf(grads, *a), &back);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let bc = Broadcast::new(node.value.shape(), self.shape(*a), self.shape(*b));
                if self.rg(*a) {
                    let ga = self.grad_buf(grads, *a);
                    bc.for_each(|o, ia, _| ga[ia] += g[o]);
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(grads, *b);
                    bc.for_each(|o, _, ib| gb[ib] += sign * g[o]);
                }
            }
            Op::Mul(a, b) => {
                let bc = Broadcast::new(node.value.shape(), self.shape(*a), self.shape(*b));
                if self.rg(*a) {
                    let bd = self.data(*b);
                    let ga = self.grad_buf(grads, *a);
                    bc.for_each(|o, ia, ib| ga[ia] += g[o] * bd[ib]);
                }
                if self.rg(*b) {
                    let ad = self.data(*a);
                    let gb = self.grad_buf(grads, *b);
                    bc.for_each(|o, ia, ib| gb[ib] += g[o] * ad[ia]);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                let ga = self.grad_buf(grads, *a);
                for (x, &gv) in ga.iter_mut().zip(g) {
                    *x += gv * s;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => add_into(self.grad_buf(grads, *a), g),
            Op::Relu(a) => {
                let ga = self.grad_buf(grads, *a);
                for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *x += gv;
                    }
                }
            }
            Op::Tanh(a) => {
                let broken = self.fault == Some(Fault::TanhBackward);
                let ga = self.grad_buf(grads, *a);
                for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                    let d = if broken { T::one() - yv } else { T::one() - yv * yv };
                    *x += gv * d;
                }
            }
            Op::Sigmoid(a) => {
                let ga = self.grad_buf(grads, *a);
                for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *x += gv * yv * (T::one() - yv);
                }
            }
            Op::Softmax(a) => {
                let broken = self.fault == Some(Fault::SoftmaxBackward);
                let n = *node.value.shape().last().unwrap_or(&1);
                let ga = self.grad_buf(grads, *a);
                for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot = if broken {
                        T::zero()
                    } else {
                        gr.iter().zip(yr).fold(T::zero(), |acc, (&u, &v)| acc + u * v)
                    };
                    for j in 0..n {
                        xr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let gx = self.grad_buf(grads, *x);
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    add_into(&mut gx[base..base + len * inner], src);
                }
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &x in xs {
                    let w = self.shape(x)[*axis] * inner;
                    if self.rg(x) {
                        let gx = self.grad_buf(grads, x);
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + w];
                            add_into(&mut gx[o * w..(o + 1) * w], src);
                        }
                    }
                    off += w;
                }
            }
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let n = xs[*axis];
                let gx = self.grad_buf(grads, *x);
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        add_into(&mut gx[base..base + inner], &g[o * inner..(o + 1) * inner]);
                    }
                }
            }
            Op::SumAll(a) => {
                let gv = g[0];
                for x in self.grad_buf(grads, *a).iter_mut() {
                    *x += gv;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let inv_d = T::one() / T::of(d as f64);
                if self.rg(*gain) {
                    let gg = self.grad_buf(grads, *gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = self.grad_buf(grads, *bias);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if self.rg(*x) {
                    let gamma = self.data(*gain).to_vec();
                    let gx = self.grad_buf(grads, *x);
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d *= inv_d;
                        mean_dh *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let w = self.shape(*table)[1];
                let gt = self.grad_buf(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::of(*count as f64);
                let gl = self.grad_buf(grads, *logits);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Constant lower-triangular matrix whose row `t` averages entries `0..=t`.
pub fn causal_mean_matrix<T: Scalar>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    for t in 0..n {
        let w = T::one() / T::of((t + 1) as f64);
        for j in 0..=t {
            m.set(&[t, j], w);
        }
    }
    m
}
