//! Dense row-major tensors and the kernels the tape is built on.
//!
//! All reductions run sequentially in a fixed order so that a forward or
//! backward pass produces the same bits on every run of the same build.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Accumulated gradient, same shape as `data`.
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[offset(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = offset(&self.shape, index);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Batched matrix product with broadcasting over leading dimensions.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (shape, plan) = matmul_plan(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); shape.iter().product()];
        matmul_forward(&plan, &self.data, &other.data, &mut out);
        Tensor::from_vec(&shape, out)
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let r = self.rank();
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        let mut out = vec![T::zero(); self.data.len()];
        for (src, dst) in self
            .data
            .chunks(rows * cols)
            .zip(out.chunks_mut(rows * cols))
        {
            transpose_into(src, rows, cols, dst);
        }
        Tensor::from_vec(&shape, out)
    }

    /// Row softmax over the last axis.
    pub fn softmax_last(&self) -> Self {
        let n = *self.shape.last().unwrap_or(&1);
        let mut out = self.data.clone();
        for row in out.chunks_mut(n.max(1)) {
            softmax_row(row, None);
        }
        Self {
            shape: self.shape.clone(),
            data: out,
            grad: None,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        binary(self, other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        binary(self, other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        binary(self, other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }
}

fn binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let mut out = vec![T::zero(); shape.iter().product()];
    let bc = Broadcast::new(&shape, &a.shape, &b.shape);
    bc.for_each(|o, ia, ib| out[o] = f(a.data[ia], b.data[ib]));
    Tensor::from_vec(&shape, out)
}

pub(crate) fn offset(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut o = 0;
    for (d, (&s, &i)) in shape.iter().zip(index).enumerate() {
        assert!(i < s, "index {i} out of range {s} on axis {d}");
        o = o * s + i;
    }
    o
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `input` viewed in the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(input);
    let pad = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < pad || input[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Access {
    /// Same layout as the output.
    Direct,
    /// Input repeats along the leading axes: index = o % len.
    Suffix(usize),
    General,
}

fn access(input: &[usize], out: &[usize]) -> Access {
    let n_in: usize = input.iter().product();
    let n_out: usize = out.iter().product();
    if n_in == n_out {
        return Access::Direct;
    }
    let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        Access::Suffix(n_in.max(1))
    } else {
        Access::General
    }
}

/// Index mapper for a two-operand broadcast.
pub(crate) struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    aa: Access,
    ab: Access,
}

impl Broadcast {
    pub(crate) fn new(out: &[usize], a: &[usize], b: &[usize]) -> Self {
        Self {
            out: out.to_vec(),
            sa: broadcast_strides(a, out),
            sb: broadcast_strides(b, out),
            aa: access(a, out),
            ab: access(b, out),
        }
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n: usize = self.out.iter().product();
        let fast = |acc: Access, o: usize| match acc {
            Access::Direct => Some(o),
            Access::Suffix(len) => Some(o % len),
            Access::General => None,
        };
        if self.aa != Access::General && self.ab != Access::General {
            for o in 0..n {
                f(o, fast(self.aa, o).unwrap(), fast(self.ab, o).unwrap());
            }
            return;
        }
        let r = self.out.len();
        let mut idx = vec![0usize; r];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for d in (0..r).rev() {
                idx[d] += 1;
                ia += self.sa[d];
                ib += self.sb[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ia -= self.sa[d] * self.out[d];
                ib -= self.sb[d] * self.out[d];
                idx[d] = 0;
            }
        }
    }
}

/// Layout of a batched matmul after broadcasting the leading axes.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (a offset, b offset, out offset) for every batch entry, in order.
    pub batches: Vec<(usize, usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, MatmulPlan)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shape("matmul", ba, bb).map_err(|_| Error::shape("matmul", a, b))?;
    let mut out = batch.clone();
    out.extend([m, n]);
    let nb: usize = batch.iter().product();
    let mut batches = Vec::with_capacity(nb);
    if bb.iter().product::<usize>() == 1 && ba.len() == batch.len() {
        // B shared by every batch entry: fold the batch into the row dimension.
        batches.push((0, 0, 0));
        return Ok((
            out,
            MatmulPlan {
                m: m * nb,
                k,
                n,
                batches,
            },
        ));
    }
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut idx = vec![0usize; batch.len()];
    for bi in 0..nb {
        let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        batches.push((oa * m * k, ob * k * n, bi * m * n));
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, MatmulPlan { m, k, n, batches }))
}

pub(crate) fn matmul_forward<T: Scalar>(plan: &MatmulPlan, a: &[T], b: &[T], out: &mut [T]) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    for &(oa, ob, oc) in &plan.batches {
        gemm_nn(
            m,
            k,
            n,
            &a[oa..oa + m * k],
            &b[ob..ob + k * n],
            &mut out[oc..oc + m * n],
        );
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` for row-major `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for row-major `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut bt = vec![T::zero(); k * n];
    transpose_into(b, n, k, &mut bt);
    gemm_nn(m, k, n, a, &bt, c);
}

pub(crate) fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Entries below this are treated as masked by `softmax_row`.
pub const MASK_SENTINEL: f64 = -1e9;

/// In-place stabilized softmax of one row. Masked entries (`mask[i] == true`)
/// are replaced by the sentinel; a fully masked row becomes all zeros.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let sentinel = T::of(MASK_SENTINEL);
    if let Some(mask) = mask {
        for (x, &m) in row.iter_mut().zip(mask) {
            if m {
                *x = sentinel;
            }
        }
        if mask.iter().all(|&m| m) {
            row.iter_mut().for_each(|x| *x = T::zero());
            return;
        }
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
