//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its forward value, and (when any
//! input is tracked) records a backward closure on the tape. Parallel
//! kernels split work by output row only; within a row accumulation is
//! strictly sequential, so results are bitwise identical at any thread
//! count.

use std::rc::Rc;

use rayon::prelude::*;

use super::{joint_tape, op_output, Element, Tensor};
use crate::error::{Result, TensorError};

/// Parallelise matmul when m*k*n reaches this many multiply-adds.
const PAR_MIN_FLOPS: usize = 1 << 16;
/// Parallelise row-wise ops when the tensor reaches this many elements.
const PAR_MIN_ELEMS: usize = 1 << 13;

fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = E::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

fn axpy<E: Element>(y: &mut [E], a: E, x: &[E]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// C[m,n] = A[m,k] * B[k,n].
pub(crate) fn mm_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    let row = |i: usize, orow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            axpy(orow, av, &b[p * n..(p + 1) * n]);
        }
    };
    if m * k * n >= PAR_MIN_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    }
    out
}

/// C[m,k] = A[m,n] * B[k,n]^T. Both operands are indexed by rows, so every
/// output element is one contiguous dot product.
pub(crate) fn mm_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * k];
    let row = |i: usize, orow: &mut [E]| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b[p * n..(p + 1) * n]);
        }
    };
    if m * n * k >= PAR_MIN_FLOPS {
        out.par_chunks_mut(k).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        out.chunks_mut(k).enumerate().for_each(|(i, r)| row(i, r));
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub(crate) fn mm_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    let row = |p: usize, orow: &mut [E]| {
        for i in 0..m {
            axpy(orow, a[i * k + p], &b[i * n..(i + 1) * n]);
        }
    };
    if m * k * n >= PAR_MIN_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(p, r)| row(p, r));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(p, r)| row(p, r));
    }
    out
}

/// Decompose `shape` around `axis` into (outer, axis_len, inner) extents.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn softplus_val<E: Element>(x: E) -> E {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|), stable for large |x|.
    x.max(E::zero()) + (-x.abs()).exp().ln_1p()
}

impl<E: Element> Tensor<E> {
    fn zip_op(
        &self,
        rhs: &Tensor<E>,
        op: &'static str,
        f: fn(E, E) -> E,
        dl: fn(E, E) -> E,
        dr: fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            }
            .into());
        }
        let tape = joint_tape(op, &[self, rhs])?;
        let out: Vec<E> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let (an, bn) = (
            self.track().map(|(_, id)| id),
            rhs.track().map(|(_, id)| id),
        );
        let (ad, bd) = (self.data_rc(), rhs.data_rc());
        let shape = self.shape().to_vec();
        Ok(op_output(tape, out, shape, move || {
            Box::new(move |g, acc| {
                if let Some(id) = an {
                    let s = acc.slot(id);
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * dl(ad[i], bd[i]);
                    }
                }
                if let Some(id) = bn {
                    let s = acc.slot(id);
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * dr(ad[i], bd[i]);
                    }
                }
            })
        }))
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.zip_op(rhs, "add", |a, b| a + b, |_, _| E::one(), |_, _| E::one())
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.zip_op(rhs, "sub", |a, b| a - b, |_, _| E::one(), |_, _| -E::one())
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.zip_op(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&self, c: f64) -> Result<Tensor<E>> {
        let cc = E::c(c);
        let tape = joint_tape("scale", &[self])?;
        let out: Vec<E> = self.data().iter().map(|&x| x * cc).collect();
        let xn = self.track().map(|(_, id)| id);
        let shape = self.shape().to_vec();
        Ok(op_output(tape, out, shape, move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * cc;
                    }
                }
            })
        }))
    }

    fn unary_op(&self, op: &'static str, f: fn(E) -> E, df: fn(E) -> E) -> Result<Tensor<E>> {
        let tape = joint_tape(op, &[self])?;
        let out: Vec<E> = self.data().iter().map(|&x| f(x)).collect();
        let xn = self.track().map(|(_, id)| id);
        let xd = self.data_rc();
        let shape = self.shape().to_vec();
        Ok(op_output(tape, out, shape, move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * df(xd[i]);
                    }
                }
            })
        }))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor<E>> {
        self.unary_op(
            "silu",
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (E::one() + x * (E::one() - s))
            },
        )
    }

    /// `ln(1 + e^x)`, numerically stable for large |x|.
    pub fn softplus(&self) -> Result<Tensor<E>> {
        self.unary_op("softplus", softplus_val, sigmoid)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&self) -> Result<Tensor<E>> {
        let tape = joint_tape("sum", &[self])?;
        let mut acc = E::zero();
        for &x in self.data() {
            acc = acc + x;
        }
        let xn = self.track().map(|(_, id)| id);
        Ok(op_output(tape, vec![acc], vec![1], move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    for si in s.iter_mut() {
                        *si = *si + g[0];
                    }
                }
            })
        }))
    }

    /// Arithmetic mean of all elements, as a `[1]` scalar.
    pub fn mean(&self) -> Result<Tensor<E>> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Population variance of all elements, as a `[1]` scalar.
    pub fn variance(&self) -> Result<Tensor<E>> {
        let tape = joint_tape("variance", &[self])?;
        let n = E::c(self.numel() as f64);
        let mut s = E::zero();
        for &x in self.data() {
            s = s + x;
        }
        let mu = s / n;
        let mut v = E::zero();
        for &x in self.data() {
            let d = x - mu;
            v = v + d * d;
        }
        let var = v / n;
        let xn = self.track().map(|(_, id)| id);
        let xd = self.data_rc();
        Ok(op_output(tape, vec![var], vec![1], move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    let two_over_n = E::c(2.0) / n;
                    for (i, si) in s.iter_mut().enumerate() {
                        *si = *si + g[0] * two_over_n * (xd[i] - mu);
                    }
                }
            })
        }))
    }

    /// View with a new shape; shares the underlying buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            }
            .into());
        }
        let tape = joint_tape("reshape", &[self])?;
        let xn = self.track().map(|(_, id)| id);
        let data = self.data_rc();
        // op_output would copy; build directly to keep sharing the buffer.
        match tape {
            None => Tensor::from_shared(data, shape.to_vec()),
            Some(_) => {
                let out = op_output(tape, (*data).clone(), shape.to_vec(), move || {
                    Box::new(move |g, acc| {
                        if let Some(id) = xn {
                            acc.add(id, g);
                        }
                    })
                });
                Ok(out)
            }
        }
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", self.shape()),
            }
            .into());
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let tape = joint_tape("transpose", &[self])?;
        let xd = self.data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let xn = self.track().map(|(_, id)| id);
        Ok(op_output(tape, out, vec![n, m], move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    for j in 0..n {
                        for i in 0..m {
                            s[i * n + j] = s[i * n + j] + g[j * m + i];
                        }
                    }
                }
            })
        }))
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfBounds {
                op: "slice",
                axis,
                shape: self.shape().to_vec(),
            }
            .into());
        }
        let (outer, len, inner) = axis_blocks(self.shape(), axis);
        if start >= end || end > len {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} invalid for axis of length {len}"),
            }
            .into());
        }
        let tape = joint_tape("slice", &[self])?;
        let span = end - start;
        let mut out = Vec::with_capacity(outer * span * inner);
        let xd = self.data();
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&xd[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = span;
        let xn = self.track().map(|(_, id)| id);
        Ok(op_output(tape, out, shape, move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    for o in 0..outer {
                        let sbase = o * len * inner + start * inner;
                        let gbase = o * span * inner;
                        for i in 0..span * inner {
                            s[sbase + i] = s[sbase + i] + g[gbase + i];
                        }
                    }
                }
            })
        }))
    }

    /// Matrix product of rank-2 tensors: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            }
            .into());
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let tape = joint_tape("matmul", &[self, rhs])?;
        let out = mm_nn(self.data(), rhs.data(), m, k, n);
        let (an, bn) = (
            self.track().map(|(_, id)| id),
            rhs.track().map(|(_, id)| id),
        );
        let (ad, bd) = (self.data_rc(), rhs.data_rc());
        Ok(op_output(tape, out, vec![m, n], move || {
            Box::new(move |g, acc| {
                if let Some(id) = an {
                    // dA = G * B^T
                    acc.add(id, &mm_nt(g, &bd, m, n, k));
                }
                if let Some(id) = bn {
                    // dB = A^T * G
                    acc.add(id, &mm_tn(&ad, g, m, k, n));
                }
            })
        }))
    }

    /// Softmax along `axis`, numerically stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfBounds {
                op: "softmax",
                axis,
                shape: self.shape().to_vec(),
            }
            .into());
        }
        let (outer, len, inner) = axis_blocks(self.shape(), axis);
        let tape = joint_tape("softmax", &[self])?;
        let xd = self.data();
        let mut out = vec![E::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = xd[at(0)];
                for j in 1..len {
                    mx = mx.max(xd[at(j)]);
                }
                let mut z = E::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let xn = self.track().map(|(_, id)| id);
        let probs = Rc::new(out.clone());
        let shape = self.shape().to_vec();
        Ok(op_output(tape, out, shape, move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut gp = E::zero();
                            for j in 0..len {
                                gp = gp + g[at(j)] * probs[at(j)];
                            }
                            for j in 0..len {
                                let a = at(j);
                                s[a] = s[a] + probs[a] * (g[a] - gp);
                            }
                        }
                    }
                }
            })
        }))
    }

    /// Row-wise softmax over only the first `prefix[r]` columns of a rank-2
    /// tensor; the remaining columns are exactly zero. With `prefix[r] = r+1`
    /// this is causal attention: masked positions never enter the forward or
    /// backward computation at all.
    pub fn prefix_softmax(&self, prefix: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "prefix_softmax",
                msg: format!("expected rank 2, got shape {:?}", self.shape()),
            }
            .into());
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if prefix.len() != rows {
            return Err(TensorError::Invalid {
                op: "prefix_softmax",
                msg: format!("{} prefix lengths for {} rows", prefix.len(), rows),
            }
            .into());
        }
        for (r, &p) in prefix.iter().enumerate() {
            if p == 0 || p > cols {
                return Err(TensorError::Invalid {
                    op: "prefix_softmax",
                    msg: format!("prefix {p} out of range 1..={cols} at row {r}"),
                }
                .into());
            }
        }
        let tape = joint_tape("prefix_softmax", &[self])?;
        let xd = self.data();
        let mut out = vec![E::zero(); xd.len()];
        let prefix_owned: Rc<Vec<usize>> = Rc::new(prefix.to_vec());
        let row = |r: usize, orow: &mut [E]| {
            let p = prefix[r];
            let xrow = &xd[r * cols..r * cols + p];
            let mut mx = xrow[0];
            for &x in &xrow[1..] {
                mx = mx.max(x);
            }
            let mut z = E::zero();
            for (o, &x) in orow[..p].iter_mut().zip(xrow) {
                let e = (x - mx).exp();
                *o = e;
                z = z + e;
            }
            for o in orow[..p].iter_mut() {
                *o = *o / z;
            }
        };
        if rows * cols >= PAR_MIN_ELEMS {
            out.par_chunks_mut(cols).enumerate().for_each(|(r, c)| row(r, c));
        } else {
            out.chunks_mut(cols).enumerate().for_each(|(r, c)| row(r, c));
        }
        let xn = self.track().map(|(_, id)| id);
        let probs = Rc::new(out.clone());
        Ok(op_output(tape, out, vec![rows, cols], move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    for r in 0..rows {
                        let p = prefix_owned[r];
                        let base = r * cols;
                        let mut gp = E::zero();
                        for j in 0..p {
                            gp = gp + g[base + j] * probs[base + j];
                        }
                        for j in 0..p {
                            let a = base + j;
                            s[a] = s[a] + probs[a] * (g[a] - gp);
                        }
                    }
                }
            })
        }))
    }

    /// Mean cross-entropy between `[t, v]` logits and integer targets,
    /// averaged over positions where `mask` is true. Masked positions
    /// contribute nothing to the loss or the gradient.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("expected rank 2 logits, got shape {:?}", self.shape()),
            }
            .into());
        }
        let (t, v) = (self.shape()[0], self.shape()[1]);
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!(
                    "{} logit rows, {} targets, {} mask entries",
                    t,
                    targets.len(),
                    mask.len()
                ),
            }
            .into());
        }
        for (r, &y) in targets.iter().enumerate() {
            if mask[r] && y >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: y,
                    size: v,
                }
                .into());
            }
        }
        let n_active = mask.iter().filter(|&&m| m).count();
        if n_active == 0 {
            return Err(TensorError::AllMasked.into());
        }
        let tape = joint_tape("cross_entropy", &[self])?;
        let xd = self.data();
        let mut probs = vec![E::zero(); t * v];
        let mut loss_sum = E::zero();
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            let xrow = &xd[r * v..(r + 1) * v];
            let mut mx = xrow[0];
            for &x in &xrow[1..] {
                mx = mx.max(x);
            }
            let mut z = E::zero();
            for &x in xrow {
                z = z + (x - mx).exp();
            }
            let lse = mx + z.ln();
            loss_sum = loss_sum + (lse - xrow[targets[r]]);
            let prow = &mut probs[r * v..(r + 1) * v];
            for (p, &x) in prow.iter_mut().zip(xrow) {
                *p = (x - lse).exp();
            }
        }
        let inv_n = E::c(1.0 / n_active as f64);
        let loss = loss_sum * inv_n;
        let xn = self.track().map(|(_, id)| id);
        let probs = Rc::new(probs);
        let targets: Rc<Vec<usize>> = Rc::new(targets.to_vec());
        let mask: Rc<Vec<bool>> = Rc::new(mask.to_vec());
        Ok(op_output(tape, vec![loss], vec![1], move || {
            Box::new(move |g, acc| {
                if let Some(id) = xn {
                    let s = acc.slot(id);
                    let c = g[0] * inv_n;
                    for r in 0..t {
                        if !mask[r] {
                            continue;
                        }
                        let base = r * v;
                        for j in 0..v {
                            let ind = if j == targets[r] { E::one() } else { E::zero() };
                            s[base + j] = s[base + j] + c * (probs[base + j] - ind);
                        }
                    }
                }
            })
        }))
    }

    /// Gather whole rows of a `[v, d]` table: result row `i` is `table[ids[i]]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("expected rank 2 table, got shape {:?}", self.shape()),
            }
            .into());
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty id list".into(),
            }
            .into());
        }
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    size: v,
                }
                .into());
            }
        }
        let tape = joint_tape("gather_rows", &[self])?;
        let xd = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&xd[id * d..(id + 1) * d]);
        }
        let xn = self.track().map(|(_, id)| id);
        let ids: Rc<Vec<usize>> = Rc::new(ids.to_vec());
        Ok(op_output(tape, out, vec![ids.len(), d], move || {
            Box::new(move |g, acc| {
                if let Some(node) = xn {
                    let s = acc.slot(node);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * d..(i + 1) * d];
                        let dst = &mut s[id * d..(id + 1) * d];
                        for (di, &gi) in dst.iter_mut().zip(src) {
                            *di = *di + gi;
                        }
                    }
                }
            })
        }))
    }
}

/// Concatenate tensors along `axis`. All other extents must agree.
pub fn concat<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| TensorError::Invalid {
        op: "concat",
        msg: "no tensors given".into(),
    })?;
    if axis >= first.rank() {
        return Err(TensorError::AxisOutOfBounds {
            op: "concat",
            axis,
            shape: first.shape().to_vec(),
        }
        .into());
    }
    let mut axis_total = 0;
    for p in parts {
        if p.rank() != first.rank()
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            }
            .into());
        }
        axis_total += p.shape()[axis];
    }
    let refs: Vec<&Tensor<E>> = parts.to_vec();
    let tape = joint_tape("concat", &refs)?;
    let (outer, _, inner) = axis_blocks(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = axis_total;
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for p in parts {
            let plen = p.shape()[axis];
            let pd = p.data();
            out.extend_from_slice(&pd[o * plen * inner..(o + 1) * plen * inner]);
        }
    }
    struct PartInfo {
        node: Option<super::NodeId>,
        axis_len: usize,
    }
    let infos: Vec<PartInfo> = parts
        .iter()
        .map(|p| PartInfo {
            node: p.track().map(|(_, id)| id),
            axis_len: p.shape()[axis],
        })
        .collect();
    Ok(op_output(tape, out, shape, move || {
        Box::new(move |g, acc| {
            for (pi, info) in infos.iter().enumerate() {
                let Some(node) = info.node else { continue };
                let offset: usize = infos[..pi].iter().map(|x| x.axis_len).sum();
                let plen = info.axis_len;
                let s = acc.slot(node);
                for o in 0..outer {
                    let gbase = (o * axis_total + offset) * inner;
                    let sbase = o * plen * inner;
                    for i in 0..plen * inner {
                        s[sbase + i] = s[sbase + i] + g[gbase + i];
                    }
                }
            }
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_2x2_known_product() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t64(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t64(&[1.0; 6], &[2, 3]);
        let b = t64(&[1.0; 8], &[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_kernels_agree_with_transposed_naive() {
        // Cross-check mm_nt and mm_tn against mm_nn on explicit transposes.
        let m = 5;
        let k = 7;
        let n = 3;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let bt: Vec<f64> = {
            let mut o = vec![0.0; n * k];
            for i in 0..k {
                for j in 0..n {
                    o[j * k + i] = b[i * n + j];
                }
            }
            o
        };
        // mm_nt(a, bt) computes a * (bt)^T = a * b.
        let want = mm_nn(&a, &b, m, k, n);
        let got_nt = mm_nt(&a, &bt, m, k, n);
        for (w, g) in want.iter().zip(&got_nt) {
            assert!((w - g).abs() < 1e-12);
        }
        // mm_tn(a, x) computes a^T * x directly from a's row-major layout.
        let x: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.13).sin()).collect();
        let want2 = {
            // a^T is [k, m]; a^T * x is [k, n] where a^T[p][i] = a[i][p].
            let mut o = vec![0.0; k * n];
            for p in 0..k {
                for i in 0..m {
                    for j in 0..n {
                        o[p * n + j] += a[i * k + p] * x[i * n + j];
                    }
                }
            }
            o
        };
        let got_tn = mm_tn(&a, &x, m, k, n);
        for (w, g) in want2.iter().zip(&got_tn) {
            assert!((w - g).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_reference_row() {
        let x = t64(&[1.0, 2.0, 3.0], &[1, 3]);
        let p = x.softmax(1).unwrap();
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in p.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "test/softmax");
        for _ in 0..50 {
            let rows = rng.random_range(1..5usize);
            let cols = rng.random_range(1..9usize);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
            let x = t64(&data, &[rows, cols]);
            let p = x.softmax(1).unwrap();
            for r in 0..rows {
                let s: f64 = p.data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            let shifted: Vec<f64> = data.iter().map(|v| v + 100.0).collect();
            let p2 = t64(&shifted, &[rows, cols]).softmax(1).unwrap();
            for (a, b) in p.data().iter().zip(p2.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_axis_zero_matches_transpose() {
        let x = t64(&[1.0, 4.0, 2.0, 5.0, 3.0, 6.0], &[3, 2]);
        let p0 = x.softmax(0).unwrap();
        let pt = x.transpose().unwrap().softmax(1).unwrap().transpose().unwrap();
        for (a, b) in p0.data().iter().zip(pt.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prefix_softmax_masks_future_exactly() {
        let x = t64(&[5.0, 100.0, -3.0, 1.0, 2.0, 300.0, 0.5, -0.5, 9.0], &[3, 3]);
        let prefix = [1, 2, 3];
        let p = x.prefix_softmax(&prefix).unwrap();
        assert_eq!(p.data()[1], 0.0);
        assert_eq!(p.data()[2], 0.0);
        assert_eq!(p.data()[5], 0.0);
        assert_eq!(p.data()[0], 1.0);
        // Row 1 must equal a plain softmax of its first two entries.
        let q = t64(&[1.0, 2.0], &[1, 2]).softmax(1).unwrap();
        assert!((p.data()[3] - q.data()[0]).abs() < 1e-15);
        assert!((p.data()[4] - q.data()[1]).abs() < 1e-15);
    }

    #[test]
    fn prefix_softmax_rejects_bad_prefix() {
        let x = t64(&[0.0; 4], &[2, 2]);
        assert!(x.prefix_softmax(&[0, 1]).is_err());
        assert!(x.prefix_softmax(&[1, 3]).is_err());
        assert!(x.prefix_softmax(&[1]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let x = t64(&[0.25; 4 * 16], &[4, 16]);
        let loss = x.cross_entropy(&[3, 7, 0, 15], &[true; 4]).unwrap();
        assert!((loss.item().unwrap() - (16.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_mask_averages_active_rows_only() {
        // Row 0: logits favour target strongly; row 1 would be huge loss but is masked.
        let x = t64(&[10.0, 0.0, 0.0, 10.0], &[2, 2]);
        let loss_masked = x.cross_entropy(&[0, 0], &[true, false]).unwrap();
        let row0 = t64(&[10.0, 0.0], &[1, 2]).cross_entropy(&[0], &[true]).unwrap();
        assert!((loss_masked.item().unwrap() - row0.item().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_all_masked_is_error() {
        let x = t64(&[0.0; 4], &[2, 2]);
        assert!(matches!(
            x.cross_entropy(&[0, 1], &[false, false]),
            Err(crate::Error::Tensor(TensorError::AllMasked))
        ));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let x = t64(&[0.0; 4], &[2, 2]);
        assert!(x.cross_entropy(&[0, 2], &[true, true]).is_err());
    }

    #[test]
    fn backward_sum_gives_ones_and_dot_gives_2x() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let s = x.sum().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let s = x.mul(&x).unwrap().sum().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn matmul_backward_matches_manual() {
        // loss = sum(A*B); dA = ones * B^T, dB = A^T * ones.
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = tape.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let loss = a.matmul(&b).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn reshape_shares_buffer_and_routes_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = x.reshape(&[4]).unwrap();
        let s = y.mul(&y).unwrap().sum().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
        // Untracked reshape shares the exact buffer.
        let u = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let v = u.reshape(&[1, 2]).unwrap();
        assert!(std::rc::Rc::ptr_eq(&u.data_rc(), &v.data_rc()));
    }

    #[test]
    fn transpose_roundtrip_and_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = y.transpose().unwrap();
        assert_eq!(z.data(), x.data());
        let w = t64(&[1.0, 10.0, 100.0, 1000.0, 10000.0, 100000.0], &[3, 2]);
        let loss = y.mul(&w).unwrap().sum().unwrap();
        loss.backward().unwrap();
        // grad of x[i][j] is w[j][i].
        assert_eq!(x.grad().unwrap(), vec![1.0, 100.0, 10000.0, 10.0, 1000.0, 100000.0]);
    }

    #[test]
    fn slice_concat_roundtrip_with_gradients() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf((1..=12).map(|v| v as f64).collect(), &[3, 4]).unwrap();
        let left = x.slice(1, 0, 2).unwrap();
        let right = x.slice(1, 2, 4).unwrap();
        assert_eq!(left.data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
        let back = concat(&[&left, &right], 1).unwrap();
        assert_eq!(back.data(), x.data());
        let loss = back.mul(&back).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let want: Vec<f64> = (1..=12).map(|v| 2.0 * v as f64).collect();
        assert_eq!(x.grad().unwrap(), want);
    }

    #[test]
    fn slice_axis0_and_bounds_errors() {
        let x = t64(&(1..=12).map(|v| v as f64).collect::<Vec<_>>(), &[3, 4]);
        let row = x.slice(0, 1, 2).unwrap();
        assert_eq!(row.shape(), &[1, 4]);
        assert_eq!(row.data(), &[5.0, 6.0, 7.0, 8.0]);
        assert!(x.slice(0, 2, 2).is_err());
        assert!(x.slice(1, 0, 5).is_err());
        assert!(x.slice(2, 0, 1).is_err());
    }

    #[test]
    fn concat_axis0_stacks_rows() {
        let a = t64(&[1.0, 2.0], &[1, 2]);
        let b = t64(&[3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = t64(&[0.0; 3], &[1, 3]);
        assert!(concat(&[&a, &bad], 0).is_err());
    }

    #[test]
    fn gather_rows_returns_table_rows() {
        let tape: Tape<f64> = Tape::new();
        let table = tape
            .leaf(vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0], &[3, 2])
            .unwrap();
        let e = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(e.shape(), &[3, 2]);
        assert_eq!(e.data(), &[2.0, 2.0, 0.0, 0.0, 2.0, 2.0]);
        let s = e.sum().unwrap();
        s.backward().unwrap();
        // Row 2 was used twice, row 0 once, row 1 never.
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(table.gather_rows(&[3]).is_err());
    }

    #[test]
    fn silu_and_softplus_reference_values() {
        let x = t64(&[0.0, 1.0, -1.0, 30.0, -30.0], &[5]);
        let s = x.silu().unwrap();
        assert!((s.data()[0]).abs() < 1e-15);
        assert!((s.data()[1] - 0.7310585786300049).abs() < 1e-12);
        assert!((s.data()[2] + 0.2689414213699951).abs() < 1e-12);
        assert!((s.data()[3] - 30.0).abs() < 1e-10);
        assert!(s.data()[4].abs() < 1e-10);
        let sp = x.softplus().unwrap();
        assert!((sp.data()[0] - (2.0f64).ln()).abs() < 1e-15);
        assert!((sp.data()[3] - 30.0).abs() < 1e-10);
        assert!(sp.data()[4] >= 0.0 && sp.data()[4] < 1e-10);
    }

    #[test]
    fn mean_variance_match_closed_form() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[4]);
        assert!((x.mean().unwrap().item().unwrap() - 2.5).abs() < 1e-15);
        assert!((x.variance().unwrap().item().unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn scale_and_arithmetic_compose() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = tape.leaf(vec![10.0, 20.0], &[2]).unwrap();
        // loss = sum((3x - y) * y)
        let loss = x.scale(3.0).unwrap().sub(&y).unwrap().mul(&y).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![30.0, 60.0]);
        // d/dy [(3x - y) y] = 3x - 2y
        assert_eq!(y.grad().unwrap(), vec![-17.0, -34.0]);
    }

    #[test]
    fn parallel_matmul_matches_sequential_exactly() {
        // Large enough to cross the parallel threshold; compare against a
        // sequential re-computation with identical inner loop order.
        let m = 64;
        let k = 48;
        let n = 32;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 2654435761usize) as f32 * 1e-9).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 40503usize) as f32 * 1e-7).cos()).collect();
        assert!(m * k * n >= PAR_MIN_FLOPS);
        let par = mm_nn(&a, &b, m, k, n);
        let mut seq = vec![0.0f32; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    seq[i * n + j] += av * b[p * n + j];
                }
            }
        }
        assert_eq!(par, seq, "parallel kernel must be bitwise deterministic");
    }
}
