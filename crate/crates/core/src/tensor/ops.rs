//! Forward kernels and their backward rules.
//!
//! Broadcasting is limited to a right-hand operand whose shape equals a
//! suffix of the left-hand shape (bias rows, per-feature scales, a shared
//! matrix under a leading batch). Anything else needs an explicit reshape.

use super::graph::{GradContrib, Graph, Var};
use super::{numel, shape_err, ParamId, Tensor, TensorError};
use crate::scalar::Scalar;

/// Layer normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Gelu,
    Relu,
    Silu,
    Sigmoid,
    Tanh,
    Ln,
    Square,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    TransposeLast2(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Mse(Var, Var),
    Unary(Unary, Var),
    ConcatRows(Vec<Var>),
    ConcatLast(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(shape_err(op, &[a, b]));
    }
    Ok(())
}

fn suffix_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b || b.is_empty() {
        return Err(shape_err(op, &[a, b]));
    }
    Ok(())
}

fn last(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn unary_fwd<T: Scalar>(kind: Unary, x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    match kind {
        Unary::Gelu => {
            let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
            let k = T::from_f64_lossy(0.044715);
            half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        }
        Unary::Relu => x.max(T::zero()),
        Unary::Silu => x / (T::one() + (-x).exp()),
        Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
        Unary::Tanh => x.tanh(),
        Unary::Ln => x.ln(),
        Unary::Square => x * x,
    }
}

fn unary_grad<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    let half = T::from_f64_lossy(0.5);
    match kind {
        Unary::Gelu => {
            let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
            let k = T::from_f64_lossy(0.044715);
            let three = T::from_f64_lossy(3.0);
            let th = (c * (x + k * x * x * x)).tanh();
            half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
        }
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Tanh => T::one() - y * y,
        Unary::Ln => T::one() / x,
        Unary::Square => (T::one() + T::one()) * x,
    }
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let outer = data.len() / inner;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[offset..offset + inner]);
        } else {
            for j in 0..inner {
                out.push(data[offset + j * inner_stride]);
            }
        }
        // advance the multi-index over all but the innermost axis
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Graph<T> {
    fn binary_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        suffix_shape("add_bcast", va.shape(), vb.shape())?;
        let nb = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + vb.data()[i % nb])
            .collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::AddBcast(a, b), rg))
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        suffix_shape("mul_bcast", va.shape(), vb.shape())?;
        let nb = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x * vb.data()[i % nb])
            .collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::MulBcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| *x * s).collect(),
        };
        let rg = self.needs_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Matrix product over the last two axes. `b` is either a single
    /// `k×n` matrix shared across `a`'s leading axes, or has exactly `a`'s
    /// leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if k != k2 || (!shared_rhs && lead_a != lead_b) {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let batch = numel(lead_a);
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            T::gemm(
                batch * m,
                k,
                n,
                T::one(),
                va.data(),
                (k as isize, 1),
                vb.data(),
                (n as isize, 1),
                T::zero(),
                &mut out,
                (n as isize, 1),
            );
        } else {
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let value = Tensor {
            shape: out_shape,
            data: out,
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let r = va.rank();
        if r < 2 {
            return Err(shape_err("transpose", &[va.shape()]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let (shape, data) = permute_data(va.data(), va.shape(), &perm);
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::TransposeLast2(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let shape = shape.into();
        let va = self.value(a);
        if numel(&shape) != va.numel() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err("reshape", &[va.shape(), &shape]));
        }
        let value = Tensor {
            shape,
            data: va.data().to_vec(),
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let va = self.value(a);
        let r = va.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Contract {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {r} (shape {:?})", va.shape()),
            });
        }
        let (shape, data) = permute_data(va.data(), va.shape(), perm);
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = last(va.shape());
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: out,
        };
        let rg = self.needs_grad(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = last(vx.shape());
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let mut out = vx.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data: out,
        };
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::LayerNorm { x, rstd }, rg)
    }

    /// `x·W + b` over the last axis of `x`; `W` is `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sw.len() != 2 || sx.is_empty() || last(sx) != sw[0] {
            return Err(shape_err("linear", &[sx, sw]));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            let sb = self.value(b).shape();
            if sb != [dout] {
                return Err(shape_err("linear", &[sx, sw, sb]));
            }
        }
        let rows = vx.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let vb = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(vb);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            vx.data(),
            (din as isize, 1),
            vw.data(),
            (dout as isize, 1),
            T::one(),
            &mut out,
            (dout as isize, 1),
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.needs_grad(&parents);
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }, rg))
    }

    /// Rows of a `V×d` table selected by `indices`, giving `len×d`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let vt = self.value(table);
        let st = vt.shape();
        if st.len() != 2 || indices.is_empty() {
            return Err(shape_err("embedding", &[st, &[indices.len()]]));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Contract {
                op: "embedding",
                msg: format!("index {bad} outside vocabulary of {vocab}"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor {
            shape: vec![indices.len(), d],
            data,
        };
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().copied().sum::<T>() / T::from_usize(va.numel()).unwrap();
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over the leading axis: `[r, rest..] -> [1, rest..]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let rows = va.shape()[0];
        let width = va.numel() / rows;
        let mut out = vec![T::zero(); width];
        for row in va.data().chunks(width) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += *v);
        }
        let inv = T::one() / T::from_usize(rows).unwrap();
        out.iter_mut().for_each(|o| *o *= inv);
        let mut shape = va.shape().to_vec();
        shape[0] = 1;
        let rg = self.needs_grad(&[a]);
        self.push(Tensor { shape, data: out }, Op::MeanRows(a), rg)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mse", va.shape(), vb.shape())?;
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum::<T>()
            / T::from_usize(va.numel()).unwrap();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| unary_fwd(kind, *x)).collect(),
        };
        let rg = self.needs_grad(&[a]);
        self.push(value, Op::Unary(kind, a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Contract {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.value(*p).shape()).collect();
                return Err(shape_err("concat_rows", &shapes));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.needs_grad(parts);
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Contract {
            op: "concat_last",
            msg: "no inputs".into(),
        })?;
        let s0 = self.value(*first).shape().to_vec();
        let lead = &s0[..s0.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != s0.len() || s[..s.len() - 1] != *lead {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.value(*p).shape()).collect();
                return Err(shape_err("concat_last", &shapes));
            }
            widths.push(last(s));
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.needs_grad(parts);
        Ok(self.push(Tensor { shape, data }, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return Err(shape_err("slice_rows", &[s, &[start, len]]));
        }
        let w = vx.numel() / s[0];
        let data = vx.data()[start * w..(start + len) * w].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let s = vx.shape();
        let d = last(s);
        if s.is_empty() || len == 0 || start + len > d {
            return Err(shape_err("slice_last", &[s, &[start, len]]));
        }
        let mut data = Vec::with_capacity(vx.numel() / d * len);
        for row in vx.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceLast { x, start }, rg))
    }
}

/// Emits the gradient contributions of one node to its parents.
pub(crate) fn backward_op<T: Scalar>(
    g: &Graph<T>,
    op: &Op<T>,
    out: &Tensor<T>,
    grad: &[T],
    emit: &mut dyn FnMut(Var, GradContrib<'_, T>),
) {
    let val = |v: Var| &g.nodes[v.0].value;
    let rg = |v: Var| g.nodes[v.0].requires_grad;
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            emit(*a, GradContrib::Add(grad));
            emit(*b, GradContrib::Add(grad));
        }
        Op::Sub(a, b) => {
            emit(*a, GradContrib::Add(grad));
            if rg(*b) {
                emit(*b, GradContrib::Owned(grad.iter().map(|v| -*v).collect()));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let vb = val(*b).data();
                emit(*a, GradContrib::Owned(grad.iter().zip(vb).map(|(g, y)| *g * *y).collect()));
            }
            if rg(*b) {
                let va = val(*a).data();
                emit(*b, GradContrib::Owned(grad.iter().zip(va).map(|(g, x)| *g * *x).collect()));
            }
        }
        Op::AddBcast(a, b) => {
            emit(*a, GradContrib::Add(grad));
            if rg(*b) {
                let nb = val(*b).numel();
                let mut gb = vec![T::zero(); nb];
                for row in grad.chunks(nb) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += *v);
                }
                emit(*b, GradContrib::Owned(gb));
            }
        }
        Op::MulBcast(a, b) => {
            let vb = val(*b).data();
            let nb = vb.len();
            if rg(*a) {
                let ga = grad
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| *gv * vb[i % nb])
                    .collect();
                emit(*a, GradContrib::Owned(ga));
            }
            if rg(*b) {
                let va = val(*a).data();
                let mut gb = vec![T::zero(); nb];
                for (grow, arow) in grad.chunks(nb).zip(va.chunks(nb)) {
                    for j in 0..nb {
                        gb[j] += grow[j] * arow[j];
                    }
                }
                emit(*b, GradContrib::Owned(gb));
            }
        }
        Op::Scale(a, s) => emit(*a, GradContrib::Owned(grad.iter().map(|v| *v * *s).collect())),
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (va, vb) = (val(*a).data(), val(*b).data());
            if rg(*a) {
                // dA = dC · Bᵀ
                let mut ga = vec![T::zero(); batch * m * k];
                if *shared_rhs {
                    T::gemm(batch * m, n, k, T::one(), grad, (n as isize, 1), vb, (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
                } else {
                    for bi in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &grad[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &vb[bi * k * n..(bi + 1) * k * n],
                            (1, n as isize),
                            T::zero(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                }
                emit(*a, GradContrib::Owned(ga));
            }
            if rg(*b) {
                // dB = Aᵀ · dC
                if *shared_rhs {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, batch * m, n, T::one(), va, (1, k as isize), grad, (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
                    emit(*b, GradContrib::Owned(gb));
                } else {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &va[bi * m * k..(bi + 1) * m * k],
                            (1, k as isize),
                            &grad[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            T::zero(),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            (n as isize, 1),
                        );
                    }
                    emit(*b, GradContrib::Owned(gb));
                }
            }
        }
        Op::TransposeLast2(a) => {
            let r = out.rank();
            let mut perm: Vec<usize> = (0..r).collect();
            perm.swap(r - 2, r - 1);
            let (_, ga) = permute_data(grad, out.shape(), &perm);
            emit(*a, GradContrib::Owned(ga));
        }
        Op::Reshape(a) => emit(*a, GradContrib::Add(grad)),
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, ga) = permute_data(grad, out.shape(), &inv);
            emit(*a, GradContrib::Owned(ga));
        }
        Op::Softmax(a) => {
            let d = last(out.shape());
            let y = out.data();
            let mut ga = vec![T::zero(); y.len()];
            for ((gr, yr), orow) in grad.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                let dot: T = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                for j in 0..d {
                    orow[j] = yr[j] * (gr[j] - dot);
                }
            }
            emit(*a, GradContrib::Owned(ga));
        }
        Op::LayerNorm { x, rstd } => {
            let d = last(out.shape());
            let dn = T::from_usize(d).unwrap();
            let y = out.data();
            let mut gx = vec![T::zero(); y.len()];
            for (r, ((gr, yr), orow)) in grad.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                let mg = gr.iter().copied().sum::<T>() / dn;
                let mgy = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum::<T>() / dn;
                for j in 0..d {
                    orow[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            emit(*x, GradContrib::Owned(gx));
        }
        Op::Linear { x, w, b } => {
            let vw = val(*w);
            let (din, dout) = (vw.shape()[0], vw.shape()[1]);
            let rows = grad.len() / dout;
            if rg(*x) {
                let mut gx = vec![T::zero(); rows * din];
                T::gemm(rows, dout, din, T::one(), grad, (dout as isize, 1), vw.data(), (1, dout as isize), T::zero(), &mut gx, (din as isize, 1));
                emit(*x, GradContrib::Owned(gx));
            }
            if rg(*w) {
                let vx = val(*x).data();
                let mut gw = vec![T::zero(); din * dout];
                T::gemm(din, rows, dout, T::one(), vx, (1, din as isize), grad, (dout as isize, 1), T::zero(), &mut gw, (dout as isize, 1));
                emit(*w, GradContrib::Owned(gw));
            }
            if let Some(b) = b {
                if rg(*b) {
                    let mut gb = vec![T::zero(); dout];
                    for row in grad.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += *v);
                    }
                    emit(*b, GradContrib::Owned(gb));
                }
            }
        }
        Op::Embedding { table, indices } => {
            let st = val(*table).shape();
            let d = st[1];
            let mut gt = vec![T::zero(); st[0] * d];
            for (row, &i) in grad.chunks(d).zip(indices) {
                gt[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(o, v)| *o += *v);
            }
            emit(*table, GradContrib::Owned(gt));
        }
        Op::Sum(a) => emit(*a, GradContrib::Owned(vec![grad[0]; val(*a).numel()])),
        Op::Mean(a) => {
            let n = val(*a).numel();
            emit(*a, GradContrib::Owned(vec![grad[0] / T::from_usize(n).unwrap(); n]))
        }
        Op::MeanRows(a) => {
            let va = val(*a);
            let rows = va.shape()[0];
            let inv = T::one() / T::from_usize(rows).unwrap();
            let mut ga = Vec::with_capacity(va.numel());
            for _ in 0..rows {
                ga.extend(grad.iter().map(|v| *v * inv));
            }
            emit(*a, GradContrib::Owned(ga));
        }
        Op::Mse(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let c = (T::one() + T::one()) * grad[0] / T::from_usize(va.len()).unwrap();
            let d: Vec<T> = va.iter().zip(vb).map(|(x, y)| c * (*x - *y)).collect();
            if rg(*b) {
                emit(*b, GradContrib::Owned(d.iter().map(|v| -*v).collect()));
            }
            emit(*a, GradContrib::Owned(d));
        }
        Op::Unary(kind, a) => {
            let vx = val(*a).data();
            let ga = grad
                .iter()
                .zip(vx)
                .zip(out.data())
                .map(|((g, x), y)| *g * unary_grad(*kind, *x, *y))
                .collect();
            emit(*a, GradContrib::Owned(ga));
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).numel();
                emit(*p, GradContrib::Add(&grad[off..off + n]));
                off += n;
            }
        }
        Op::ConcatLast(parts) => {
            let total = last(out.shape());
            let rows = out.numel() / total;
            let mut col = 0;
            for p in parts {
                let w = last(val(*p).shape());
                if rg(*p) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&grad[r * total + col..r * total + col + w]);
                    }
                    emit(*p, GradContrib::Owned(gp));
                }
                col += w;
            }
        }
        Op::SliceRows { x, start } => {
            let vx = val(*x);
            let w = vx.numel() / vx.shape()[0];
            let mut gx = vec![T::zero(); vx.numel()];
            gx[start * w..start * w + grad.len()].copy_from_slice(grad);
            emit(*x, GradContrib::Owned(gx));
        }
        Op::SliceLast { x, start } => {
            let vx = val(*x);
            let d = last(vx.shape());
            let len = last(out.shape());
            let mut gx = vec![T::zero(); vx.numel()];
            for (grow, xrow) in grad.chunks(len).zip(gx.chunks_mut(d)) {
                xrow[*start..start + len].copy_from_slice(grow);
            }
            emit(*x, GradContrib::Owned(gx));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_returns_rhs() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![2, 7], 3.25f32));
        let y = g.layer_norm(x);
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        // loss = sum(x·W): dW[i][j] = x[i]
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, -2.0, 0.5]));
        let w = g.input(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), true);
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(w).unwrap(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        assert!(matches!(g.add(a, b), Err(TensorError::Shape { op: "add", .. })));
        // no implicit broadcasting beyond a suffix operand
        let c = g.constant(Tensor::zeros(vec![2]));
        assert!(g.add_bcast(a, c).is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(vec![2]), true);
        assert!(matches!(g.backward(a), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element (i,j,k) of x lands at (k,i,j)
        assert_eq!(g.value(p).data()[3 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 3) as f64);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]), false);
        let b = g.input(t(&[2], &[3.0, 4.0]), true);
        let y = g.mul(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.of(a).is_none());
        assert_eq!(grads.of(b).unwrap(), &[1.0, 2.0]);
    }
}
