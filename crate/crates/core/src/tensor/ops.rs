use super::{numel, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f32),
    AddScalar,
    MatMul(MatMulDims),
    Softmax { axis: usize },
    LayerNorm { rstd: Vec<f32> },
    Silu,
    Gelu,
    Sqrt,
    Sum,
    SumAxis { axis: usize },
    Reshape,
    Permute(Vec<usize>),
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    IndexSelect { axis: usize, indices: Vec<usize> },
}

pub(crate) struct MatMulDims {
    batch: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for (i, slot) in out.iter_mut().enumerate() {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        *slot = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` viewed in the index space of `out`; broadcast dims get stride 0.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || (src[i - off] == 1 && out[i] != 1) {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

/// (outer, extent, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// da[m,k] += g[m,n] @ b[k,n]^T
fn gemm_nt_acc(g: &[f32], b: &[f32], da: &mut [f32], m: usize, k: usize, n: usize) {
    // transposing b first keeps the inner loop a vectorizable axpy
    let mut bt = vec![0.0f32; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    gemm_acc(g, &bt, da, m, n, k);
}

// db[k,n] += a[m,k]^T @ g[m,n]
fn gemm_tn_acc(a: &[f32], g: &[f32], db: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a == b {
            let data = self.data().iter().zip(rhs.data()).map(|(x, y)| f(*x, *y)).collect();
            return Ok(Tensor::from_op(data, a.to_vec(), op, vec![self.clone(), rhs.clone()]));
        }
        let out = broadcast_shape(a, b).ok_or_else(|| Error::shape(name, a, b))?;
        let (sa, sb) = (broadcast_strides(a, &out), broadcast_strides(b, &out));
        let mut data = vec![0.0; numel(&out)];
        let (xa, xb) = (self.data(), rhs.data());
        for_each_bcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(xa[ia], xb[ib]));
        Ok(Tensor::from_op(data, out, op, vec![self.clone(), rhs.clone()]))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Div, "div", |x, y| x / y)
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|x| -x).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, s: f32) -> Tensor {
        let data = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(s), vec![self.clone()])
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        let data = self.data().iter().map(|x| x + s).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar, vec![self.clone()])
    }

    /// `[.., M, K] @ [.., K, N] -> [.., M, N]`; leading dims broadcast.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k, n) = (a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]);
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
        let a_strides: Vec<usize> = broadcast_strides(ba, &batch).iter().map(|s| s * m * k).collect();
        let b_strides: Vec<usize> = broadcast_strides(bb, &batch).iter().map(|s| s * k * n).collect();

        let mut data = vec![0.0; numel(&batch) * m * n];
        let (xa, xb) = (self.data(), rhs.data());
        for_each_bcast(&batch, &a_strides, &b_strides, |o, oa, ob| {
            gemm_acc(
                &xa[oa..oa + m * k],
                &xb[ob..ob + k * n],
                &mut data[o * m * n..(o + 1) * m * n],
                m,
                k,
                n,
            );
        });
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let dims = MatMulDims { batch, a_strides, b_strides, m, k, n };
        Ok(Tensor::from_op(data, shape, Op::MatMul(dims), vec![self.clone(), rhs.clone()]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", axis, self.rank())?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e as f64;
                }
                let inv = (1.0 / sum) as f32;
                for j in 0..n {
                    y[at(j)] *= inv;
                }
            }
        }
        Ok(Tensor::from_op(y, self.shape().to_vec(), Op::Softmax { axis }, vec![self.clone()]))
    }

    /// Parameter-free normalization over the last axis.
    pub fn layer_norm(&self, eps: f32) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(Error::Empty("layer_norm on a scalar"))?;
        let x = self.data();
        let rows = x.len() / d.max(1);
        let mut y = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            for (o, v) in y[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = ((*v as f64 - mean) * rs) as f32;
            }
            rstd.push(rs as f32);
        }
        Ok(Tensor::from_op(y, self.shape().to_vec(), Op::LayerNorm { rstd }, vec![self.clone()]))
    }

    pub fn silu(&self) -> Tensor {
        let data = self.data().iter().map(|x| x * sigmoid(*x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Silu, vec![self.clone()])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|x| gelu_parts(*x).0).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gelu, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.sqrt()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Sqrt, vec![self.clone()])
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().map(|v| *v as f64).sum::<f64>() as f32;
        Tensor::from_op(vec![s], vec![], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f32;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("sum_axis", axis, self.rank())?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| x[(o * n + j) * inner + i] as f64).sum();
                y[o * inner + i] = s as f32;
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(y, shape, Op::SumAxis { axis }, vec![self.clone()]))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f32))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("permute: {perm:?} is not a permutation of rank {r}")));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for_each_bcast(&out_shape, &src_strides, &src_strides, |o, i, _| y[o] = x[i]);
        Ok(Tensor::from_op(y, out_shape, Op::Permute(perm.to_vec()), vec![self.clone()]))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        check_axis("transpose", a.max(b), self.rank())?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat of zero tensors"))?;
        check_axis("concat", axis, first.rank())?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            shape[axis] += p.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut y = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                y.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(y, shape, Op::Concat { axis }, parts.to_vec()))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", axis, self.rank())?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if start + len > n {
            return Err(Error::InvalidArgument(format!(
                "narrow: range {start}..{} exceeds extent {n}",
                start + len
            )));
        }
        let x = self.data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            y.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(y, shape, Op::Narrow { axis, start }, vec![self.clone()]))
    }

    /// Gathers slices along `axis`: `out[.., j, ..] = self[.., indices[j], ..]`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        check_axis("index_select", axis, self.rank())?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("index_select: index {bad} >= extent {n}")));
        }
        let x = self.data();
        let mut y = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                let base = (o * n + j) * inner;
                y.extend_from_slice(&x[base..base + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        Ok(Tensor::from_op(
            y,
            shape,
            Op::IndexSelect { axis, indices: indices.to_vec() },
            vec![self.clone()],
        ))
    }

    /// Nearest-neighbour resampling along `axis`: output `i` reads input `floor(i * L_in / L_out)`.
    pub fn interp_nearest(&self, target_len: usize, axis: usize) -> Result<Tensor> {
        check_axis("interp_nearest", axis, self.rank())?;
        if target_len == 0 {
            return Err(Error::InvalidArgument("interp_nearest: target length 0".into()));
        }
        let idx = nearest_indices(self.shape()[axis], target_len);
        self.index_select(axis, &idx)
    }
}

/// Source index for each of `dst_len` outputs under nearest-neighbour resampling.
pub fn nearest_indices(src_len: usize, dst_len: usize) -> Vec<usize> {
    (0..dst_len).map(|i| i * src_len / dst_len).collect()
}

/// Sums `g` (laid out in `out` shape) down to `src` shape.
fn reduce_to(g: &[f32], out: &[usize], src: &[usize]) -> Vec<f32> {
    if out == src {
        return g.to_vec();
    }
    let ss = broadcast_strides(src, out);
    let mut acc = vec![0.0; numel(src)];
    for_each_bcast(out, &ss, &ss, |o, i, _| acc[i] += g[o]);
    acc
}

impl Op {
    pub(crate) fn backward(&self, parents: &[Tensor], out: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let out_shape = out.shape();
        match self {
            Op::Add | Op::Sub => {
                let (a, b) = (&parents[0], &parents[1]);
                let ga = a.requires_grad().then(|| reduce_to(g, out_shape, a.shape()));
                let gb = b.requires_grad().then(|| {
                    let mut r = reduce_to(g, out_shape, b.shape());
                    if matches!(self, Op::Sub) {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                vec![ga, gb]
            }
            Op::Mul | Op::Div => {
                let (a, b) = (&parents[0], &parents[1]);
                let (xa, xb) = (a.data(), b.data());
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                let sa = broadcast_strides(a.shape(), out_shape);
                let sb = broadcast_strides(b.shape(), out_shape);
                let div = matches!(self, Op::Div);
                for_each_bcast(out_shape, &sa, &sb, |o, ia, ib| {
                    if div {
                        ga[ia] += g[o] / xb[ib];
                        gb[ib] -= g[o] * xa[ia] / (xb[ib] * xb[ib]);
                    } else {
                        ga[ia] += g[o] * xb[ib];
                        gb[ib] += g[o] * xa[ia];
                    }
                });
                vec![a.requires_grad().then_some(ga), b.requires_grad().then_some(gb)]
            }
            Op::Neg => vec![Some(g.iter().map(|v| -v).collect())],
            Op::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
            Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
            Op::MatMul(d) => {
                let (a, b) = (&parents[0], &parents[1]);
                let (xa, xb) = (a.data(), b.data());
                let (m, k, n) = (d.m, d.k, d.n);
                let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
                let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
                for_each_bcast(&d.batch, &d.a_strides, &d.b_strides, |o, oa, ob| {
                    let go = &g[o * m * n..(o + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        gemm_nt_acc(go, &xb[ob..ob + k * n], &mut ga[oa..oa + m * k], m, k, n);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm_tn_acc(&xa[oa..oa + m * k], go, &mut gb[ob..ob + k * n], m, k, n);
                    }
                });
                vec![ga, gb]
            }
            Op::Softmax { axis } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| (y[at(j)] * g[at(j)]) as f64).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot as f32);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::LayerNorm { rstd } => {
                let d = *out_shape.last().unwrap();
                let xhat = out.data();
                let mut gx = vec![0.0; xhat.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                    let mg = gr.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() / d as f64;
                    for ((o, gv), xv) in gx[span].iter_mut().zip(gr).zip(xr) {
                        *o = (*rs as f64 * (*gv as f64 - mg - *xv as f64 * mgx)) as f32;
                    }
                }
                vec![Some(gx)]
            }
            Op::Silu => {
                let x = parents[0].data();
                let gx = x
                    .iter()
                    .zip(g)
                    .map(|(x, g)| {
                        let s = sigmoid(*x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![Some(gx)]
            }
            Op::Gelu => {
                let x = parents[0].data();
                vec![Some(x.iter().zip(g).map(|(x, g)| g * gelu_parts(*x).1).collect())]
            }
            Op::Sqrt => {
                let y = out.data();
                vec![Some(y.iter().zip(g).map(|(y, g)| g * 0.5 / y).collect())]
            }
            Op::Sum => vec![Some(vec![g[0]; parents[0].numel()])],
            Op::SumAxis { axis } => {
                let src = parents[0].shape();
                let (outer, n, inner) = split_axis(src, *axis);
                let mut gx = vec![0.0; numel(src)];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Permute(perm) => {
                let src = parents[0].shape();
                let in_strides = strides(src);
                let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut gx = vec![0.0; g.len()];
                for_each_bcast(out_shape, &src_strides, &src_strides, |o, i, _| gx[i] = g[o]);
                vec![Some(gx)]
            }
            Op::Concat { axis } => {
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let mut grads: Vec<Vec<f32>> = parents.iter().map(|p| Vec::with_capacity(p.numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (p, acc) in parents.iter().zip(grads.iter_mut()) {
                        let chunk = p.shape()[*axis] * inner;
                        acc.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                parents
                    .iter()
                    .zip(grads)
                    .map(|(p, gr)| p.requires_grad().then_some(gr))
                    .collect()
            }
            Op::Narrow { axis, start } => {
                let src = parents[0].shape();
                let (outer, n, inner) = split_axis(src, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![0.0; numel(src)];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }
            Op::IndexSelect { axis, indices } => {
                let src = parents[0].shape();
                let (outer, n, inner) = split_axis(src, *axis);
                let mut gx = vec![0.0; numel(src)];
                let m = indices.len();
                for o in 0..outer {
                    for (jj, &j) in indices.iter().enumerate() {
                        let from = (o * m + jj) * inner;
                        let to = (o * n + j) * inner;
                        for i in 0..inner {
                            gx[to + i] += g[from + i];
                        }
                    }
                }
                vec![Some(gx)]
            }
        }
    }
}
