//! Forward and backward kernels. Shapes are validated by the graph builder,
//! so kernels assume compatible inputs.

use super::{strides, Tensor};

pub(crate) const LAYERNORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Numpy-style broadcast of two shapes, right-aligned.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Calls `f(out_flat, in_flat)` for every element of `out_shape`, where
/// `in_flat` is the offset of the (broadcast) source element in a tensor of
/// shape `in_shape`.
fn for_each_broadcast(out_shape: &[usize], in_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[pad + i] = in_strides[i];
        }
    }
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..total {
        f(flat, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let src = t.data();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(shape, t.shape(), |o, i| out[o] = src[i]);
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

/// Sums `grad` down to `shape`, the adjoint of [`broadcast_to`].
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let src = grad.data();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(grad.shape(), shape, |o, i| out[i] += src[o]);
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

pub(crate) fn zip_broadcast(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor {
            shape: out_shape.to_vec(),
            data,
        };
    }
    let a = broadcast_to(a, out_shape);
    let b = broadcast_to(b, out_shape);
    zip_broadcast(&a, &b, out_shape, f)
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Matmul dimensions: `batch` independent `m×k · k×n` products. When
/// `shared_rhs` the right operand is a single matrix reused for every row.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, d: MatMulDims, out_shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; d.batch * d.m * d.n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..d.batch {
        let a_s = &ad[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let b_s = if d.shared_rhs {
            bd
        } else {
            &bd[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        };
        gemm_nn(a_s, b_s, &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n], d.m, d.k, d.n);
    }
    Tensor {
        shape: out_shape.to_vec(),
        data: out,
    }
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, d: MatMulDims) -> (Tensor, Tensor) {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for bi in 0..d.batch {
        let a_s = &ad[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let g_s = &gd[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        let (b_s, gb_s) = if d.shared_rhs {
            (bd, &mut gb[..])
        } else {
            let r = bi * d.k * d.n..(bi + 1) * d.k * d.n;
            (&bd[r.clone()], &mut gb[r])
        };
        gemm_nt(g_s, b_s, &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k], d.m, d.k, d.n);
        gemm_tn(a_s, g_s, gb_s, d.m, d.k, d.n);
    }
    (
        Tensor {
            shape: a.shape().to_vec(),
            data: ga,
        },
        Tensor {
            shape: b.shape().to_vec(),
            data: gb,
        },
    )
}

pub(crate) fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    // Source stride for each output axis.
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = t.len();
    let mut out = vec![0.0; total];
    if total > 0 {
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        let src = t.data();
        for o in out.iter_mut() {
            *o = src[off];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor {
        shape: out_shape,
        data: out,
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize, out_shape: &[usize]) -> Tensor {
    let (outer, _, inner) = split_axis(out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data: out,
    }
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = end - start;
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
    }
    Tensor { shape, data: out }
}

/// Adjoint of [`slice`]: scatter `g` into a zero tensor of `shape`.
pub(crate) fn unslice(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let width = g.shape()[axis] * inner;
    let mut out = vec![0.0; shape.iter().product()];
    for o in 0..outer {
        let dst = o * len * inner + start * inner;
        out[dst..dst + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

pub(crate) fn sum_axis(t: &Tensor, axis: usize, out_shape: &[usize]) -> Tensor {
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let src = t.data();
    for o in 0..outer {
        for a in 0..len {
            let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *dst += v;
            }
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data: out,
    }
}

pub(crate) fn unsum_axis(g: &Tensor, in_shape: &[usize], axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(in_shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let row = &g.data()[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend_from_slice(row);
        }
    }
    Tensor {
        shape: in_shape.to_vec(),
        data: out,
    }
}

/// Softmax over the last axis.
pub(crate) fn softmax(t: &Tensor) -> Tensor {
    let n = *t.shape().last().unwrap_or(&1);
    let mut out = t.data().to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    Tensor {
        shape: t.shape().to_vec(),
        data: out,
    }
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; y.len()];
    if n > 0 {
        for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                *o = yv * (gv - dot);
            }
        }
    }
    Tensor {
        shape: y.shape().to_vec(),
        data: out,
    }
}

/// Layer normalization over the last axis with population variance.
pub(crate) fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; x.len()];
    if d > 0 {
        for (o, row) in out.chunks_mut(d).zip(x.data().chunks(d)) {
            let (mean, inv_std) = moments(row);
            for (j, (o, &v)) in o.iter_mut().zip(row).enumerate() {
                *o = (v - mean) * inv_std * gain.data()[j] + bias.data()[j];
            }
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
}

pub(crate) fn layernorm_backward(x: &Tensor, gain: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = *x.shape().last().unwrap_or(&1);
    let mut gx = vec![0.0; x.len()];
    let mut ggain = vec![0.0; d];
    let mut gbias = vec![0.0; d];
    if d > 0 {
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for ((gxr, row), grow) in gx.chunks_mut(d).zip(x.data().chunks(d)).zip(g.data().chunks(d)) {
            let (mean, inv_std) = moments(row);
            for j in 0..d {
                xhat[j] = (row[j] - mean) * inv_std;
                dxhat[j] = grow[j] * gain.data()[j];
                ggain[j] += grow[j] * xhat[j];
                gbias[j] += grow[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                gxr[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: gx,
        },
        Tensor {
            shape: gain.shape().to_vec(),
            data: ggain,
        },
        Tensor {
            shape: gain.shape().to_vec(),
            data: gbias,
        },
    )
}

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax-weighted pooling of `values` rows within groups, per channel.
///
/// `out[s, c] = Σ_{i ∈ group s} softmax_i(logits[·, c]) · values[i, c]`;
/// empty groups produce zeros.
pub(crate) fn segment_pool(logits: &Tensor, values: &Tensor, groups: &[Vec<usize>]) -> (Tensor, Tensor) {
    let c = logits.shape()[1];
    let mut weights = vec![0.0; logits.len()];
    let mut out = vec![0.0; groups.len() * c];
    let (ld, vd) = (logits.data(), values.data());
    for (s, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        for ch in 0..c {
            let max = rows.iter().map(|&i| ld[i * c + ch]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in rows {
                let e = (ld[i * c + ch] - max).exp();
                weights[i * c + ch] = e;
                sum += e;
            }
            let mut acc = 0.0;
            for &i in rows {
                let w = weights[i * c + ch] / sum;
                weights[i * c + ch] = w;
                acc += w * vd[i * c + ch];
            }
            out[s * c + ch] = acc;
        }
    }
    (
        Tensor {
            shape: vec![groups.len(), c],
            data: out,
        },
        Tensor {
            shape: logits.shape().to_vec(),
            data: weights,
        },
    )
}

pub(crate) fn segment_pool_backward(
    weights: &Tensor,
    values: &Tensor,
    out: &Tensor,
    g: &Tensor,
    groups: &[Vec<usize>],
) -> (Tensor, Tensor) {
    let c = values.shape()[1];
    let mut gl = vec![0.0; values.len()];
    let mut gv = vec![0.0; values.len()];
    let (wd, vd, od, gd) = (weights.data(), values.data(), out.data(), g.data());
    for (s, rows) in groups.iter().enumerate() {
        for &i in rows {
            for ch in 0..c {
                let w = wd[i * c + ch];
                let go = gd[s * c + ch];
                gv[i * c + ch] = w * go;
                gl[i * c + ch] = w * (vd[i * c + ch] - od[s * c + ch]) * go;
            }
        }
    }
    (
        Tensor {
            shape: values.shape().to_vec(),
            data: gl,
        },
        Tensor {
            shape: values.shape().to_vec(),
            data: gv,
        },
    )
}
