//! Slice-level forward and backward kernels used by the tape.

use super::Scalar;
use crate::error::{Error, Result};

pub(crate) const LAYERNORM_EPS: f64 = 1e-5;

/// How an operand of a binary element-wise op maps onto the output.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// operand covers a contiguous run of output axes followed by `repeat`
    /// broadcast elements: index `(i / repeat) % len`
    Tile {
        len: usize,
        repeat: usize,
    },
    Map(Vec<usize>),
}

impl Broadcast {
    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Tile { len, repeat } => (i / repeat) % len,
            Broadcast::Map(map) => map[i],
        }
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

pub(crate) fn broadcast_plan(out: &[usize], operand: &[usize]) -> Broadcast {
    if out == operand {
        return Broadcast::Same;
    }
    let offset = out.len() - operand.len();
    // strip size-1 axes on both ends of the operand
    let lo = operand
        .iter()
        .position(|&d| d != 1)
        .unwrap_or(operand.len());
    let hi = operand.iter().rposition(|&d| d != 1).map_or(lo, |p| p + 1);
    if out[offset + lo..offset + hi] == operand[lo..hi] {
        return Broadcast::Tile {
            len: operand[lo..hi].iter().product(),
            repeat: out[offset + hi..].iter().product(),
        };
    }
    // general strided mapping
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..operand.len()).rev() {
        if operand[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= operand[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Broadcast::Map(map)
}

/// Sums an output-shaped gradient back onto an operand of `len` elements.
pub(crate) fn reduce_broadcast<T: Scalar>(grad: &[T], plan: &Broadcast, len: usize) -> Vec<T> {
    match plan {
        Broadcast::Same => grad.to_vec(),
        &Broadcast::Tile { len: n, repeat } => {
            debug_assert_eq!(n, len);
            let mut out = vec![T::zero(); len];
            for chunk in grad.chunks_exact(n * repeat) {
                if repeat == 1 {
                    for (o, g) in out.iter_mut().zip(chunk) {
                        *o += *g;
                    }
                } else {
                    for (o, run) in out.iter_mut().zip(chunk.chunks_exact(repeat)) {
                        *o += run.iter().fold(T::zero(), |a, &g| a + g);
                    }
                }
            }
            out
        }
        _ => {
            let mut out = vec![T::zero(); len];
            for (i, g) in grad.iter().enumerate() {
                out[plan.index(i)] += *g;
            }
            out
        }
    }
}

/// `f(a[i], b[i])` over the output, with each operand read through its
/// broadcast plan.
pub(crate) fn binary_map<T: Scalar>(
    a: &[T],
    pa: &Broadcast,
    b: &[T],
    pb: &Broadcast,
    numel: usize,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let mut out = vec![T::zero(); numel];
    match (pa, pb) {
        (Broadcast::Same, Broadcast::Same) => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = f(x, y);
            }
        }
        (Broadcast::Same, &Broadcast::Tile { len, repeat }) => {
            tile(&mut out, a, b, len, repeat, &f)
        }
        (&Broadcast::Tile { len, repeat }, Broadcast::Same) => {
            tile(&mut out, b, a, len, repeat, &|y, x| f(x, y))
        }
        _ => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = f(a[pa.index(i)], b[pb.index(i)]);
            }
        }
    }
    out
}

fn tile<T: Scalar>(
    out: &mut [T],
    full: &[T],
    small: &[T],
    len: usize,
    repeat: usize,
    f: &impl Fn(T, T) -> T,
) {
    for (oc, fc) in out
        .chunks_exact_mut(len * repeat)
        .zip(full.chunks_exact(len * repeat))
    {
        if repeat == 1 {
            for ((o, &x), &y) in oc.iter_mut().zip(fc).zip(small) {
                *o = f(x, y);
            }
        } else {
            for ((orun, frun), &y) in oc
                .chunks_exact_mut(repeat)
                .zip(fc.chunks_exact(repeat))
                .zip(small)
            {
                for (o, &x) in orun.iter_mut().zip(frun) {
                    *o = f(x, y);
                }
            }
        }
    }
}

/// Row-major strides of a shape.
fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape and data of permuting `data` (shape `shape`) by `perm`.
pub(crate) fn permute<T: Scalar>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    // innermost axis handled as a strided run
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[at(j)] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layernorm_forward<T: Scalar>(
    x: &[T],
    width: usize,
    gain: &[T],
    bias: &[T],
) -> (Vec<T>, LayerNormSaved<T>) {
    let rows = x.len() / width;
    let eps = T::of(LAYERNORM_EPS);
    let inv_w = T::one() / T::of(width as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let h = (row[c] - mean) * rs;
            xhat[r * width + c] = h;
            y[r * width + c] = h * gain[c] + bias[c];
        }
    }
    (y, LayerNormSaved { xhat, rstd })
}

/// Returns (dx, dgain, dbias).
pub(crate) fn layernorm_backward<T: Scalar>(
    saved: &LayerNormSaved<T>,
    gain: &[T],
    dy: &[T],
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / width;
    let inv_w = T::one() / T::of(width as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); width];
    let mut db = vec![T::zero(); width];
    for r in 0..rows {
        let base = r * width;
        let mut mean_d = T::zero();
        let mut mean_dh = T::zero();
        for c in 0..width {
            let g = dy[base + c];
            let h = saved.xhat[base + c];
            dg[c] += g * h;
            db[c] += g;
            let dh = g * gain[c];
            mean_d += dh;
            mean_dh += dh * h;
        }
        mean_d *= inv_w;
        mean_dh *= inv_w;
        let rs = saved.rstd[r];
        for c in 0..width {
            let h = saved.xhat[base + c];
            let dh = dy[base + c] * gain[c];
            dx[base + c] = rs * (dh - mean_d - h * mean_dh);
        }
    }
    (dx, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 x (1 + tanh(u))` written as `x * sigmoid(2u)`, which needs a single
/// `exp`.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

#[inline]
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let s = gelu_gate(x);
    s + x * s * (T::one() - s) * (c + c) * (T::one() + T::of(3.0) * a * x * x)
}
