use super::ops::{self, Broadcast, LayerNormSaved};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum MatMulKind {
    /// rhs is a single matrix shared by every batch of lhs
    SharedRhs,
    /// lhs is a single matrix shared by every batch of rhs
    SharedLhs,
    Batched,
}

#[derive(Debug, Clone, Copy)]
struct MatMulDims {
    kind: MatMulKind,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        dims: MatMulDims,
    },
    Add {
        a: Var,
        b: Var,
        pa: Broadcast,
        pb: Broadcast,
    },
    Sub {
        a: Var,
        b: Var,
        pa: Broadcast,
        pb: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        pa: Broadcast,
        pb: Broadcast,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Mask {
        a: Var,
        mask: Vec<T>,
    },
    Square {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        saved: LayerNormSaved<T>,
    },
    Gelu {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it. A tape is single-writer; build one per training step.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. It receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (kind, batch, mut out_shape) = if lead_b.is_empty() {
            (
                MatMulKind::SharedRhs,
                lead_a.iter().product(),
                lead_a.to_vec(),
            )
        } else if lead_a.is_empty() {
            (
                MatMulKind::SharedLhs,
                lead_b.iter().product(),
                lead_b.to_vec(),
            )
        } else if lead_a == lead_b {
            (
                MatMulKind::Batched,
                lead_a.iter().product(),
                lead_a.to_vec(),
            )
        } else {
            return Err(err());
        };
        out_shape.extend([m, n]);
        let dims = MatMulDims {
            kind,
            batch,
            m,
            k,
            n,
        };
        let out = {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let mut c = vec![T::zero(); batch * m * n];
            match kind {
                MatMulKind::SharedRhs => {
                    T::gemm(batch * m, k, n, av, false, bv, false, T::zero(), &mut c)
                }
                MatMulKind::SharedLhs => {
                    for i in 0..batch {
                        T::gemm(
                            m,
                            k,
                            n,
                            av,
                            false,
                            &bv[i * k * n..],
                            false,
                            T::zero(),
                            &mut c[i * m * n..],
                        );
                    }
                }
                MatMulKind::Batched => {
                    for i in 0..batch {
                        T::gemm(
                            m,
                            k,
                            n,
                            &av[i * m * k..],
                            false,
                            &bv[i * k * n..],
                            false,
                            T::zero(),
                            &mut c[i * m * n..],
                        );
                    }
                }
            }
            c
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, dims },
            needs,
        ))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>, Broadcast, Broadcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = ops::broadcast_shape(op_name, sa, sb)?;
        let pa = ops::broadcast_plan(&out_shape, sa);
        let pb = ops::broadcast_plan(&out_shape, sb);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let numel: usize = out_shape.iter().product();
        let out = ops::binary_map(av, &pa, bv, &pb, numel, f);
        Ok((out_shape, out, pa, pb))
    }

    /// Element-wise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, pa, pb) = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b, pa, pb }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, pa, pb) = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a, b, pa, pb }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, pa, pb) = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b, pa, pb }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let v = self.value(a);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x * factor).collect(),
        )
        .expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Scale { a, factor }, needs)
    }

    /// Multiplies by a fixed mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let v = self.value(a);
        if mask.len() != v.numel() {
            return Err(Error::Shape {
                op: "mask",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Mask { a, mask }, needs))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x * x).collect(),
        )
        .expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Square { a }, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| ops::gelu(x)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Gelu { a }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, needs))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`. Copies.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let (out_shape, out) = ops::permute(self.value(a).data(), &shape, perm);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::contract("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let y = ops::softmax_forward(self.value(a).data(), &shape, axis);
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { a, axis }, needs))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("rank >= 1");
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (y, saved) = ops::layernorm_forward(
            self.value(x).data(),
            width,
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved,
            },
            needs,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::contract("concat of zero tensors"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = ops::split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, needs)
    }

    /// Reverse pass from a scalar `loss`. Consumes (clears) the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut leaves = Vec::new();
        for (i, node) in self.nodes.into_iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                leaves.push((i, g));
            }
        }
        Ok(Gradients { leaves })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&delta).for_each(|(b, d)| *b += *d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => {
                let MatMulDims {
                    kind,
                    batch,
                    m,
                    k,
                    n,
                } = *dims;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                match kind {
                    MatMulKind::SharedRhs => {
                        if self.needs(*a) {
                            let mut da = vec![T::zero(); batch * m * k];
                            T::gemm(batch * m, n, k, g, false, bv, true, T::zero(), &mut da);
                            acc(*a, da);
                        }
                        if self.needs(*b) {
                            let mut db = vec![T::zero(); k * n];
                            T::gemm(k, batch * m, n, av, true, g, false, T::zero(), &mut db);
                            acc(*b, db);
                        }
                    }
                    MatMulKind::SharedLhs => {
                        if self.needs(*a) {
                            let mut da = vec![T::zero(); m * k];
                            for i in 0..batch {
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..],
                                    false,
                                    &bv[i * k * n..],
                                    true,
                                    T::one(),
                                    &mut da,
                                );
                            }
                            acc(*a, da);
                        }
                        if self.needs(*b) {
                            let mut db = vec![T::zero(); batch * k * n];
                            for i in 0..batch {
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    av,
                                    true,
                                    &g[i * m * n..],
                                    false,
                                    T::zero(),
                                    &mut db[i * k * n..],
                                );
                            }
                            acc(*b, db);
                        }
                    }
                    MatMulKind::Batched => {
                        if self.needs(*a) {
                            let mut da = vec![T::zero(); batch * m * k];
                            for i in 0..batch {
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..],
                                    false,
                                    &bv[i * k * n..],
                                    true,
                                    T::zero(),
                                    &mut da[i * m * k..],
                                );
                            }
                            acc(*a, da);
                        }
                        if self.needs(*b) {
                            let mut db = vec![T::zero(); batch * k * n];
                            for i in 0..batch {
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    &av[i * m * k..],
                                    true,
                                    &g[i * m * n..],
                                    false,
                                    T::zero(),
                                    &mut db[i * k * n..],
                                );
                            }
                            acc(*b, db);
                        }
                    }
                }
            }
            Op::Add { a, b, pa, pb } => {
                let (la, lb) = (self.value(*a).numel(), self.value(*b).numel());
                if self.needs(*a) {
                    acc(*a, ops::reduce_broadcast(g, pa, la));
                }
                if self.needs(*b) {
                    acc(*b, ops::reduce_broadcast(g, pb, lb));
                }
            }
            Op::Sub { a, b, pa, pb } => {
                let (la, lb) = (self.value(*a).numel(), self.value(*b).numel());
                if self.needs(*a) {
                    acc(*a, ops::reduce_broadcast(g, pa, la));
                }
                if self.needs(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    acc(*b, ops::reduce_broadcast(&neg, pb, lb));
                }
            }
            Op::Mul { a, b, pa, pb } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let prod = ops::binary_map(g, &Broadcast::Same, bv, pb, g.len(), |x, y| x * y);
                    acc(*a, ops::reduce_broadcast(&prod, pa, av.len()));
                }
                if self.needs(*b) {
                    let prod = ops::binary_map(g, &Broadcast::Same, av, pa, g.len(), |x, y| x * y);
                    acc(*b, ops::reduce_broadcast(&prod, pb, bv.len()));
                }
            }
            Op::Scale { a, factor } => acc(*a, g.iter().map(|&x| x * *factor).collect()),
            Op::Mask { a, mask } => acc(*a, g.iter().zip(mask).map(|(&x, &m)| x * m).collect()),
            Op::Square { a } => {
                let two = T::of(2.0);
                let av = self.value(*a).data();
                acc(*a, g.iter().zip(av).map(|(&x, &v)| two * v * x).collect());
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&x, &v)| x * ops::gelu_grad(v))
                        .collect(),
                );
            }
            Op::Reshape { a } => acc(*a, g.to_vec()),
            Op::Permute { a, perm } => {
                let (_, back) = ops::permute(g, node.value.shape(), &ops::inverse_perm(perm));
                acc(*a, back);
            }
            Op::Softmax { a, axis } => {
                acc(
                    *a,
                    ops::softmax_backward(node.value.data(), g, node.value.shape(), *axis),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved,
            } => {
                let width = *node.value.shape().last().expect("rank >= 1");
                let (dx, dg, db) =
                    ops::layernorm_backward(saved, self.value(*gain).data(), g, width);
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = ops::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = o * total * inner + offset * inner;
                            part.extend_from_slice(&g[start..start + len * inner]);
                        }
                        acc(p, part);
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / T::of(n as f64); n]);
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every gradient-tracking leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(usize, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves
            .binary_search_by_key(&v.0, |(i, _)| *i)
            .ok()
            .map(|pos| self.leaves[pos].1.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.leaves
            .iter()
            .all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1, 1], &[3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[2] - 0.5).abs() < 1e-15);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layernorm_constant_row_and_zero_gain() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[2.5; 4]));
        let g = tape.constant(t(&[4], &[1.0; 4]));
        let b = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 7.0, 0.5, 0.25, 3.0]));
        let g = tape.constant(t(&[3], &[0.0; 3]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 3.0]).with_grad());
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
        assert!(Tape::<f64>::new().backward(Var(0)).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.leaf(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).with_grad());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let w = tape.constant(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(
            grads.get(b).unwrap(),
            &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]
        );
    }
}
