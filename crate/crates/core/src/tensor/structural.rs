use std::ops::Range;

use super::ops::split_axis;
use super::{numel_of, Tensor};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

impl<S: Scalar> Tensor<S> {
    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no operands");
        };
        let rank = first.rank();
        if axis >= rank {
            return shape_err("concat", format!("axis {axis} out of range for rank {rank}"));
        }
        for p in parts {
            let compatible = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(
            "concat",
            out,
            shape,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads: Vec<Option<Vec<S>>> =
                    flags.iter().zip(&widths).map(|(&f, &w)| f.then(|| Vec::with_capacity(outer * w))).collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g[off..off + w]);
                        }
                        off += w;
                    }
                }
                grads
            }),
        ))
    }

    /// Sub-range `range` of `axis`.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Tensor<S>> {
        let (outer, n, inner) = split_axis("slice", self.shape(), axis)?;
        if range.start >= range.end || range.end > n {
            return shape_err("slice", format!("range {range:?} invalid for extent {n} on axis {axis}"));
        }
        let len = range.end - range.start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + range.start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            "slice",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![S::zero(); total];
                for o in 0..outer {
                    let base = (o * n + range.start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Same data in row-major order under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel_of(shape) != self.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?} changes element count", self.shape()));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        match *self.shape() {
            [_, _] => self.permute(&[1, 0]),
            _ => shape_err("transpose", format!("expected a matrix, got {:?}", self.shape())),
        }
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor<S>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if order.len() != rank || order.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", format!("{order:?} is not a permutation of {rank} axes"));
        }
        let in_shape = self.shape().to_vec();
        let mut in_strides = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
        }
        let out_shape: Vec<usize> = order.iter().map(|&a| in_shape[a]).collect();
        let strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        // Source index for every output position, shared by forward and backward.
        let mut index = Vec::with_capacity(self.numel());
        let mut pos = vec![0usize; rank];
        for _ in 0..self.numel() {
            index.push(pos.iter().zip(&strides).map(|(p, s)| p * s).sum::<usize>());
            for d in (0..rank).rev() {
                pos[d] += 1;
                if pos[d] < out_shape[d] {
                    break;
                }
                pos[d] = 0;
            }
        }
        let x = self.data();
        let out: Vec<S> = index.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(
            "permute",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![S::zero(); g.len()];
                for (o, &i) in index.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }
}
