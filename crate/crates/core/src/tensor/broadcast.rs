//! Trailing-dimension broadcasting: shapes are right-aligned, and each aligned
//! pair of extents must be equal or contain a 1.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(op, format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed inside `out` (0 along broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 || out[i + offset] == 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`, in order.
pub(crate) fn for_each_pair(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut flat = 0;
    loop {
        let mut base_a = 0;
        let mut base_b = 0;
        for d in 0..rank - 1 {
            base_a += idx[d] * sa[d];
            base_b += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(flat + j, base_a + j * ia_step, base_b + j * ib_step);
        }
        flat += inner;
        // Advance the outer multi-index.
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of shape `out` down to the broadcast operand shape `shape`.
pub(crate) fn reduce_to<S: Scalar>(grad: &[S], out: &[usize], shape: &[usize]) -> Vec<S> {
    let n: usize = shape.iter().product();
    if n == grad.len() {
        return grad.to_vec();
    }
    let mut acc = vec![S::zero(); n];
    for_each_pair(out, shape, shape, |o, i, _| acc[i] += grad[o]);
    acc
}
