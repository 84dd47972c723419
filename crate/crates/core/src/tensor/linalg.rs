use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

impl<S: Scalar> Tensor<S> {
    /// Matrix product of `(M x K)` and `(K x P)` tensors.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = match self.shape() {
            &[m, k] => (m, k),
            s => return shape_err("matmul", format!("left operand must be 2-D, got {s:?}")),
        };
        let (k2, p) = match other.shape() {
            &[k2, p] => (k2, p),
            s => return shape_err("matmul", format!("right operand must be 2-D, got {s:?}")),
        };
        if k != k2 {
            return shape_err("matmul", format!("inner extents differ: {m}x{k} * {k2}x{p}"));
        }
        let mut out = vec![S::zero(); m * p];
        S::gemm(m, k, p, S::one(), self.data(), (k, 1), other.data(), (p, 1), S::zero(), &mut out, p);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op_checked(
            "matmul",
            out,
            vec![m, p],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                // dA = G B^T, dB = A^T G
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![S::zero(); m * k];
                    S::gemm(m, p, k, S::one(), g, (p, 1), b.data(), (1, p), S::zero(), &mut ga, k);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![S::zero(); k * p];
                    S::gemm(k, m, p, S::one(), a.data(), (1, k), g, (p, 1), S::zero(), &mut gb, p);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }
}
