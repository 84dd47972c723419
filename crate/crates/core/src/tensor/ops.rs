//! Elementwise maps, reductions, softmax and scans.

use super::broadcast::{broadcast_shape, for_each_pair, reduce_to};
use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Floor added inside `log` so silent inputs stay finite.
pub const LOG_EPS: f64 = 1e-12;
/// Floor applied to norm-like denominators.
pub const DIV_EPS: f64 = 1e-12;

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(op, format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<S: Scalar> Tensor<S> {
    fn binary<F, DA, DB>(&self, other: &Tensor<S>, name: &'static str, f: F, da: DA, db: DB) -> Result<Tensor<S>>
    where
        F: Fn(S, S) -> S,
        DA: Fn(S, S, S) -> S + Send + Sync + 'static,
        DB: Fn(S, S, S) -> S + Send + Sync + 'static,
    {
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        let data: Vec<S> = if self.shape() == other.shape() {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = vec![S::zero(); out_shape.iter().product()];
            for_each_pair(&out_shape, self.shape(), other.shape(), |o, i, j| d[o] = f(a[i], b[j]));
            d
        };
        let (ta, tb) = (self.clone(), other.clone());
        let shape_for_grad = out_shape.clone();
        Tensor::from_op_checked(
            name,
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, out| {
                let (a, b) = (ta.data(), tb.data());
                let n = g.len();
                let mut ga = ta.requires_grad().then(|| vec![S::zero(); n]);
                let mut gb = tb.requires_grad().then(|| vec![S::zero(); n]);
                for_each_pair(&shape_for_grad, ta.shape(), tb.shape(), |o, i, j| {
                    if let Some(ga) = ga.as_mut() {
                        ga[o] = g[o] * da(a[i], b[j], out[o]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[o] = g[o] * db(a[i], b[j], out[o]);
                    }
                });
                vec![
                    ga.map(|v| reduce_to(&v, &shape_for_grad, ta.shape())),
                    gb.map(|v| reduce_to(&v, &shape_for_grad, tb.shape())),
                ]
            }),
        )
    }

    fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Result<Tensor<S>>
    where
        F: Fn(S) -> S,
        D: Fn(S, S) -> S + Send + Sync + 'static,
    {
        let data: Vec<S> = self.data().iter().map(|&x| f(x)).collect();
        let src = self.clone();
        Tensor::from_op_checked(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, out| {
                let x = src.data();
                vec![Some(g.iter().zip(x).zip(out).map(|((&g, &x), &y)| g * df(x, y)).collect())]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| S::one(), |_, _, _| S::one())
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| S::one(), |_, _, _| -S::one())
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    /// Plain quotient; callers guard denominators with [`Tensor::clamp_min`].
    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, "div", |a, b| a / b, |_, b, _| b.recip(), |_, b, y| -y / b)
    }

    /// Parametric ReLU with a broadcast slope tensor.
    pub fn prelu(&self, slope: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(
            slope,
            "prelu",
            |x, a| if x >= S::zero() { x } else { a * x },
            |x, a, _| if x >= S::zero() { S::one() } else { a },
            |x, _, _| if x >= S::zero() { S::zero() } else { x },
        )
    }

    pub fn neg(&self) -> Result<Tensor<S>> {
        self.unary("neg", |x| -x, |_, _| -S::one())
    }

    pub fn scale(&self, c: S) -> Result<Tensor<S>> {
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: S) -> Result<Tensor<S>> {
        self.unary("add_scalar", move |x| x + c, |_, _| S::one())
    }

    /// Elementwise |x|; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Result<Tensor<S>> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Result<Tensor<S>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    /// x^k for a real exponent.
    pub fn pow(&self, k: S) -> Result<Tensor<S>> {
        if k == S::lit(2.0) {
            return self.square();
        }
        self.unary(
            "pow",
            move |x| x.powf(k),
            move |x, _| k * x.powf(k - S::one()),
        )
    }

    pub fn sqrt(&self) -> Result<Tensor<S>> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| S::lit(0.5) / y)
    }

    /// Natural log of `x + 1e-12`.
    pub fn log(&self) -> Result<Tensor<S>> {
        let eps = S::lit(LOG_EPS);
        self.unary("log", move |x| (x + eps).ln(), move |x, _| (x + eps).recip())
    }

    pub fn exp(&self) -> Result<Tensor<S>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= S::zero() {
                    (S::one() + (-x).exp()).recip()
                } else {
                    let e = x.exp();
                    e / (S::one() + e)
                }
            },
            |_, y| y * (S::one() - y),
        )
    }

    pub fn tanh(&self) -> Result<Tensor<S>> {
        self.unary("tanh", |x| x.tanh(), |_, y| S::one() - y * y)
    }

    /// max(x, lo); gradient passes only where x > lo.
    pub fn clamp_min(&self, lo: S) -> Result<Tensor<S>> {
        self.unary("clamp_min", move |x| x.max(lo), move |x, _| if x > lo { S::one() } else { S::zero() })
    }

    /// Clamps into [lo, hi]; gradient passes only strictly inside.
    pub fn clamp(&self, lo: S, hi: S) -> Result<Tensor<S>> {
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { S::one() } else { S::zero() },
        )
    }

    pub fn sum(&self) -> Result<Tensor<S>> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Ok(Tensor::from_op("sum", vec![total], vec![], vec![self.clone()], Box::new(move |g, _| vec![Some(vec![g[0]; n])])))
    }

    pub fn mean(&self) -> Result<Tensor<S>> {
        let n = S::lit(self.numel() as f64);
        self.sum()?.scale(n.recip())
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let (outer, n, inner) = split_axis("sum_axis", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        Ok(Tensor::from_op(
            "sum_axis",
            out,
            without_axis(self.shape(), axis),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let n = *self.shape().get(axis).unwrap_or(&1);
        self.sum_axis(axis)?.scale(S::lit(n as f64).recip())
    }

    /// Euclidean norm of all elements, as a scalar. The gradient uses a
    /// guarded denominator so it is zero (not NaN) at the origin.
    pub fn l2_norm(&self) -> Result<Tensor<S>> {
        let norm = self.data().iter().map(|&v| v * v).sum::<S>().sqrt();
        let src = self.clone();
        Ok(Tensor::from_op(
            "l2_norm",
            vec![norm],
            vec![],
            vec![self.clone()],
            Box::new(move |g, out| {
                let d = out[0].max(S::lit(DIV_EPS));
                vec![Some(src.data().iter().map(|&x| g[0] * x / d).collect())]
            }),
        ))
    }

    /// Euclidean norm along one axis (axis removed).
    pub fn l2_norm_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let (outer, n, inner) = split_axis("l2_norm_axis", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = x[(o * n + k) * inner + i];
                    out[o * inner + i] += v * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let src = self.clone();
        Ok(Tensor::from_op(
            "l2_norm_axis",
            out,
            without_axis(self.shape(), axis),
            vec![self.clone()],
            Box::new(move |g, out| {
                let x = src.data();
                let mut gx = vec![S::zero(); x.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            let at = (o * n + k) * inner + i;
                            let r = o * inner + i;
                            gx[at] = g[r] * x[at] / out[r].max(S::lit(DIV_EPS));
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        let (outer, n, inner) = split_axis("softmax", self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for k in 0..n {
                    let e = (x[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[at(k)] /= z;
                }
            }
        }
        Tensor::from_op_checked(
            "softmax",
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: S = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&self, axis: usize) -> Result<Tensor<S>> {
        let (outer, n, inner) = split_axis("cumsum", self.shape(), axis)?;
        let mut y = self.data().to_vec();
        for o in 0..outer {
            for k in 1..n {
                let (prev, cur) = y.split_at_mut((o * n + k) * inner);
                let prev = &prev[(o * n + k - 1) * inner..];
                for (c, &p) in cur[..inner].iter_mut().zip(prev) {
                    *c += p;
                }
            }
        }
        Ok(Tensor::from_op(
            "cumsum",
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = g.to_vec();
                for o in 0..outer {
                    for k in (0..n.saturating_sub(1)).rev() {
                        let (cur, next) = gx.split_at_mut((o * n + k + 1) * inner);
                        let cur = &mut cur[(o * n + k) * inner..];
                        for (c, &nx) in cur.iter_mut().zip(&next[..inner]) {
                            *c += nx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
