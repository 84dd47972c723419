//! Single-sample 2-D convolution and its transpose, lowered to GEMM through
//! im2col / col2im.

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Stride and (possibly asymmetric) zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    /// (top, bottom, left, right)
    pub pad: (usize, usize, usize, usize),
}

impl ConvGeometry {
    pub fn symmetric(stride: (usize, usize), pad: (usize, usize)) -> Self {
        ConvGeometry { stride, pad: (pad.0, pad.0, pad.1, pad.1) }
    }

    /// Output extents of a forward convolution, if the kernel fits.
    pub fn conv_out(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (t, b, l, r) = self.pad;
        let (ph, pw) = (h + t + b, w + l + r);
        if ph < kh || pw < kw || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }

    /// Output extents of a transposed convolution (cropping the padding).
    pub fn transpose_out(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (t, b, l, r) = self.pad;
        let fh = (h - 1) * self.stride.0 + kh;
        let fw = (w - 1) * self.stride.1 + kw;
        if fh <= t + b || fw <= l + r {
            return None;
        }
        Some((fh - t - b, fw - l - r))
    }
}

/// Geometry of one im2col lowering: an input image of `c x h x w` read by a
/// `kh x kw` kernel into an `oh x ow` output grid.
#[derive(Clone, Copy)]
struct Lowering {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: ConvGeometry,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every in-image run of the column matrix as
    /// `(column start, image start, length)`; image indices advance by the
    /// horizontal stride, column indices by one.
    #[inline]
    fn visit_runs(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (sh, sw) = self.g.stride;
        let (top, _, left, _) = self.g.pad;
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    // Output columns whose input column ox * sw + kj - left lies in 0..w.
                    let lo = if left > kj { (left - kj).div_ceil(sw) } else { 0 };
                    let hi = if self.w + left > kj { ((self.w + left - kj - 1) / sw + 1).min(self.ow) } else { 0 };
                    if lo >= hi {
                        continue;
                    }
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let iy = oy * sh + ki;
                        if iy < top || iy - top >= self.h {
                            continue;
                        }
                        let img = (c * self.h + iy - top) * self.w + lo * sw + kj - left;
                        f(row + oy * self.ow + lo, img, hi - lo);
                    }
                }
            }
        }
    }

    fn im2col<S: Scalar>(&self, img: &[S]) -> Vec<S> {
        let mut cols = vec![S::zero(); self.rows() * self.cols()];
        let sw = self.g.stride.1;
        self.visit_runs(|ci, ii, n| {
            let dst = &mut cols[ci..ci + n];
            if sw == 1 {
                dst.copy_from_slice(&img[ii..ii + n]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = img[ii + j * sw];
                }
            }
        });
        cols
    }

    fn col2im<S: Scalar>(&self, cols: &[S]) -> Vec<S> {
        let mut img = vec![S::zero(); self.c * self.h * self.w];
        let sw = self.g.stride.1;
        self.visit_runs(|ci, ii, n| {
            let src = &cols[ci..ci + n];
            if sw == 1 {
                for (d, &v) in img[ii..ii + n].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (j, &v) in src.iter().enumerate() {
                    img[ii + j * sw] += v;
                }
            }
        });
        img
    }
}

fn unpack3(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [a, b, c] => Ok((a, b, c)),
        _ => shape_err(op, format!("expected a 3-D (C x H x W) input, got {s:?}")),
    }
}

fn unpack4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => shape_err(op, format!("expected a 4-D kernel, got {s:?}")),
    }
}

impl<S: Scalar> Tensor<S> {
    /// Convolution with symmetric zero padding; `w` is `Cout x Cin x kh x kw`.
    pub fn conv2d(&self, w: &Tensor<S>, stride: (usize, usize), pad: (usize, usize)) -> Result<Tensor<S>> {
        self.conv2d_with(w, &ConvGeometry::symmetric(stride, pad))
    }

    pub fn conv2d_with(&self, w: &Tensor<S>, g: &ConvGeometry) -> Result<Tensor<S>> {
        let (cin, h, wd) = unpack3("conv2d", self.shape())?;
        let (cout, wcin, kh, kw) = unpack4("conv2d", w.shape())?;
        if cin != wcin {
            return shape_err("conv2d", format!("input has {cin} channels, kernel expects {wcin}"));
        }
        let Some((oh, ow)) = g.conv_out(h, wd, kh, kw) else {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd} ({g:?})"));
        };
        let low = Lowering { c: cin, h, w: wd, kh, kw, oh, ow, g: *g };
        let (k, p) = (low.rows(), low.cols());
        let cols = low.im2col(self.data());
        let mut out = vec![S::zero(); cout * p];
        S::gemm(cout, k, p, S::one(), w.data(), (k, 1), &cols, (p, 1), S::zero(), &mut out, p);
        let (x, wt) = (self.clone(), w.clone());
        Tensor::from_op_checked(
            "conv2d",
            out,
            vec![cout, oh, ow],
            vec![self.clone(), w.clone()],
            Box::new(move |gout, _| {
                let gx = x.requires_grad().then(|| {
                    let mut dcols = vec![S::zero(); k * p];
                    S::gemm(k, cout, p, S::one(), wt.data(), (1, k), gout, (p, 1), S::zero(), &mut dcols, p);
                    low.col2im(&dcols)
                });
                let gw = wt.requires_grad().then(|| {
                    let mut dw = vec![S::zero(); cout * k];
                    S::gemm(cout, p, k, S::one(), gout, (p, 1), &cols, (1, p), S::zero(), &mut dw, k);
                    dw
                });
                vec![gx, gw]
            }),
        )
    }

    /// Transposed convolution with symmetric cropping; `w` is `Cin x Cout x kh x kw`
    /// (the layout of the forward convolution it inverts).
    pub fn conv_transpose2d(&self, w: &Tensor<S>, stride: (usize, usize), pad: (usize, usize)) -> Result<Tensor<S>> {
        self.conv_transpose2d_with(w, &ConvGeometry::symmetric(stride, pad))
    }

    pub fn conv_transpose2d_with(&self, w: &Tensor<S>, g: &ConvGeometry) -> Result<Tensor<S>> {
        let (cin, h, wd) = unpack3("conv_transpose2d", self.shape())?;
        let (wcin, cout, kh, kw) = unpack4("conv_transpose2d", w.shape())?;
        if cin != wcin {
            return shape_err("conv_transpose2d", format!("input has {cin} channels, kernel expects {wcin}"));
        }
        if g.stride.0 == 0 || g.stride.1 == 0 {
            return shape_err("conv_transpose2d", "zero stride");
        }
        let Some((oh, ow)) = g.transpose_out(h, wd, kh, kw) else {
            return shape_err("conv_transpose2d", format!("padding {g:?} crops away the whole output"));
        };
        // The lowering of the forward convolution this op is the adjoint of.
        let low = Lowering { c: cout, h: oh, w: ow, kh, kw, oh: h, ow: wd, g: *g };
        let (k, p) = (low.rows(), low.cols());
        let mut cols = vec![S::zero(); k * p];
        S::gemm(k, cin, p, S::one(), w.data(), (1, k), self.data(), (p, 1), S::zero(), &mut cols, p);
        let out = low.col2im(&cols);
        let (x, wt) = (self.clone(), w.clone());
        Tensor::from_op_checked(
            "conv_transpose2d",
            out,
            vec![cout, oh, ow],
            vec![self.clone(), w.clone()],
            Box::new(move |gout, _| {
                let gcols = low.im2col(gout);
                let gx = x.requires_grad().then(|| {
                    let mut dx = vec![S::zero(); cin * p];
                    S::gemm(cin, k, p, S::one(), wt.data(), (k, 1), &gcols, (p, 1), S::zero(), &mut dx, p);
                    dx
                });
                let gw = wt.requires_grad().then(|| {
                    let mut dw = vec![S::zero(); cin * k];
                    S::gemm(cin, p, k, S::one(), x.data(), (p, 1), &gcols, (1, p), S::zero(), &mut dw, k);
                    dw
                });
                vec![gx, gw]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type T = Tensor<f64>;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
        let n = shape.iter().product();
        T::from_f64(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(), shape).unwrap()
    }

    /// Quadruple loop over (cout, y, x, cin*kernel) with explicit zero padding.
    fn direct_conv(x: &T, w: &T, g: ConvGeometry) -> (Vec<f64>, usize, usize) {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (oh, ow) = g.conv_out(h, wd, kh, kw).unwrap();
        let (t, _, l, _) = g.pad;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride.0 + ky) as isize - t as isize;
                                let ix = (ox * g.stride.1 + kx) as isize - l as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[1, 4, 5]);
        let w = T::ones(&[1, 1, 1, 1]);
        assert_eq!(x.conv2d(&w, (1, 1), (0, 0)).unwrap().data(), x.data());
        assert_eq!(x.conv_transpose2d(&w, (1, 1), (0, 0)).unwrap().data(), x.data());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let y = T::zeros(&[2, 5, 5]).conv2d(&w, (1, 1), (1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_by_three_against_direct_loop() {
        let x = T::from_f64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 3, 3]).unwrap();
        let w = T::from_f64(&[1.0, -1.0, 0.5, 2.0], &[1, 1, 2, 2]).unwrap();
        let y = x.conv2d(&w, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        let (want, _, _) = direct_conv(&x, &w, ConvGeometry::symmetric((1, 1), (0, 0)));
        assert_eq!(want, vec![11.0, 13.5, 18.5, 21.0]);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_geometries_against_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geoms = [
            ConvGeometry::symmetric((1, 1), (0, 0)),
            ConvGeometry::symmetric((2, 1), (2, 1)),
            ConvGeometry { stride: (2, 1), pad: (2, 2, 1, 0) },
            ConvGeometry { stride: (3, 2), pad: (1, 0, 0, 2) },
        ];
        for g in geoms {
            let x = random(&mut rng, &[3, 9, 7]);
            let w = random(&mut rng, &[4, 3, 5, 2]);
            let y = x.conv2d_with(&w, &g).unwrap();
            let (want, oh, ow) = direct_conv(&x, &w, g);
            assert_eq!(y.shape(), &[4, oh, ow]);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kernel_larger_than_input_is_error() {
        let x = T::zeros(&[1, 2, 2]);
        let w = T::zeros(&[1, 1, 3, 3]);
        assert!(x.conv2d(&w, (1, 1), (0, 0)).is_err());
        assert!(x.conv2d(&w, (1, 1), (1, 1)).is_ok());
        assert!(x.conv2d(&T::zeros(&[1, 2, 1, 1]), (1, 1), (0, 0)).is_err());
    }

    #[test]
    fn transpose_inverts_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[2, 8, 6]);
        let w = random(&mut rng, &[3, 2, 2, 2]);
        let y = x.conv2d(&w, (2, 2), (0, 0)).unwrap();
        let back = y.conv_transpose2d(&w, (2, 2), (0, 0)).unwrap();
        assert_eq!(back.shape(), x.shape());
    }

    /// Transposed convolution as zero insertion between inputs, full padding
    /// by k-1, a plain convolution with the flipped kernel, then cropping.
    fn zero_stuffed(x: &T, w: &T, stride: usize, pad: usize) -> T {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (_, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (sh, sw) = ((h - 1) * stride + 1, (wd - 1) * stride + 1);
        let mut stuffed = vec![0.0; cin * sh * sw];
        for c in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    stuffed[(c * sh + y * stride) * sw + xx * stride] = x.data()[(c * h + y) * wd + xx];
                }
            }
        }
        let mut flipped = vec![0.0; cout * cin * kh * kw];
        for ci in 0..cin {
            for co in 0..cout {
                for a in 0..kh {
                    for b in 0..kw {
                        flipped[((co * cin + ci) * kh + (kh - 1 - a)) * kw + (kw - 1 - b)] =
                            w.data()[((ci * cout + co) * kh + a) * kw + b];
                    }
                }
            }
        }
        let s = T::from_f64(&stuffed, &[cin, sh, sw]).unwrap();
        let f = T::from_f64(&flipped, &[cout, cin, kh, kw]).unwrap();
        let g = ConvGeometry {
            stride: (1, 1),
            pad: (kh - 1 - pad, kh - 1 - pad, kw - 1 - pad, kw - 1 - pad),
        };
        s.conv2d_with(&f, &g).unwrap()
    }

    #[test]
    fn transpose_matches_zero_insertion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, pad) in [(1, 0), (2, 0), (2, 1), (3, 1)] {
            let x = random(&mut rng, &[2, 4, 4]);
            let w = random(&mut rng, &[2, 3, 3, 3]);
            let y = x.conv_transpose2d(&w, (stride, stride), (pad, pad)).unwrap();
            let want = zero_stuffed(&x, &w, stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[2, 7, 5]);
        let w = random(&mut rng, &[3, 2, 5, 2]);
        let g = ConvGeometry { stride: (2, 1), pad: (2, 2, 1, 0) };
        let r = grad_check(|v| v[0].conv2d_with(&v[1], &g)?.square()?.sum(), &[x, w], 1e-5);
        assert!(r.max_error() < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[3, 4, 5]);
        let w = random(&mut rng, &[3, 2, 5, 2]);
        let g = ConvGeometry { stride: (2, 1), pad: (2, 2, 0, 1) };
        let r = grad_check(|v| v[0].conv_transpose2d_with(&v[1], &g)?.square()?.sum(), &[x, w], 1e-5);
        assert!(r.max_error() < 1e-6, "{r:?}");
    }
}
