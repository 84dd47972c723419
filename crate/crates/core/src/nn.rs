//! Complex convolution blocks, the LSTM bottleneck and complex ratio masking.
//!
//! Complex feature maps are carried as one real tensor with the real parts in
//! the first half of the channel axis and the imaginary parts in the second
//! half (`2C x F x T`). A complex convolution is then a single real
//! convolution with the block kernel `[[Wr, -Wi], [Wi, Wr]]`.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::signal::Spectrogram;
use crate::tensor::{ConvGeometry, Tensor};

/// Variance floor of the cumulative normalization.
const NORM_EPS: f64 = 1e-5;
const PRELU_INIT: f64 = 0.25;

/// Draws a `U(-b, b)` tensor with `b = 1 / sqrt(fan_in)`.
pub(crate) fn uniform_param<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor<S>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect(), shape)
}

fn constant_param<S: Scalar>(shape: &[usize], v: f64) -> Result<Tensor<S>> {
    Tensor::param(vec![S::lit(v); shape.iter().product()], shape)
}

/// Joins two stacked complex maps along the channel axis, keeping real parts
/// ahead of imaginary parts.
pub fn complex_concat<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ca, cb) = (a.shape()[0] / 2, b.shape()[0] / 2);
    Tensor::concat(&[a.slice(0, 0..ca)?, b.slice(0, 0..cb)?, a.slice(0, ca..2 * ca)?, b.slice(0, cb..2 * cb)?], 0)
}

/// Whether a block convolves or transposed-convolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Forward,
    Transposed,
}

/// Static shape of one complex convolution block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    /// Complex input channels.
    pub cin: usize,
    /// Complex output channels.
    pub cout: usize,
    /// (frequency, time)
    pub kernel: (usize, usize),
    pub geometry: ConvGeometry,
    pub kind: ConvKind,
    /// Per-channel cumulative normalization followed by PReLU. The bias then
    /// acts as the normalization's shift, since a bias added before it would be
    /// cancelled by the mean subtraction.
    pub norm_act: bool,
}

impl BlockSpec {
    pub fn param_count(&self) -> usize {
        let (kh, kw) = self.kernel;
        let mut n = 2 * self.cin * self.cout * kh * kw + 2 * self.cout;
        if self.norm_act {
            n += 2 * 2 * self.cout;
        }
        n
    }
}

/// Complex convolution (or transposed convolution), then optional
/// normalization and PReLU applied to real and imaginary parts alike.
#[derive(Debug, Clone)]
pub struct ComplexConvBlock<S: Scalar> {
    pub spec: BlockSpec,
    pub w_real: Tensor<S>,
    pub w_imag: Tensor<S>,
    pub bias_real: Tensor<S>,
    pub bias_imag: Tensor<S>,
    /// Per real channel (`2 * cout`), shaped for broadcasting over `F x T`.
    pub norm_gain: Option<Tensor<S>>,
    pub prelu_slope: Option<Tensor<S>>,
}

impl<S: Scalar> ComplexConvBlock<S> {
    pub fn new<R: Rng>(spec: BlockSpec, rng: &mut R) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        let wshape = match spec.kind {
            ConvKind::Forward => [spec.cout, spec.cin, kh, kw],
            ConvKind::Transposed => [spec.cin, spec.cout, kh, kw],
        };
        let fan_in = 2 * spec.cin * kh * kw;
        let chan = [2 * spec.cout, 1, 1];
        Ok(ComplexConvBlock {
            spec,
            w_real: uniform_param(rng, &wshape, fan_in)?,
            w_imag: uniform_param(rng, &wshape, fan_in)?,
            bias_real: uniform_param(rng, &[spec.cout], fan_in)?,
            bias_imag: uniform_param(rng, &[spec.cout], fan_in)?,
            norm_gain: spec.norm_act.then(|| constant_param(&chan, 1.0)).transpose()?,
            prelu_slope: spec.norm_act.then(|| constant_param(&chan, PRELU_INIT)).transpose()?,
        })
    }

    /// Real kernel acting on stacked `[real; imag]` channels.
    fn block_kernel(&self) -> Result<Tensor<S>> {
        let (wr, wi) = (&self.w_real, &self.w_imag);
        let neg = wi.neg()?;
        match self.spec.kind {
            // Cout x Cin layout: rows produce [real; imag] outputs.
            ConvKind::Forward => Tensor::concat(
                &[Tensor::concat(&[wr.clone(), neg], 1)?, Tensor::concat(&[wi.clone(), wr.clone()], 1)?],
                0,
            ),
            // Cin x Cout layout: rows consume [real; imag] inputs.
            ConvKind::Transposed => Tensor::concat(
                &[Tensor::concat(&[wr.clone(), wi.clone()], 1)?, Tensor::concat(&[neg, wr.clone()], 1)?],
                0,
            ),
        }
    }

    /// Complex convolution of the stacked input, without bias.
    pub fn linear_part(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 3 || x.shape()[0] != 2 * self.spec.cin {
            return shape_err(
                "complex_conv",
                format!("expected {} stacked channels, got {:?}", 2 * self.spec.cin, x.shape()),
            );
        }
        let k = self.block_kernel()?;
        match self.spec.kind {
            ConvKind::Forward => x.conv2d_with(&k, &self.spec.geometry),
            ConvKind::Transposed => x.conv_transpose2d_with(&k, &self.spec.geometry),
        }
    }

    /// `[bias_real; bias_imag]` shaped `2Cout x 1 x 1`.
    fn stacked_bias(&self) -> Result<Tensor<S>> {
        Tensor::concat(&[self.bias_real.clone(), self.bias_imag.clone()], 0)?.reshape(&[2 * self.spec.cout, 1, 1])
    }

    /// Stacked `2Cin x F x T` in, stacked `2Cout x F' x T'` out.
    pub fn forward_stacked(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self.linear_part(x)?;
        let bias = self.stacked_bias()?;
        match (&self.norm_gain, &self.prelu_slope) {
            (Some(g), Some(a)) => cumulative_norm_prelu(&y, g, &bias, a),
            _ => y.add(&bias),
        }
    }

    /// Separate real/imaginary tensors in and out.
    pub fn forward(&self, x_real: &Tensor<S>, x_imag: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        if x_real.shape() != x_imag.shape() {
            return shape_err("complex_conv", format!("real {:?} vs imag {:?}", x_real.shape(), x_imag.shape()));
        }
        let y = self.forward_stacked(&Tensor::concat(&[x_real.clone(), x_imag.clone()], 0)?)?;
        let c = self.spec.cout;
        Ok((y.slice(0, 0..c)?, y.slice(0, c..2 * c)?))
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut v = vec![
            ("w_real", &self.w_real),
            ("w_imag", &self.w_imag),
            ("bias_real", &self.bias_real),
            ("bias_imag", &self.bias_imag),
        ];
        if let (Some(g), Some(a)) = (&self.norm_gain, &self.prelu_slope) {
            v.extend([("norm_gain", g), ("prelu", a)]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        let mut v = vec![
            ("w_real", &mut self.w_real),
            ("w_imag", &mut self.w_imag),
            ("bias_real", &mut self.bias_real),
            ("bias_imag", &mut self.bias_imag),
        ];
        if let (Some(g), Some(a)) = (&mut self.norm_gain, &mut self.prelu_slope) {
            v.extend([("norm_gain", g), ("prelu", a)]);
        }
        v
    }
}

/// Causal per-channel normalization of a `C x F x T` map: frame `t` is
/// standardized with the mean and variance of that channel over all
/// frequencies and frames `0..=t`, then scaled and shifted.
pub fn cumulative_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, shift: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, f, t) = match *x.shape() {
        [c, f, t] => (c, f, t),
        _ => return shape_err("cumulative_norm", format!("expected C x F x T, got {:?}", x.shape())),
    };
    let counts = Tensor::vector((0..t).map(|i| S::lit(((i + 1) * f) as f64).recip()).collect());
    let mean = x.sum_axis(1)?.cumsum(1)?.mul(&counts)?;
    let power = x.square()?.sum_axis(1)?.cumsum(1)?.mul(&counts)?;
    let var = power.sub(&mean.square()?)?.clamp_min(S::zero())?;
    let inv_std = var.add_scalar(S::lit(NORM_EPS))?.sqrt()?.reshape(&[c, 1, t])?;
    x.sub(&mean.reshape(&[c, 1, t])?)?.div(&inv_std)?.mul(gain)?.add(shift)
}

/// [`cumulative_norm`] followed by a per-channel PReLU, as one graph node with
/// a hand-written backward. `gain`, `shift` and `slope` are `C x 1 x 1`.
pub fn cumulative_norm_prelu<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    shift: &Tensor<S>,
    slope: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (c, f, t) = match *x.shape() {
        [c, f, t] => (c, f, t),
        _ => return shape_err("cumulative_norm", format!("expected C x F x T, got {:?}", x.shape())),
    };
    for (what, p) in [("gain", gain), ("shift", shift), ("slope", slope)] {
        if p.shape() != [c, 1, 1] {
            return shape_err("cumulative_norm", format!("{what} must be [{c}, 1, 1], got {:?}", p.shape()));
        }
    }
    let xd = x.data();
    let eps = S::lit(NORM_EPS);
    // Per (channel, frame): running mean, 1/std, and whether the variance was clamped.
    let mut mean = vec![S::zero(); c * t];
    let mut inv_std = vec![S::zero(); c * t];
    let mut clamped = vec![false; c * t];
    let mut frame_sum = vec![S::zero(); t];
    let mut frame_pow = vec![S::zero(); t];
    let mut out = vec![S::zero(); xd.len()];
    for ch in 0..c {
        let plane = &xd[ch * f * t..(ch + 1) * f * t];
        frame_sum.iter_mut().for_each(|v| *v = S::zero());
        frame_pow.iter_mut().for_each(|v| *v = S::zero());
        for row in plane.chunks_exact(t) {
            for ((s, p), &v) in frame_sum.iter_mut().zip(frame_pow.iter_mut()).zip(row) {
                *s += v;
                *p += v * v;
            }
        }
        let (mut s1, mut s2) = (S::zero(), S::zero());
        for k in 0..t {
            s1 += frame_sum[k];
            s2 += frame_pow[k];
            let n = S::lit(((k + 1) * f) as f64);
            let m = s1 / n;
            let raw = s2 / n - m * m;
            let i = ch * t + k;
            mean[i] = m;
            clamped[i] = !(raw > S::zero());
            inv_std[i] = (raw.max(S::zero()) + eps).sqrt().recip();
        }
        let (g, b, a) = (gain.data()[ch], shift.data()[ch], slope.data()[ch]);
        let (m, r) = (&mean[ch * t..(ch + 1) * t], &inv_std[ch * t..(ch + 1) * t]);
        for (orow, row) in out[ch * f * t..(ch + 1) * f * t].chunks_exact_mut(t).zip(plane.chunks_exact(t)) {
            for k in 0..t {
                let u = g * (row[k] - m[k]) * r[k] + b;
                orow[k] = if u >= S::zero() { u } else { a * u };
            }
        }
    }

    let (xs, gs, bs, a_s) = (x.clone(), gain.clone(), shift.clone(), slope.clone());
    Tensor::from_op_checked(
        "cumulative_norm",
        out,
        vec![c, f, t],
        vec![x.clone(), gain.clone(), shift.clone(), slope.clone()],
        Box::new(move |gy, _| {
            let xd = xs.data();
            let mut gx = vec![S::zero(); xd.len()];
            let mut g_gain = vec![S::zero(); c];
            let mut g_shift = vec![S::zero(); c];
            let mut g_slope = vec![S::zero(); c];
            // Per-frame sums of dz and dz * z.
            let mut sum_dz = vec![S::zero(); t];
            let mut sum_dzz = vec![S::zero(); t];
            let mut r1 = vec![S::zero(); t];
            let mut r2 = vec![S::zero(); t];
            for ch in 0..c {
                let (g, b, a) = (gs.data()[ch], bs.data()[ch], a_s.data()[ch]);
                let (m, r) = (&mean[ch * t..(ch + 1) * t], &inv_std[ch * t..(ch + 1) * t]);
                let plane = &xd[ch * f * t..(ch + 1) * f * t];
                let gplane = &gy[ch * f * t..(ch + 1) * f * t];
                sum_dz.iter_mut().for_each(|v| *v = S::zero());
                sum_dzz.iter_mut().for_each(|v| *v = S::zero());
                let gxp = &mut gx[ch * f * t..(ch + 1) * f * t];
                for ((row, grow), gxrow) in plane.chunks_exact(t).zip(gplane.chunks_exact(t)).zip(gxp.chunks_exact_mut(t)) {
                    for k in 0..t {
                        let z = (row[k] - m[k]) * r[k];
                        let u = g * z + b;
                        let du = if u >= S::zero() {
                            grow[k]
                        } else {
                            g_slope[ch] += grow[k] * u;
                            grow[k] * a
                        };
                        g_shift[ch] += du;
                        g_gain[ch] += du * z;
                        let dz = du * g;
                        sum_dz[k] += dz;
                        sum_dzz[k] += dz * z;
                        gxrow[k] = dz * r[k];
                    }
                }
                // Gradients w.r.t. the cumulative sums of x and x^2 at each frame,
                // then a reverse cumsum back onto the frames that fed them.
                let (mut acc1, mut acc2) = (S::zero(), S::zero());
                for k in (0..t).rev() {
                    let n = S::lit(((k + 1) * f) as f64);
                    let d_mean = -sum_dz[k] * r[k];
                    let d_std = -sum_dzz[k] * r[k];
                    // std = sqrt(var + eps) => d var = d_std / (2 std).
                    let d_var = if clamped[ch * t + k] { S::zero() } else { d_std * r[k] / S::lit(2.0) };
                    let d_m = d_mean - S::lit(2.0) * m[k] * d_var;
                    acc1 += d_m / n;
                    acc2 += d_var / n;
                    r1[k] = acc1;
                    r2[k] = acc2;
                }
                for (row, gxrow) in plane.chunks_exact(t).zip(gxp.chunks_exact_mut(t)) {
                    for k in 0..t {
                        gxrow[k] += r1[k] + S::lit(2.0) * row[k] * r2[k];
                    }
                }
            }
            vec![
                xs.requires_grad().then_some(gx),
                gs.requires_grad().then_some(g_gain),
                bs.requires_grad().then_some(g_shift),
                a_s.requires_grad().then_some(g_slope),
            ]
        }),
    )
}

/// Stacked unidirectional LSTM, gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmStack<S: Scalar> {
    pub input_size: usize,
    pub hidden: usize,
    pub layers: Vec<LstmLayer<S>>,
}

#[derive(Debug, Clone)]
pub struct LstmLayer<S: Scalar> {
    /// `D x 4H`
    pub w_ih: Tensor<S>,
    /// `H x 4H`
    pub w_hh: Tensor<S>,
    /// `4H`; the forget slice starts at 1.
    pub bias: Tensor<S>,
}

impl<S: Scalar> LstmStack<S> {
    pub fn new<R: Rng>(input_size: usize, hidden: usize, num_layers: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d = if l == 0 { input_size } else { hidden };
            let mut bias = vec![S::zero(); 4 * hidden];
            bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = S::one());
            layers.push(LstmLayer {
                w_ih: uniform_param(rng, &[d, 4 * hidden], hidden)?,
                w_hh: uniform_param(rng, &[hidden, 4 * hidden], hidden)?,
                bias: Tensor::param(bias, &[4 * hidden])?,
            });
        }
        Ok(LstmStack { input_size, hidden, layers })
    }

    pub fn param_count(input_size: usize, hidden: usize, num_layers: usize) -> usize {
        (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input_size } else { hidden };
                4 * hidden * (d + hidden + 1)
            })
            .sum()
    }

    /// `T x D` in, `T x H` out; state starts at zero for every call.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 2 || x.shape()[1] != self.input_size {
            return shape_err("lstm", format!("expected T x {}, got {:?}", self.input_size, x.shape()));
        }
        let mut seq = x.clone();
        for layer in &self.layers {
            seq = layer.forward(&seq, self.hidden)?;
        }
        Ok(seq)
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [(format!("{i}.w_ih"), &l.w_ih), (format!("{i}.w_hh"), &l.w_hh), (format!("{i}.bias"), &l.bias)]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{i}.w_ih"), &mut l.w_ih),
                    (format!("{i}.w_hh"), &mut l.w_hh),
                    (format!("{i}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }
}

impl<S: Scalar> LstmLayer<S> {
    fn forward(&self, x: &Tensor<S>, h_dim: usize) -> Result<Tensor<S>> {
        let steps = x.shape()[0];
        let projected = x.matmul(&self.w_ih)?.add(&self.bias)?;
        let mut h = Tensor::zeros(&[1, h_dim]);
        let mut c = Tensor::zeros(&[1, h_dim]);
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gates = projected.slice(0, t..t + 1)?.add(&h.matmul(&self.w_hh)?)?;
            let i = gates.slice(1, 0..h_dim)?.sigmoid()?;
            let f = gates.slice(1, h_dim..2 * h_dim)?.sigmoid()?;
            let g = gates.slice(1, 2 * h_dim..3 * h_dim)?.tanh()?;
            let o = gates.slice(1, 3 * h_dim..4 * h_dim)?.sigmoid()?;
            c = f.mul(&c)?.add(&i.mul(&g)?)?;
            h = o.mul(&c.tanh()?)?;
            outputs.push(h.clone());
        }
        Tensor::concat(&outputs, 0)
    }
}

/// Fully connected layer `y = x W + b` on `N x in` inputs.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear { weight: uniform_param(rng, &[input, output], input)?, bias: uniform_param(rng, &[output], input)? })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Complex multiplication of a noisy spectrogram by a ratio mask.
pub fn apply_mask<S: Scalar>(noisy: &Spectrogram<S>, mask_real: &Tensor<S>, mask_imag: &Tensor<S>) -> Result<Spectrogram<S>> {
    let shape = noisy.real.shape();
    if mask_real.shape() != shape || mask_imag.shape() != shape {
        return shape_err(
            "apply_mask",
            format!("spectrogram {shape:?} vs mask {:?} / {:?}", mask_real.shape(), mask_imag.shape()),
        );
    }
    let (nr, ni) = (&noisy.real, &noisy.imag);
    Ok(Spectrogram {
        real: nr.mul(mask_real)?.sub(&ni.mul(mask_imag)?)?,
        imag: nr.mul(mask_imag)?.add(&ni.mul(mask_real)?)?,
        config: noisy.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T = Tensor<f64>;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
        let n: usize = shape.iter().product();
        T::from_f64(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(), shape).unwrap()
    }

    fn enc_spec(cin: usize, cout: usize, norm_act: bool) -> BlockSpec {
        BlockSpec {
            cin,
            cout,
            kernel: (5, 2),
            geometry: ConvGeometry { stride: (2, 1), pad: (2, 2, 1, 0) },
            kind: ConvKind::Forward,
            norm_act,
        }
    }

    /// Direct complex arithmetic: y[co] = sum_ci (xr + i xi) * (wr + i wi) over the kernel window.
    fn complex_oracle(block: &ComplexConvBlock<f64>, xr: &T, xi: &T) -> (Vec<f64>, Vec<f64>, usize, usize) {
        let s = block.spec;
        let (cin, h, w) = (xr.shape()[0], xr.shape()[1], xr.shape()[2]);
        let (kh, kw) = s.kernel;
        let (oh, ow) = s.geometry.conv_out(h, w, kh, kw).unwrap();
        let (top, _, left, _) = s.geometry.pad;
        let mut yr = vec![0.0; s.cout * oh * ow];
        let mut yi = vec![0.0; s.cout * oh * ow];
        for co in 0..s.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut ar, mut ai) = (block.bias_real.data()[co], block.bias_imag.data()[co]);
                    for ci in 0..cin {
                        for a in 0..kh {
                            for b in 0..kw {
                                let iy = (oy * s.geometry.stride.0 + a) as isize - top as isize;
                                let ix = (ox * s.geometry.stride.1 + b) as isize - left as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                let at = (ci * h + iy as usize) * w + ix as usize;
                                let k = ((co * cin + ci) * kh + a) * kw + b;
                                let (pr, pi) = (xr.data()[at], xi.data()[at]);
                                let (qr, qi) = (block.w_real.data()[k], block.w_imag.data()[k]);
                                ar += pr * qr - pi * qi;
                                ai += pr * qi + pi * qr;
                            }
                        }
                    }
                    yr[(co * oh + oy) * ow + ox] = ar;
                    yi[(co * oh + oy) * ow + ox] = ai;
                }
            }
        }
        (yr, yi, oh, ow)
    }

    #[test]
    fn complex_conv_matches_complex_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ComplexConvBlock::<f64>::new(enc_spec(2, 3, false), &mut rng).unwrap();
        let (xr, xi) = (random(&mut rng, &[2, 9, 6]), random(&mut rng, &[2, 9, 6]));
        let (yr, yi) = block.forward(&xr, &xi).unwrap();
        let (wr, wi, oh, ow) = complex_oracle(&block, &xr, &xi);
        assert_eq!(yr.shape(), &[3, oh, ow]);
        assert_eq!((oh, ow), (5, 6));
        for (a, b) in yr.data().iter().zip(&wr).chain(yi.data().iter().zip(&wi)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_imag_kernel_is_two_real_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = ComplexConvBlock::<f64>::new(enc_spec(1, 2, false), &mut rng).unwrap();
        block.w_imag = T::zeros(block.w_imag.shape());
        block.bias_imag = T::zeros(&[2]);
        block.bias_real = T::zeros(&[2]);
        let (xr, xi) = (random(&mut rng, &[1, 7, 4]), random(&mut rng, &[1, 7, 4]));
        let (yr, yi) = block.forward(&xr, &xi).unwrap();
        let g = block.spec.geometry;
        assert_eq!(yr.data(), xr.conv2d_with(&block.w_real, &g).unwrap().data());
        assert_eq!(yi.data(), xi.conv2d_with(&block.w_real, &g).unwrap().data());
    }

    #[test]
    fn zero_input_gives_activated_normalized_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = ComplexConvBlock::<f64>::new(enc_spec(1, 2, true), &mut rng).unwrap();
        block.bias_real = T::from_f64(&[0.5, -0.4], &[2]).unwrap();
        block.bias_imag = T::from_f64(&[0.1, -1.0], &[2]).unwrap();
        let z = T::zeros(&[1, 9, 5]);
        let (yr, yi) = block.forward(&z, &z).unwrap();
        // A zero map normalizes to zero; the bias is the shift and passes through PReLU.
        let want = [0.5, -0.1, 0.1, -0.25];
        for (c, v) in yr.data().chunks(5 * 5).chain(yi.data().chunks(5 * 5)).enumerate() {
            assert!(v.iter().all(|x| (x - want[c]).abs() < 1e-12), "channel {c}");
        }
    }

    #[test]
    fn complex_conv_is_linear_before_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = ComplexConvBlock::<f64>::new(enc_spec(2, 2, true), &mut rng).unwrap();
        let (a, b) = (random(&mut rng, &[4, 9, 5]), random(&mut rng, &[4, 9, 5]));
        let combo = a.scale(2.0).unwrap().add(&b.scale(-0.5).unwrap()).unwrap();
        let (ya, yb, yc) =
            (block.linear_part(&a).unwrap(), block.linear_part(&b).unwrap(), block.linear_part(&combo).unwrap());
        for i in 0..yc.numel() {
            assert!((yc.data()[i] - (2.0 * ya.data()[i] - 0.5 * yb.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn transposed_block_inverts_frequency_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = BlockSpec {
            cin: 2,
            cout: 1,
            kernel: (5, 2),
            geometry: ConvGeometry { stride: (2, 1), pad: (2, 2, 0, 1) },
            kind: ConvKind::Transposed,
            norm_act: true,
        };
        let block = ComplexConvBlock::<f64>::new(spec, &mut rng).unwrap();
        let y = block.forward_stacked(&random(&mut rng, &[4, 9, 7])).unwrap();
        assert_eq!(y.shape(), &[2, 17, 7]);
    }

    #[test]
    fn block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [ConvKind::Forward, ConvKind::Transposed] {
            let geometry = match kind {
                ConvKind::Forward => ConvGeometry { stride: (2, 1), pad: (2, 2, 1, 0) },
                ConvKind::Transposed => ConvGeometry { stride: (2, 1), pad: (2, 2, 0, 1) },
            };
            let spec = BlockSpec { cin: 2, cout: 2, kernel: (5, 2), geometry, kind, norm_act: true };
            let block = ComplexConvBlock::<f64>::new(spec, &mut rng).unwrap();
            let x = random(&mut rng, &[4, 7, 4]);
            let mut inputs = vec![x];
            inputs.extend(block.params().into_iter().map(|(_, t)| t.detach()));
            let r = grad_check(
                |v| {
                    let mut b = block.clone();
                    for (slot, val) in b.params_mut().into_iter().zip(&v[1..]) {
                        *slot.1 = val.clone();
                    }
                    b.forward_stacked(&v[0])?.square()?.sum()
                },
                &inputs,
                1e-5,
            );
            assert!(r.max_error() < 1e-3, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn fused_norm_prelu_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(&mut rng, &[3, 5, 6]);
        let g = random(&mut rng, &[3, 1, 1]);
        let b = random(&mut rng, &[3, 1, 1]);
        let a = random(&mut rng, &[3, 1, 1]);
        let fused = cumulative_norm_prelu(&x, &g, &b, &a).unwrap();
        let composed = cumulative_norm(&x, &g, &b).unwrap().prelu(&a).unwrap();
        for (u, v) in fused.data().iter().zip(composed.data()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
        let r = grad_check(
            |v| cumulative_norm_prelu(&v[0], &v[1], &v[2], &v[3])?.mul(&v[4])?.sum(),
            &[x, g, b, a, random(&mut rng, &[3, 5, 6])],
            1e-6,
        );
        assert!(r.max_error() < 1e-5, "{r:?}");
    }

    #[test]
    fn fused_norm_handles_constant_frames() {
        // Zero variance in the first frames exercises the clamp branch.
        let mut data = vec![0.3; 2 * 4 * 5];
        data[4] = -0.7;
        data[25] = 1.1;
        let x = T::from_f64(&data, &[2, 4, 5]).unwrap();
        let g = T::ones(&[2, 1, 1]);
        let b = T::zeros(&[2, 1, 1]);
        let a = T::from_f64(&[0.25, 0.25], &[2, 1, 1]).unwrap();
        let fused = cumulative_norm_prelu(&x, &g, &b, &a).unwrap();
        let composed = cumulative_norm(&x, &g, &b).unwrap().prelu(&a).unwrap();
        for (u, v) in fused.data().iter().zip(composed.data()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn norm_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[2, 5, 8]);
        let g = T::ones(&[2, 1, 1]);
        let b = T::zeros(&[2, 1, 1]);
        let full = cumulative_norm(&x, &g, &b).unwrap();
        let head = cumulative_norm(&x.slice(2, 0..5).unwrap(), &g, &b).unwrap();
        for c in 0..2 {
            for f in 0..5 {
                for t in 0..5 {
                    assert_eq!(full.data()[(c * 5 + f) * 8 + t], head.data()[(c * 5 + f) * 5 + t]);
                }
            }
        }
    }

    /// One LSTM cell step written out with plain floats.
    fn cell_oracle(layer: &LstmLayer<f64>, hd: usize, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = layer.bias.to_vec();
        for j in 0..4 * hd {
            for k in 0..d {
                z[j] += x[k] * layer.w_ih.data()[k * 4 * hd + j];
            }
            for k in 0..hd {
                z[j] += h[k] * layer.w_hh.data()[k * 4 * hd + j];
            }
        }
        let mut hn = vec![0.0; hd];
        let mut cn = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (sig(z[k]), sig(z[hd + k]), z[2 * hd + k].tanh(), sig(z[3 * hd + k]));
            cn[k] = f * c[k] + i * g;
            hn[k] = o * cn[k].tanh();
        }
        (hn, cn)
    }

    #[test]
    fn lstm_matches_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = LstmStack::<f64>::new(2, 2, 1, &mut rng).unwrap();
        let x = random(&mut rng, &[3, 2]);
        let y = stack.forward(&x).unwrap();
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 0..3 {
            (h, c) = cell_oracle(&stack.layers[0], 2, &x.data()[t * 2..t * 2 + 2], &h, &c);
            for k in 0..2 {
                assert!((y.data()[t * 2 + k] - h[k]).abs() < 1e-12);
            }
        }
        // T = 1 is a single cell evaluation.
        let y1 = stack.forward(&x.slice(0, 0..1).unwrap()).unwrap();
        let (h1, _) = cell_oracle(&stack.layers[0], 2, &x.data()[0..2], &[0.0; 2], &[0.0; 2]);
        assert!((y1.data()[0] - h1[0]).abs() < 1e-12 && (y1.data()[1] - h1[1]).abs() < 1e-12);
    }

    #[test]
    fn lstm_zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut stack = LstmStack::<f64>::new(3, 4, 2, &mut rng).unwrap();
        for (_, p) in stack.params_mut() {
            *p = T::zeros(p.shape());
        }
        let y = stack.forward(&random(&mut rng, &[5, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[5, 4]);
    }

    #[test]
    fn lstm_forget_bias_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let stack = LstmStack::<f64>::new(3, 4, 2, &mut rng).unwrap();
        assert!(stack.layers[0].bias.data()[4..8].iter().all(|&b| b == 1.0));
        let x = random(&mut rng, &[6, 3]);
        let full = stack.forward(&x).unwrap();
        let head = stack.forward(&x.slice(0, 0..4).unwrap()).unwrap();
        assert_eq!(&full.data()[..16], head.data());
        assert_eq!(LstmStack::<f64>::param_count(3, 4, 2), stack.params().iter().map(|(_, p)| p.numel()).sum());
    }

    #[test]
    fn lstm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stack = LstmStack::<f64>::new(2, 3, 2, &mut rng).unwrap();
        let x = random(&mut rng, &[4, 2]);
        let mut inputs = vec![x];
        inputs.extend(stack.params().into_iter().map(|(_, t)| t.detach()));
        let r = grad_check(
            |v| {
                let mut s = stack.clone();
                for (slot, val) in s.params_mut().into_iter().zip(&v[1..]) {
                    *slot.1 = val.clone();
                }
                s.forward(&v[0])?.square()?.sum()
            },
            &inputs,
            1e-5,
        );
        assert!(r.max_error() < 1e-3, "{r:?}");
    }

    fn spec_of(re: &[f64], im: &[f64]) -> Spectrogram<f64> {
        let cfg = StftConfig::new(8000, 4, 2).unwrap();
        let n = re.len();
        Spectrogram { real: T::from_f64(re, &[1, n]).unwrap(), imag: T::from_f64(im, &[1, n]).unwrap(), config: cfg }
    }

    #[test]
    fn mask_identities() {
        let s = spec_of(&[1.0, -2.0, 0.5], &[3.0, 0.25, -1.0]);
        let one = apply_mask(&s, &T::ones(&[1, 3]), &T::zeros(&[1, 3])).unwrap();
        assert_eq!(one.real.data(), s.real.data());
        assert_eq!(one.imag.data(), s.imag.data());
        let zero = apply_mask(&s, &T::zeros(&[1, 3]), &T::zeros(&[1, 3])).unwrap();
        assert!(zero.real.data().iter().chain(zero.imag.data()).all(|&v| v == 0.0));
        let rot = apply_mask(&s, &T::zeros(&[1, 3]), &T::ones(&[1, 3])).unwrap();
        let neg_im: Vec<f64> = s.imag.data().iter().map(|v| -v).collect();
        assert_eq!(rot.real.data(), &neg_im[..]);
        assert_eq!(rot.imag.data(), s.real.data());
        assert!(apply_mask(&s, &T::ones(&[1, 2]), &T::ones(&[1, 2])).is_err());
    }

    #[test]
    fn complex_concat_groups_parts() {
        let a = T::from_f64(&[1.0, 2.0], &[2, 1, 1]).unwrap();
        let b = T::from_f64(&[3.0, 4.0, 5.0, 6.0], &[4, 1, 1]).unwrap();
        assert_eq!(complex_concat(&a, &b).unwrap().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
