//! Differentiable STFT / inverse STFT with causal framing.
//!
//! The DFT is realized as two fixed real matrices so both directions are plain
//! matrix products on the autodiff tape. Frames start at sample 0 with no
//! centre padding: `T = 1 + floor((L - win_len) / hop_len)`.

use std::f64::consts::PI;

/// Overlap-add normalization floor, relative to the envelope's peak.
const ENVELOPE_FLOOR: f64 = 1e-2;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Framing parameters of one STFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop_len: usize,
    /// FFT length; the window is zero-padded up to it.
    pub fft_size: usize,
}

impl StftConfig {
    /// Config with `fft_size` set to the next power of two at or above `win_len`.
    pub fn new(sample_rate: u32, win_len: usize, hop_len: usize) -> Result<Self> {
        let cfg = StftConfig { sample_rate, win_len, hop_len, fft_size: win_len.next_power_of_two() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len < 2 {
            return Err(Error::Config(format!("win_len {} must be at least 2", self.win_len)));
        }
        if self.hop_len == 0 || self.hop_len > self.win_len {
            return Err(Error::Config(format!("hop_len {} must be in 1..={}", self.hop_len, self.win_len)));
        }
        if self.fft_size < self.win_len || !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "fft_size {} must be a power of two >= win_len {}",
                self.fft_size, self.win_len
            )));
        }
        Ok(())
    }

    /// One-sided frequency extent `fft_size / 2 + 1`.
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for an input of `len` samples, or `None` if shorter than a window.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.win_len).then(|| 1 + (len - self.win_len) / self.hop_len)
    }

    /// Teacher and student STFTs must agree on the frequency axis.
    pub fn check_compatible(&self, other: &StftConfig) -> Result<()> {
        if self.win_len != other.win_len || self.fft_size != other.fft_size || self.sample_rate != other.sample_rate {
            return Err(Error::Config(format!(
                "STFT configs disagree on window/FFT/rate: {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }
}

/// Complex spectrogram stored as real and imaginary `F x T` tensors.
#[derive(Debug, Clone)]
pub struct Spectrogram<S: Scalar> {
    pub real: Tensor<S>,
    pub imag: Tensor<S>,
    pub config: StftConfig,
}

impl<S: Scalar> Spectrogram<S> {
    pub fn frames(&self) -> usize {
        self.real.shape()[1]
    }

    /// |X|^2 per bin, `F x T`.
    pub fn power(&self) -> Result<Tensor<S>> {
        self.real.square()?.add(&self.imag.square()?)
    }
}

/// Periodic Hann window, `w[n] = 0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann<S: Scalar>(win_len: usize) -> Tensor<S> {
    Tensor::vector(hann_f64(win_len).into_iter().map(S::lit).collect())
}

fn hann_f64(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Precomputed analysis and synthesis matrices for one [`StftConfig`].
#[derive(Clone)]
pub struct Stft<S: Scalar> {
    config: StftConfig,
    window: Tensor<S>,
    /// `win_len x 2F`: `[cos | -sin]`
    analysis: Tensor<S>,
    /// `2F x win_len`: one-sided inverse DFT rows for real then imaginary parts.
    synthesis: Tensor<S>,
}

impl<S: Scalar> Stft<S> {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let (n, nfft, f) = (config.win_len, config.fft_size, config.freq_bins());
        let angle = |k: usize, t: usize| 2.0 * PI * ((k * t) % nfft) as f64 / nfft as f64;
        let mut analysis = vec![S::zero(); n * 2 * f];
        for t in 0..n {
            for k in 0..f {
                analysis[t * 2 * f + k] = S::lit(angle(k, t).cos());
                analysis[t * 2 * f + f + k] = S::lit(-angle(k, t).sin());
            }
        }
        let mut synthesis = vec![S::zero(); 2 * f * n];
        for k in 0..f {
            let weight = if k == 0 || 2 * k == nfft { 1.0 } else { 2.0 } / nfft as f64;
            for t in 0..n {
                synthesis[k * n + t] = S::lit(weight * angle(k, t).cos());
                synthesis[(f + k) * n + t] = S::lit(-weight * angle(k, t).sin());
            }
        }
        Ok(Stft {
            config,
            window: hann(n),
            analysis: Tensor::new(analysis, &[n, 2 * f])?,
            synthesis: Tensor::new(synthesis, &[2 * f, n])?,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn forward(&self, wave: &Tensor<S>) -> Result<Spectrogram<S>> {
        let cfg = self.config;
        let len = match *wave.shape() {
            [l] => l,
            _ => return shape_err("stft", format!("expected a 1-D waveform, got {:?}", wave.shape())),
        };
        let frames = cfg.num_frames(len).ok_or(Error::InputTooShort { len, min: cfg.win_len })?;
        let f = cfg.freq_bins();
        let framed = frame(wave, cfg.win_len, cfg.hop_len, frames)?.mul(&self.window)?;
        let spec = framed.matmul(&self.analysis)?; // T x 2F
        Ok(Spectrogram {
            real: spec.slice(1, 0..f)?.transpose()?,
            imag: spec.slice(1, f..2 * f)?.transpose()?,
            config: cfg,
        })
    }

    pub fn inverse(&self, spec: &Spectrogram<S>, out_len: usize) -> Result<Tensor<S>> {
        let cfg = self.config;
        let f = cfg.freq_bins();
        let shape = spec.real.shape();
        if shape.len() != 2 || shape[0] != f || spec.imag.shape() != shape {
            return shape_err(
                "istft",
                format!("expected real/imag of {f} x T, got {:?} / {:?}", shape, spec.imag.shape()),
            );
        }
        let frames = shape[1];
        let stacked = Tensor::concat(&[spec.real.transpose()?, spec.imag.transpose()?], 1)?; // T x 2F
        let segments = stacked.matmul(&self.synthesis)?.mul(&self.window)?; // T x win
        let summed = overlap_add(&segments, cfg.hop_len, out_len)?;
        summed.mul(&inverse_envelope::<S>(&cfg, frames, out_len))
    }
}

/// Analysis with a fresh basis; prefer a cached [`Stft`] in loops.
pub fn stft<S: Scalar>(wave: &Tensor<S>, cfg: &StftConfig) -> Result<Spectrogram<S>> {
    Stft::new(*cfg)?.forward(wave)
}

/// Synthesis to exactly `out_len` samples (zero beyond the last frame).
pub fn istft<S: Scalar>(spec: &Spectrogram<S>, cfg: &StftConfig, out_len: usize) -> Result<Tensor<S>> {
    Stft::new(*cfg)?.inverse(spec, out_len)
}

/// `frames x win` matrix of overlapping windows of `wave`.
fn frame<S: Scalar>(wave: &Tensor<S>, win: usize, hop: usize, frames: usize) -> Result<Tensor<S>> {
    let len = wave.numel();
    let x = wave.data();
    let mut out = Vec::with_capacity(frames * win);
    for t in 0..frames {
        out.extend_from_slice(&x[t * hop..t * hop + win]);
    }
    Ok(Tensor::from_op(
        "frame",
        out,
        vec![frames, win],
        vec![wave.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![S::zero(); len];
            for t in 0..frames {
                for (a, &b) in gx[t * hop..t * hop + win].iter_mut().zip(&g[t * win..(t + 1) * win]) {
                    *a += b;
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Sums `frames x win` segments at stride `hop` into `out_len` samples.
fn overlap_add<S: Scalar>(segments: &Tensor<S>, hop: usize, out_len: usize) -> Result<Tensor<S>> {
    let (frames, win) = match *segments.shape() {
        [t, w] => (t, w),
        _ => return shape_err("overlap_add", "expected a matrix of frames"),
    };
    let mut out = vec![S::zero(); out_len];
    let seg = segments.data();
    for t in 0..frames {
        for n in 0..win {
            let at = t * hop + n;
            if at < out_len {
                out[at] += seg[t * win + n];
            }
        }
    }
    Ok(Tensor::from_op(
        "overlap_add",
        out,
        vec![out_len],
        vec![segments.clone()],
        Box::new(move |g, _| {
            let mut gs = vec![S::zero(); frames * win];
            for t in 0..frames {
                for n in 0..win {
                    let at = t * hop + n;
                    if at < out_len {
                        gs[t * win + n] = g[at];
                    }
                }
            }
            vec![Some(gs)]
        }),
    ))
}

/// Reciprocal of the summed squared window, zero where no window reaches.
fn inverse_envelope<S: Scalar>(cfg: &StftConfig, frames: usize, out_len: usize) -> Tensor<S> {
    let w = hann_f64(cfg.win_len);
    let mut env = vec![0.0f64; out_len];
    for t in 0..frames {
        for (n, wn) in w.iter().enumerate() {
            if let Some(e) = env.get_mut(t * cfg.hop_len + n) {
                *e += wn * wn;
            }
        }
    }
    // Near the signal edges only a window's tapering tail covers a sample, and
    // dividing by its tiny squared weight would amplify any inconsistency in a
    // modified spectrogram by orders of magnitude.
    let floor = ENVELOPE_FLOOR * env.iter().copied().fold(0.0, f64::max);
    Tensor::vector(env.into_iter().map(|e| S::lit(if e > 0.0 { 1.0 / e.max(floor) } else { 0.0 })).collect())
}
