//! Tapped complex U-Nets: STFT front end, complex convolution encoder, LSTM
//! bottleneck, transposed-convolution decoder with skip connections, and a
//! complex ratio mask.
//!
//! Channel counts in [`ModelConfig::enc_channels`] are totals over the real and
//! imaginary halves, so a layer listed as 16 carries 8 complex channels and its
//! tap has 16 stacked real channels.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;

use crate::error::{shape_err, Error, Result};
use crate::nn::{apply_mask, complex_concat, BlockSpec, ComplexConvBlock, ConvKind, Linear, LstmStack};
use crate::scalar::Scalar;
use crate::signal::{Spectrogram, Stft, StftConfig};
use crate::tensor::{ConvGeometry, Tensor};

/// (frequency, time)
pub const KERNEL: (usize, usize) = (5, 2);
const STRIDE: (usize, usize) = (2, 1);
/// Encoder pads one frame on the past side only.
const ENC_PAD: (usize, usize, usize, usize) = (2, 2, 1, 0);
/// The decoder crops the trailing frame that would look into the future.
const DEC_PAD: (usize, usize, usize, usize) = (2, 2, 0, 1);

/// Architecture hyperparameters of one U-Net.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub stft: StftConfig,
    /// Stacked (real + imaginary) channels per encoder layer; the decoder mirrors them.
    pub enc_channels: Vec<usize>,
    /// Zero disables the recurrent bottleneck.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

impl ModelConfig {
    fn desk_stft(hop: usize) -> StftConfig {
        StftConfig { sample_rate: 8000, win_len: 256, hop_len: hop, fft_size: 256 }
    }

    fn full_stft(hop: usize) -> StftConfig {
        StftConfig { sample_rate: 16000, win_len: 400, hop_len: hop, fft_size: 512 }
    }

    pub fn desk_teacher() -> Self {
        ModelConfig { stft: Self::desk_stft(128), enc_channels: vec![8, 16, 32, 64], lstm_hidden: 32, lstm_layers: 2 }
    }

    pub fn desk_student() -> Self {
        ModelConfig { stft: Self::desk_stft(80), enc_channels: vec![8, 16, 16, 32], lstm_hidden: 16, lstm_layers: 2 }
    }

    /// 16 kHz student with a 6.25 ms hop (100 samples).
    pub fn full_student() -> Self {
        ModelConfig {
            stft: Self::full_stft(100),
            enc_channels: vec![16, 32, 64, 64, 128, 256],
            lstm_hidden: 64,
            lstm_layers: 2,
        }
    }

    /// 16 kHz teacher: the larger channel plan with a 10 ms hop (160 samples).
    pub fn full_teacher() -> Self {
        ModelConfig {
            stft: Self::full_stft(160),
            enc_channels: vec![16, 32, 64, 128, 256, 256],
            lstm_hidden: 256,
            lstm_layers: 2,
        }
    }

    /// The DCCRN-sized baseline the student is compared against.
    pub fn dccrn() -> Self {
        ModelConfig {
            stft: Self::full_stft(100),
            enc_channels: vec![16, 32, 64, 128, 256, 256],
            lstm_hidden: 256,
            lstm_layers: 2,
        }
    }

    /// Two-layer 32-point model small enough for finite-difference checks.
    pub fn tiny_student() -> Self {
        ModelConfig {
            stft: StftConfig { sample_rate: 8000, win_len: 32, hop_len: 10, fft_size: 32 },
            enc_channels: vec![4, 4],
            lstm_hidden: 4,
            lstm_layers: 1,
        }
    }

    /// Pairs with [`ModelConfig::tiny_student`]: wider second layer, longer hop.
    pub fn tiny_teacher() -> Self {
        ModelConfig {
            stft: StftConfig { hop_len: 16, ..Self::tiny_student().stft },
            enc_channels: vec![4, 8],
            lstm_hidden: 6,
            lstm_layers: 1,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.enc_channels.len()
    }

    fn complex_channels(&self) -> Vec<usize> {
        self.enc_channels.iter().map(|c| c / 2).collect()
    }

    /// Frequency extent at the input and after every encoder layer.
    pub fn freq_extents(&self) -> Vec<usize> {
        let mut f = vec![self.stft.freq_bins()];
        for _ in &self.enc_channels {
            let last = *f.last().unwrap();
            f.push((last - 1) / STRIDE.0 + 1);
        }
        f
    }

    /// Width of the flattened bottleneck feature (`channels x frequency`).
    pub fn bottleneck_width(&self) -> usize {
        match (self.enc_channels.last(), self.freq_extents().last()) {
            (Some(c), Some(f)) => c * f,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.enc_channels.is_empty() {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if let Some(c) = self.enc_channels.iter().find(|&&c| c < 2 || c % 2 != 0) {
            return Err(Error::Config(format!("channel count {c} must be a positive even number")));
        }
        if (self.lstm_hidden == 0) != (self.lstm_layers == 0) {
            return Err(Error::Config("lstm_hidden and lstm_layers must both be zero or both positive".into()));
        }
        // The decoder maps f to 2f - 1; every level it restores must be odd.
        let f = self.freq_extents();
        if let Some(k) = (0..self.num_layers()).find(|&k| f[k] % 2 == 0 || f[k] < 3) {
            return Err(Error::Config(format!(
                "frequency extent {} entering encoder layer {k} collapses under stride {}; use fewer layers or a larger FFT",
                f[k], STRIDE.0
            )));
        }
        Ok(())
    }

    fn encoder_specs(&self) -> Vec<BlockSpec> {
        let c = self.complex_channels();
        let geometry = ConvGeometry { stride: STRIDE, pad: ENC_PAD };
        (0..c.len())
            .map(|k| BlockSpec {
                cin: if k == 0 { 1 } else { c[k - 1] },
                cout: c[k],
                kernel: KERNEL,
                geometry,
                kind: ConvKind::Forward,
                norm_act: true,
            })
            .collect()
    }

    /// Decoder layer `j` consumes its predecessor joined with encoder tap `L-1-j`
    /// and emits the channel count of encoder layer `L-2-j` (layer 0 for the last).
    fn decoder_specs(&self) -> Vec<BlockSpec> {
        let c = self.complex_channels();
        let l = c.len();
        let geometry = ConvGeometry { stride: STRIDE, pad: DEC_PAD };
        let mut prev = c[l - 1];
        (0..l)
            .map(|j| {
                let cout = if j + 1 < l { c[l - 2 - j] } else { c[0] };
                let spec = BlockSpec {
                    cin: prev + c[l - 1 - j],
                    cout,
                    kernel: KERNEL,
                    geometry,
                    kind: ConvKind::Transposed,
                    norm_act: true,
                };
                prev = cout;
                spec
            })
            .collect()
    }

    fn mask_spec(&self) -> BlockSpec {
        BlockSpec {
            cin: self.enc_channels[0] / 2,
            cout: 1,
            kernel: (1, 1),
            geometry: ConvGeometry::symmetric((1, 1), (0, 0)),
            kind: ConvKind::Forward,
            norm_act: false,
        }
    }

    /// Decoder stacked channel extents, in decoder order.
    pub fn dec_channels(&self) -> Vec<usize> {
        self.decoder_specs().iter().map(|s| 2 * s.cout).collect()
    }
}

/// Exact number of scalar parameters [`build_model`] would create; zero for a
/// config without layers.
pub fn count_params(cfg: &ModelConfig) -> usize {
    if cfg.enc_channels.is_empty() {
        return 0;
    }
    let blocks: usize = cfg.encoder_specs().iter().chain(&cfg.decoder_specs()).map(BlockSpec::param_count).sum();
    let recurrent = if cfg.lstm_layers > 0 {
        let d = cfg.bottleneck_width();
        LstmStack::<f32>::param_count(d, cfg.lstm_hidden, cfg.lstm_layers) + cfg.lstm_hidden * d + d
    } else {
        0
    };
    blocks + recurrent + cfg.mask_spec().param_count()
}

/// LSTM over flattened frames followed by a projection back to the feature width.
#[derive(Debug, Clone)]
pub struct Bottleneck<S: Scalar> {
    pub lstm: LstmStack<S>,
    pub proj: Linear<S>,
}

/// One U-Net. Parameters are plain tensors; [`Model::freeze`] turns them into
/// constants so a forward pass records no graph.
#[derive(Clone)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    stft: Stft<S>,
    pub encoder: Vec<ComplexConvBlock<S>>,
    pub bottleneck: Option<Bottleneck<S>>,
    pub decoder: Vec<ComplexConvBlock<S>>,
    pub mask: ComplexConvBlock<S>,
}

impl<S: Scalar> std::fmt::Debug for Model<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).field("params", &self.num_params()).finish()
    }
}

/// Enhanced waveform plus post-activation block outputs, stacked `2C x F x T`.
#[derive(Debug, Clone)]
pub struct TappedForward<S: Scalar> {
    pub enhanced_wave: Tensor<S>,
    pub enc_taps: Vec<Tensor<S>>,
    pub dec_taps: Vec<Tensor<S>>,
}

/// Shrinks the mask head's initial weights so the initial mask is close to its bias.
const MASK_INIT_SCALE: f64 = 0.01;

/// Builds a model with deterministic fan-in uniform initialization.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = cfg.encoder_specs().into_iter().map(|s| ComplexConvBlock::new(s, &mut rng)).collect::<Result<_>>()?;
    let bottleneck = if cfg.lstm_layers > 0 {
        let d = cfg.bottleneck_width();
        Some(Bottleneck {
            lstm: LstmStack::new(d, cfg.lstm_hidden, cfg.lstm_layers, &mut rng)?,
            proj: Linear::new(cfg.lstm_hidden, d, &mut rng)?,
        })
    } else {
        None
    };
    let decoder = cfg.decoder_specs().into_iter().map(|s| ComplexConvBlock::new(s, &mut rng)).collect::<Result<_>>()?;
    let mut mask = ComplexConvBlock::new(cfg.mask_spec(), &mut rng)?;
    // Start near the identity mask (1 + 0i): a random complex mask scrambles the
    // phase of every bin and leaves training to first undo that.
    mask.w_real = mask.w_real.scale(S::lit(MASK_INIT_SCALE))?.detach().tracked();
    mask.w_imag = mask.w_imag.scale(S::lit(MASK_INIT_SCALE))?.detach().tracked();
    mask.bias_real = Tensor::param(vec![S::one()], &[1])?;
    mask.bias_imag = Tensor::param(vec![S::zero()], &[1])?;
    Ok(Model { config: cfg.clone(), stft: Stft::new(cfg.stft)?, encoder, bottleneck, decoder, mask })
}

impl<S: Scalar> Model<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stft(&self) -> &Stft<S> {
        &self.stft
    }

    pub fn forward(&self, noisy: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward_tapped(noisy)?.enhanced_wave)
    }

    pub fn forward_tapped(&self, noisy: &Tensor<S>) -> Result<TappedForward<S>> {
        let len = match *noisy.shape() {
            [l] => l,
            _ => return shape_err("model", format!("expected a 1-D waveform, got {:?}", noisy.shape())),
        };
        let spec = self.stft.forward(noisy)?;
        let (f, t) = (spec.real.shape()[0], spec.frames());
        let mut x = Tensor::concat(&[spec.real.reshape(&[1, f, t])?, spec.imag.reshape(&[1, f, t])?], 0)?;

        let mut enc_taps = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward_stacked(&x)?;
            enc_taps.push(x.clone());
        }

        if let Some(b) = &self.bottleneck {
            let (c, fb) = (x.shape()[0], x.shape()[1]);
            let frames = x.reshape(&[c * fb, t])?.transpose()?;
            let y = b.proj.forward(&b.lstm.forward(&frames)?)?;
            x = y.transpose()?.reshape(&[c, fb, t])?;
        }

        let mut dec_taps = Vec::with_capacity(self.decoder.len());
        for (j, block) in self.decoder.iter().enumerate() {
            let skip = &enc_taps[enc_taps.len() - 1 - j];
            x = block.forward_stacked(&complex_concat(&x, skip)?)?;
            dec_taps.push(x.clone());
        }

        let m = self.mask.forward_stacked(&x)?;
        let masked = apply_mask(&spec, &m.slice(0, 0..1)?.reshape(&[f, t])?, &m.slice(0, 1..2)?.reshape(&[f, t])?)?;
        let enhanced_wave = self.stft.inverse(&masked, len)?;
        Ok(TappedForward { enhanced_wave, enc_taps, dec_taps })
    }

    /// Enhanced spectrogram without synthesis, mainly for inspection.
    pub fn enhance_spectrogram(&self, noisy: &Tensor<S>) -> Result<Spectrogram<S>> {
        self.stft.forward(&self.forward(noisy)?)
    }

    /// Parameters with stable dotted names, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("enc.{i}.{n}"), t)));
        }
        if let Some(b) = &self.bottleneck {
            out.extend(b.lstm.params().into_iter().map(|(n, t)| (format!("lstm.{n}"), t)));
            out.push(("proj.weight".into(), &b.proj.weight));
            out.push(("proj.bias".into(), &b.proj.bias));
        }
        for (i, b) in self.decoder.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("dec.{i}.{n}"), t)));
        }
        out.extend(self.mask.params().into_iter().map(|(n, t)| (format!("mask.{n}"), t)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|(n, t)| (format!("enc.{i}.{n}"), t)));
        }
        if let Some(b) = &mut self.bottleneck {
            out.extend(b.lstm.params_mut().into_iter().map(|(n, t)| (format!("lstm.{n}"), t)));
            out.push(("proj.weight".into(), &mut b.proj.weight));
            out.push(("proj.bias".into(), &mut b.proj.bias));
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|(n, t)| (format!("dec.{i}.{n}"), t)));
        }
        out.extend(self.mask.params_mut().into_iter().map(|(n, t)| (format!("mask.{n}"), t)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Detaches every parameter: forward passes build no graph and no
    /// gradient can reach the weights.
    pub fn freeze(&mut self) {
        for (_, p) in self.params_mut() {
            *p = p.detach();
        }
    }

    pub fn unfreeze(&mut self) {
        for (_, p) in self.params_mut() {
            *p = p.detach().tracked();
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|(_, p)| !p.requires_grad())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec(), t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()))
                .collect(),
        }
    }

    /// Replaces every parameter with the checkpoint's value; names and extents
    /// must match exactly. Trainability is preserved per parameter.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                ckpt.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), (cname, shape, _)) in slots.iter_mut().zip(&ckpt.tensors) {
            if name != cname || slot.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {:?}, found {cname} {shape:?}",
                    slot.shape()
                )));
            }
        }
        for ((_, slot), (_, shape, data)) in slots.into_iter().zip(&ckpt.tensors) {
            let values = data.iter().map(|&v| S::lit(v as f64)).collect();
            let fresh = Tensor::new(values, shape)?;
            *slot = if slot.requires_grad() { fresh.tracked() } else { fresh };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
