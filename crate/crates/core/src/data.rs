//! Deterministic synthetic clean/noisy mixtures and PCM16 mono WAV I/O.
//!
//! Clean signals are tonal with slow amplitude envelopes, so an enhancer has
//! structure to exploit; noise is white or pink Gaussian. Every clip is a pure
//! function of its own seed.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest absolute sample after normalization.
pub const PEAK: f64 = 0.9;
const MIN_FREQ: f64 = 100.0;
const MAX_FREQ: f64 = 3500.0;
/// Pole of the one-pole pink-noise shaping filter (see [`NoiseKind::Pink`]).
const PINK_POLE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CleanKind {
    /// 2-4 steady partials with independent slow envelopes.
    MultiTone,
    /// A linear chirp plus its second harmonic, low-pass filtered, under one envelope.
    ToneSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// White noise through `y[n] = x[n] + 0.9 y[n-1]`: a first-order
    /// approximation that tilts power toward low frequencies.
    Pink,
}

/// Everything needed to regenerate one clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub sample_rate: u32,
    pub duration: f64,
    /// `f64::INFINITY` means no noise.
    pub snr_db: f64,
    pub clean_kind: CleanKind,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn len(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Slow raised-sine envelope in `[0.2, 1]`.
fn envelope(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let rate = rng.random_range(0.5..4.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..len).map(|n| 0.6 + 0.4 * (2.0 * PI * rate * n as f64 / sr + phase).sin()).collect()
}

fn clean_signal(spec: &MixtureSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (len, sr) = (spec.len(), spec.sample_rate as f64);
    let top = MAX_FREQ.min(0.45 * sr);
    match spec.clean_kind {
        CleanKind::MultiTone => {
            let mut out = vec![0.0; len];
            for _ in 0..rng.random_range(2..=4) {
                let freq = rng.random_range(MIN_FREQ..top);
                let amp = rng.random_range(0.3..1.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let env = envelope(rng, len, sr);
                for (n, o) in out.iter_mut().enumerate() {
                    *o += amp * env[n] * (2.0 * PI * freq * n as f64 / sr + phase).sin();
                }
            }
            out
        }
        CleanKind::ToneSweep => {
            let f0 = rng.random_range(MIN_FREQ..top / 2.0);
            let f1 = rng.random_range(MIN_FREQ..top / 2.0);
            let dur = len as f64 / sr;
            let env = envelope(rng, len, sr);
            let smooth = rng.random_range(0.2..0.6);
            let mut state = 0.0;
            (0..len)
                .map(|n| {
                    let t = n as f64 / sr;
                    // Phase of a linear chirp from f0 to f1 over the clip.
                    let phi = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t / dur);
                    let x = env[n] * (phi.sin() + 0.5 * (2.0 * phi).sin());
                    state = smooth * state + (1.0 - smooth) * x;
                    state
                })
                .collect()
        }
    }
}

fn noise_signal(kind: NoiseKind, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white = (0..len).map(|_| StandardNormal.sample(rng));
    match kind {
        NoiseKind::White => white.collect(),
        NoiseKind::Pink => {
            let mut y = 0.0;
            white
                .map(|x: f64| {
                    y = x + PINK_POLE * y;
                    y
                })
                .collect()
        }
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Clean/noisy pair in double precision; see [`synth_pair`].
pub fn synth_pair_f64(spec: &MixtureSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    if spec.is_empty() || spec.sample_rate == 0 {
        return Err(Error::Config(format!("mixture of {} samples at {} Hz", spec.len(), spec.sample_rate)));
    }
    if spec.snr_db.is_nan() || spec.snr_db == f64::NEG_INFINITY {
        return Err(Error::Config(format!("snr_db {} is not usable", spec.snr_db)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clean = clean_signal(spec, &mut rng);
    let noisy: Vec<f64> = if spec.snr_db.is_infinite() {
        clean.clone()
    } else {
        let noise = noise_signal(spec.noise_kind, clean.len(), &mut rng);
        let gain = (power(&clean) / (power(&noise) * 10f64.powf(spec.snr_db / 10.0))).sqrt();
        clean.iter().zip(&noise).map(|(c, n)| c + gain * n).collect()
    };
    let peak = clean.iter().chain(&noisy).fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if peak > 0.0 { PEAK / peak } else { 1.0 };
    Ok((clean.iter().map(|v| v * norm).collect(), noisy.iter().map(|v| v * norm).collect()))
}

/// Seeded clean signal and its mixture with noise at exactly `snr_db`. Both are
/// scaled by one common factor so the louder of the two peaks at 0.9.
pub fn synth_pair<S: Scalar>(spec: &MixtureSpec) -> Result<(Tensor<S>, Tensor<S>)> {
    let (clean, noisy) = synth_pair_f64(spec)?;
    let n = clean.len();
    Ok((Tensor::from_f64(&clean, &[n])?, Tensor::from_f64(&noisy, &[n])?))
}

/// `10 log10(P_clean / P_(noisy - clean))`.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let residual: Vec<f64> = noisy.iter().zip(clean).map(|(n, c)| n - c).collect();
    10.0 * (power(clean) / power(&residual)).log10()
}

/// Reads a RIFF/WAVE PCM16 mono file as samples in `[-1, 1)`.
pub fn load_wav<S: Scalar>(path: impl AsRef<Path>) -> Result<(Tensor<S>, u32)> {
    // Reading the bytes up front keeps genuine I/O failures apart from
    // truncation, which hound reports as I/O errors too.
    let bytes = std::fs::read(path)?;
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(parse_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{} channels; only mono is supported", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} with {} bits per sample; only 16-bit PCM is supported",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| S::lit(v as f64 / 32768.0)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(parse_err)?;
    if samples.is_empty() {
        return Err(Error::Parse("WAV file contains no samples".into()));
    }
    let n = samples.len();
    Ok((Tensor::new(samples, &[n])?, spec.sample_rate))
}

/// Quantizes to PCM16 (round half away from zero, clamped) and writes a mono WAV.
pub fn save_wav<S: Scalar>(path: impl AsRef<Path>, wave: &Tensor<S>, sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut writer = hound::WavWriter::create(path, spec).map_err(hound_err)?;
    for v in wave.data() {
        writer.write_sample(quantize(v.to_f64_lossy())).map_err(hound_err)?;
    }
    writer.finalize().map_err(hound_err)
}

fn quantize(v: f64) -> i16 {
    if v.is_nan() {
        return 0;
    }
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Errors while decoding an in-memory file: any I/O error means truncation.
fn parse_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Parse(format!("truncated WAV: {io}")),
        other => hound_err(other),
    }
}

fn hound_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(m) => Error::Parse(m.to_string()),
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAV encoding".into()),
        other => Error::Parse(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// How a dataset draws its clips. Each clip picks its SNR and signal kinds from
/// its own seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub sample_rate: u32,
    pub duration: f64,
    /// Inclusive range the per-clip SNR is drawn from, in dB.
    pub snr_db: (f64, f64),
    pub clean_kinds: Vec<CleanKind>,
    pub noise_kinds: Vec<NoiseKind>,
}

impl DatasetSpec {
    /// 1 s clips at 8 kHz, SNR drawn from [-5, 5] dB, every signal kind.
    pub fn desk() -> Self {
        DatasetSpec {
            sample_rate: 8000,
            duration: 1.0,
            snr_db: (-5.0, 5.0),
            clean_kinds: vec![CleanKind::MultiTone, CleanKind::ToneSweep],
            noise_kinds: vec![NoiseKind::White, NoiseKind::Pink],
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipInfo {
    pub index: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub info: ClipInfo,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
}

/// Number of validation clips: the last tenth by index, at least one.
pub fn val_count(n: usize) -> usize {
    ((n as f64 / 10.0).round() as usize).max(1)
}

/// Mixture spec of clip `index`; depends only on `base_seed + index`.
pub fn clip_spec(spec: &DatasetSpec, base_seed: u64, index: usize) -> Result<MixtureSpec> {
    if spec.clean_kinds.is_empty() || spec.noise_kinds.is_empty() {
        return Err(Error::Config("dataset needs at least one clean and one noise kind".into()));
    }
    let (lo, hi) = spec.snr_db;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("bad SNR range {lo}..={hi}")));
    }
    let seed = base_seed.wrapping_add(index as u64);
    // A separate generator from the signal's so the choice of kinds does not
    // shift the waveform draws.
    let mut pick = ChaCha8Rng::seed_from_u64(crate::rng::derive(seed, "mixture"));
    let snr_db = if lo == hi { lo } else { pick.random_range(lo..=hi) };
    Ok(MixtureSpec {
        sample_rate: spec.sample_rate,
        duration: spec.duration,
        snr_db,
        clean_kind: spec.clean_kinds[pick.random_range(0..spec.clean_kinds.len())],
        noise_kind: spec.noise_kinds[pick.random_range(0..spec.noise_kinds.len())],
        seed,
    })
}

/// Clips with seeds `base_seed..base_seed + n`, split 90/10 by index.
pub fn make_dataset(n: usize, base_seed: u64, spec: &DatasetSpec) -> Result<Vec<Clip>> {
    if n < 2 {
        return Err(Error::Config(format!("a dataset needs at least 2 clips, got {n}")));
    }
    let first_val = n - val_count(n);
    (0..n)
        .map(|index| {
            let mix = clip_spec(spec, base_seed, index)?;
            let (clean, noisy) = synth_pair_f64(&mix)?;
            let split = if index >= first_val { Split::Val } else { Split::Train };
            Ok(Clip { info: ClipInfo { index, seed: mix.seed, snr_db: mix.snr_db, split }, clean, noisy })
        })
        .collect()
}

pub const MANIFEST_HEADER: &str = "index,seed,snr_db,split";

pub fn write_manifest<W: Write>(mut out: W, rows: &[ClipInfo]) -> Result<()> {
    writeln!(out, "{MANIFEST_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.index, r.seed, r.snr_db, r.split.as_str())?;
    }
    Ok(())
}

pub fn read_manifest(text: &str) -> Result<Vec<ClipInfo>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Parse(format!("manifest must start with `{MANIFEST_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Parse(format!("bad manifest row `{line}`"));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ClipInfo {
                index: f[0].parse().map_err(|_| bad())?,
                seed: f[1].parse().map_err(|_| bad())?,
                snr_db: f[2].parse().map_err(|_| bad())?,
                split: match f[3] {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    _ => return Err(bad()),
                },
            })
        })
        .collect()
}

pub fn clean_file_name(index: usize) -> String {
    format!("clean_{index:05}.wav")
}

pub fn noisy_file_name(index: usize) -> String {
    format!("noisy_{index:05}.wav")
}
