//! Teacher pretraining, direct (supervised) training and distillation loops.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::attention::{at_loss, atkl_loss, compress_tap, CompressedMap, KlDirection, LayerPairing};
use super::objective::{kd_loss, si_snr, si_snr_mix_loss};
use super::optim::{Adam, AdamConfig, LrHalving};
use crate::data::{Clip, Split};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, Model, ModelConfig};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One clean/noisy training example.
#[derive(Debug, Clone)]
pub struct Pair<S: Scalar> {
    pub clean: Tensor<S>,
    pub noisy: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct TrainData<S: Scalar> {
    pub train: Vec<Pair<S>>,
    pub val: Vec<Pair<S>>,
}

impl<S: Scalar> TrainData<S> {
    pub fn from_clips(clips: &[Clip]) -> Result<Self> {
        let mut data = TrainData { train: Vec::new(), val: Vec::new() };
        for c in clips {
            let n = c.clean.len();
            let pair = Pair { clean: Tensor::from_f64(&c.clean, &[n])?, noisy: Tensor::from_f64(&c.noisy, &[n])? };
            match c.info.split {
                Split::Train => data.train.push(pair),
                Split::Val => data.val.push(pair),
            }
        }
        Ok(data)
    }
}

/// Optimization budget shared by every training entry point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds the batch order.
    pub seed: u64,
    /// Steps between validation passes; `None` means once per epoch.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { adam: AdamConfig::default(), steps: 2000, batch_size: 4, seed: 0, eval_every: None }
    }
}

/// Loss hyperparameters of distillation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Exponent of the attention maps.
    pub lambda: f64,
    /// Weight of the hard (clean) label against the soft (teacher) label.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { lambda: 2.0, alpha: 0.5, beta: 1.0, gamma: 1.0, eta: 60.0, kl_direction: KlDirection::default() }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} must lie in [0, 1]", self.alpha)));
        }
        if [self.beta, self.gamma, self.eta].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be positive", self.lambda)));
        }
        Ok(())
    }
}

/// Which losses a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Student trained on clean targets only; no teacher.
    Direct,
    OutputOnly,
    At,
    KlEnc,
    KlDec,
    KlAll,
    AtKl,
}

impl Mode {
    pub const DISTILL: [Mode; 6] = [Mode::OutputOnly, Mode::At, Mode::KlEnc, Mode::KlDec, Mode::KlAll, Mode::AtKl];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::OutputOnly => "output_only",
            Mode::At => "at",
            Mode::KlEnc => "kl_enc",
            Mode::KlDec => "kl_dec",
            Mode::KlAll => "kl_all",
            Mode::AtKl => "at_kl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Mode::Direct].into_iter().chain(Mode::DISTILL).find(|m| m.name() == s).ok_or_else(|| {
            Error::Usage(format!("unknown mode `{s}` (expected output_only, at, kl_enc, kl_dec, kl_all or at_kl)"))
        })
    }

    fn uses_at(self) -> bool {
        matches!(self, Mode::At | Mode::AtKl)
    }

    /// (encoder, decoder) coverage of the KL term.
    fn kl_scope(self) -> (bool, bool) {
        match self {
            Mode::KlEnc => (true, false),
            Mode::KlDec => (false, true),
            Mode::KlAll | Mode::AtKl => (true, true),
            _ => (false, false),
        }
    }

    fn uses_features(self) -> bool {
        let (e, d) = self.kl_scope();
        self.uses_at() || e || d
    }
}

/// Positional layer pairings for the encoder and the decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pub encoder: Vec<LayerPairing>,
    pub decoder: Vec<LayerPairing>,
}

/// Pairs layer `k` with layer `k` on both sides, flagging channel mismatches.
pub fn build_pairing(teacher: &ModelConfig, student: &ModelConfig) -> Result<Pairing> {
    teacher.stft.check_compatible(&student.stft)?;
    if teacher.num_layers() != student.num_layers() {
        return Err(Error::Config(format!(
            "layer-by-layer distillation needs equal depths, got teacher {} vs student {}",
            teacher.num_layers(),
            student.num_layers()
        )));
    }
    if teacher.freq_extents() != student.freq_extents() {
        return Err(Error::Config("teacher and student frequency extents differ".into()));
    }
    let pair = |t: &[usize], s: &[usize]| -> Vec<LayerPairing> {
        (0..t.len())
            .map(|k| LayerPairing { teacher_tap: k, student_tap: k, channel_mismatch: t[k] != s[k] })
            .collect()
    };
    Ok(Pairing {
        encoder: pair(&teacher.enc_channels, &student.enc_channels),
        decoder: pair(&teacher.dec_channels(), &student.dec_channels()),
    })
}

/// Compresses each tap as its pairing requires.
fn compress_taps<S: Scalar>(taps: &[Tensor<S>], pairs: &[LayerPairing], lambda: S, student: bool) -> Result<Vec<CompressedMap<S>>> {
    pairs
        .iter()
        .map(|p| compress_tap(&taps[if student { p.student_tap } else { p.teacher_tap }], p.channel_mismatch, lambda))
        .collect()
}

/// One row of the metrics log; losses are averaged over the steps since the
/// previous row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_kd: f64,
    pub loss_mix: f64,
    pub loss_at: f64,
    pub loss_atkl: f64,
    pub val_sisnr_db: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss_kd,loss_mix,loss_at,loss_atkl,val_sisnr_db,lr";

pub fn write_metrics<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.loss_kd, r.loss_mix, r.loss_at, r.loss_atkl, r.val_sisnr_db, r.lr
        )?;
    }
    Ok(())
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    /// Mean validation SI-SNR of the final parameters, in dB.
    pub final_val_sisnr_db: f64,
    /// Parameters whose gradient was nonzero at one or more steps.
    pub updated: Vec<String>,
    /// Parameters that never saw a nonzero gradient.
    pub never_updated: Vec<String>,
    pub checkpoint: Checkpoint,
}

/// Per-clip SI-SNR of the noisy input and of the model output, in dB.
pub fn evaluate<S: Scalar>(model: &Model<S>, pairs: &[Pair<S>]) -> Result<Vec<(f64, f64)>> {
    let mut frozen = model.clone();
    frozen.freeze();
    pairs
        .iter()
        .map(|p| {
            let noisy = si_snr(&p.noisy, &p.clean)?.item()?.to_f64_lossy();
            let enhanced = si_snr(&frozen.forward(&p.noisy)?, &p.clean)?.item()?.to_f64_lossy();
            Ok((noisy, enhanced))
        })
        .collect()
}

fn mean_val_sisnr<S: Scalar>(model: &Model<S>, val: &[Pair<S>]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let scores = evaluate(model, val)?;
    Ok(scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64)
}

/// Frozen-teacher outputs for one training clip, computed on first use.
struct TeacherTargets<S: Scalar> {
    wave: Tensor<S>,
    enc: Vec<CompressedMap<S>>,
    dec: Vec<CompressedMap<S>>,
}

/// Everything a step needs besides the student itself.
struct Objective<'a, S: Scalar> {
    mode: Mode,
    cfg: DistillConfig,
    teacher: Option<&'a Model<S>>,
    pairing: Option<Pairing>,
    cache: Vec<Option<TeacherTargets<S>>>,
}

/// Loss of one clip: (kd, mix, at, atkl).
type ClipLoss<S> = (Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>);

impl<S: Scalar> Objective<'_, S> {
    fn targets(&mut self, index: usize, pair: &Pair<S>) -> Result<&TeacherTargets<S>> {
        if self.cache[index].is_none() {
            let teacher = self.teacher.expect("distillation objective has a teacher");
            let out = teacher.forward_tapped(&pair.noisy)?;
            let lambda = S::lit(self.cfg.lambda);
            let (enc, dec) = match (&self.pairing, self.mode.uses_features()) {
                (Some(p), true) => (
                    compress_taps(&out.enc_taps, &p.encoder, lambda, false)?,
                    compress_taps(&out.dec_taps, &p.decoder, lambda, false)?,
                ),
                _ => (Vec::new(), Vec::new()),
            };
            let detach = |v: Vec<CompressedMap<S>>| v.iter().map(CompressedMap::detach).collect();
            self.cache[index] = Some(TeacherTargets { wave: out.enhanced_wave.detach(), enc: detach(enc), dec: detach(dec) });
        }
        Ok(self.cache[index].as_ref().unwrap())
    }

    fn clip_loss(&mut self, student: &Model<S>, index: usize, pair: &Pair<S>) -> Result<ClipLoss<S>> {
        let zero = || Tensor::scalar(S::zero());
        let out = student.forward_tapped(&pair.noisy)?;
        if self.mode == Mode::Direct {
            let mix = si_snr(&out.enhanced_wave, &pair.clean)?.neg()?;
            return Ok((mix.clone(), mix, zero(), zero()));
        }
        let cfg = self.cfg;
        let (mode, lambda) = (self.mode, S::lit(cfg.lambda));
        let pairing = self.pairing.clone().expect("distillation objective has a pairing");
        let targets = self.targets(index, pair)?;
        let mix = si_snr_mix_loss(&out.enhanced_wave, &pair.clean, &targets.wave, S::lit(cfg.alpha))?;
        let (mut at, mut atkl) = (zero(), zero());
        if mode.uses_features() {
            let enc = compress_taps(&out.enc_taps, &pairing.encoder, lambda, true)?;
            let dec = compress_taps(&out.dec_taps, &pairing.decoder, lambda, true)?;
            if mode.uses_at() {
                at = at_loss(&targets.enc, &enc, &pairing.encoder)?.add(&at_loss(&targets.dec, &dec, &pairing.decoder)?)?;
            }
            let (kl_enc, kl_dec) = mode.kl_scope();
            if kl_enc {
                atkl = atkl.add(&atkl_loss(&targets.enc, &enc, &pairing.encoder, cfg.kl_direction)?)?;
            }
            if kl_dec {
                atkl = atkl.add(&atkl_loss(&targets.dec, &dec, &pairing.decoder, cfg.kl_direction)?)?;
            }
        }
        let kd = kd_loss(&mix, &at, &atkl, S::lit(cfg.beta), S::lit(cfg.gamma), S::lit(cfg.eta))?;
        Ok((kd, mix, at, atkl))
    }
}

/// Endless shuffled pass over `0..n`, reshuffled each epoch.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        BatchOrder { rng: rng::stream(seed, rng::BATCH), order: (0..n).collect(), pos: n }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn numeric_to_diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { op } => Error::Diverged { step, detail: format!("{op} produced a NaN") },
        other => other,
    }
}

fn run<S: Scalar>(student: &mut Model<S>, data: &TrainData<S>, cfg: &TrainConfig, mut objective: Objective<S>) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let epoch = data.train.len().div_ceil(cfg.batch_size);
    let eval_every = cfg.eval_every.unwrap_or(epoch).max(1);
    student.unfreeze();
    let names: Vec<String> = student.params().into_iter().map(|(n, _)| n).collect();
    let mut touched = vec![false; names.len()];
    let mut adam = Adam::new(cfg.adam);
    let mut halving = LrHalving::default();
    let mut order = BatchOrder::new(data.train.len(), cfg.seed);
    let mut metrics = Vec::new();
    let mut sums = [0.0f64; 4];
    let mut since = 0usize;
    let mut last_val = f64::NAN;

    for step in 1..=cfg.steps {
        let scale = S::lit(1.0 / cfg.batch_size as f64);
        let mut total = Tensor::scalar(S::zero());
        for i in order.next_batch(cfg.batch_size) {
            let parts = objective.clip_loss(student, i, &data.train[i]).map_err(numeric_to_diverged(step))?;
            let values = [&parts.0, &parts.1, &parts.2, &parts.3].map(|t| t.item().map(|v| v.to_f64_lossy()));
            for (acc, v) in sums.iter_mut().zip(values) {
                *acc += v? / cfg.batch_size as f64;
            }
            total = total.add(&parts.0.scale(scale)?)?;
        }
        let loss = total.item()?.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss is {loss}") });
        }
        total.backward()?;
        for ((_, p), seen) in student.params().iter().zip(&mut touched) {
            *seen |= p.grad().is_some_and(|g| g.iter().any(|v| *v != S::zero()));
        }
        adam.step(student.params_mut().into_iter().map(|(_, p)| p).collect())?;
        since += 1;

        if step % eval_every == 0 || step == cfg.steps {
            last_val = mean_val_sisnr(student, &data.val)?;
            let n = since as f64;
            metrics.push(MetricsRow {
                step,
                loss_kd: sums[0] / n,
                loss_mix: sums[1] / n,
                loss_at: sums[2] / n,
                loss_atkl: sums[3] / n,
                val_sisnr_db: last_val,
                lr: adam.lr,
            });
            sums = [0.0; 4];
            since = 0;
            if last_val.is_finite() && halving.observe(-last_val) {
                adam.lr *= 0.5;
            }
        }
    }
    if cfg.steps == 0 {
        last_val = mean_val_sisnr(student, &data.val)?;
    }
    let (mut updated, mut never_updated) = (Vec::new(), Vec::new());
    for (name, seen) in names.into_iter().zip(touched) {
        if seen { updated.push(name) } else { never_updated.push(name) }
    }
    Ok(TrainReport { metrics, final_val_sisnr_db: last_val, updated, never_updated, checkpoint: student.to_checkpoint() })
}

/// Supervised training on clean targets with negative SI-SNR.
pub fn train_direct<S: Scalar>(model: &mut Model<S>, data: &TrainData<S>, cfg: &TrainConfig) -> Result<TrainReport> {
    let objective =
        Objective { mode: Mode::Direct, cfg: DistillConfig::default(), teacher: None, pairing: None, cache: Vec::new() };
    run(model, data, cfg, objective)
}

/// Pretrains the teacher on hard labels; it is frozen afterwards.
pub fn train_teacher<S: Scalar>(teacher: &mut Model<S>, data: &TrainData<S>, cfg: &TrainConfig) -> Result<TrainReport> {
    let report = train_direct(teacher, data, cfg)?;
    teacher.freeze();
    Ok(report)
}

/// Trains `student` against the frozen `teacher` with the losses `mode`
/// enables. The teacher is never modified; [`Mode::Direct`] ignores it.
pub fn run_distillation<S: Scalar>(
    teacher: &Model<S>,
    student: &mut Model<S>,
    data: &TrainData<S>,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<TrainReport> {
    if mode == Mode::Direct {
        return train_direct(student, data, cfg);
    }
    dcfg.validate()?;
    let pairing = build_pairing(teacher.config(), student.config())?;
    let mut frozen = teacher.clone();
    frozen.freeze();
    let objective =
        Objective { mode, cfg: *dcfg, teacher: Some(&frozen), pairing: Some(pairing), cache: (0..data.train.len()).map(|_| None).collect() };
    run(student, data, cfg, objective)
}

/// Loss of one fixed batch under `mode`, for tests and diagnostics.
pub fn batch_loss<S: Scalar>(
    teacher: Option<&Model<S>>,
    student: &Model<S>,
    batch: &[Pair<S>],
    dcfg: &DistillConfig,
    mode: Mode,
) -> Result<Tensor<S>> {
    let pairing = match teacher {
        Some(t) => Some(build_pairing(t.config(), student.config())?),
        None => None,
    };
    if mode != Mode::Direct && teacher.is_none() {
        return Err(Error::Usage(format!("mode {} needs a teacher", mode.name())));
    }
    let mut objective = Objective { mode, cfg: *dcfg, teacher, pairing, cache: (0..batch.len()).map(|_| None).collect() };
    let mut total = Tensor::scalar(S::zero());
    for (i, pair) in batch.iter().enumerate() {
        total = total.add(&objective.clip_loss(student, i, pair)?.0)?;
    }
    total.scale(S::lit(1.0 / batch.len() as f64))
}
