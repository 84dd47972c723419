//! Experiment configuration, read from TOML.
//!
//! Dialect: plain TOML. Top-level `seeds` (non-empty integer array) plus the
//! sections below. Keys fall back to the desk-scale defaults, so an empty file
//! is a valid config; a model section, when present, must be given in full.
//!
//! ```toml
//! seeds = [1, 2, 3]
//!
//! [paths]            # relative paths resolve against the workdir
//! workdir = "."      # overridden by ATKL_WORKDIR, then by --workdir
//! data = "data"
//! checkpoints = "checkpoints"
//! metrics = "metrics"
//!
//! [data]
//! clips = 200        # last round(clips / 10) are validation
//! seed = 0
//! sample_rate = 8000
//! duration = 1.0     # seconds
//! snr_db = [-5.0, 5.0]
//! clean_kinds = ["multi_tone", "tone_sweep"]
//! noise_kinds = ["white", "pink"]
//!
//! [teacher]          # also [student]; [full_scale.{teacher,student,dccrn}] for count-params
//! sample_rate = 8000
//! win_len = 256
//! hop_len = 128
//! fft_size = 256
//! enc_channels = [8, 16, 32, 64]
//! lstm_hidden = 32
//! lstm_layers = 2
//!
//! [distill]
//! lambda = 2.0
//! alpha = 0.5
//! beta = 1.0
//! gamma = 1.0
//! eta = 60.0
//! kl_direction = "student_to_teacher"   # or "teacher_to_student"
//!
//! [optim]
//! lr = 0.001
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! steps = 2000
//! batch_size = 4
//! eval_every = 50    # omit to validate once per epoch
//! ```

use std::path::{Path, PathBuf};

use atkl::data::{CleanKind, DatasetSpec, NoiseKind};
use atkl::distill::{AdamConfig, DistillConfig, KlDirection, TrainConfig};
use atkl::models::ModelConfig;
use atkl::signal::StftConfig;
use atkl::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub paths: Paths,
    pub data: DataSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub full_scale: FullScale,
    pub distill: DistillSection,
    pub optim: OptimSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub workdir: PathBuf,
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub clips: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub duration: f64,
    pub snr_db: [f64; 2],
    pub clean_kinds: Vec<CleanName>,
    pub noise_kinds: Vec<NoiseName>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanName {
    MultiTone,
    ToneSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseName {
    White,
    Pink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub enc_channels: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullScale {
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub dccrn: ModelSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    StudentToTeacher,
    TeacherToStudent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub kl_direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3],
            paths: Paths::default(),
            data: DataSection::default(),
            teacher: ModelConfig::desk_teacher().into(),
            student: ModelConfig::desk_student().into(),
            full_scale: FullScale::default(),
            distill: DistillSection::default(),
            optim: OptimSection::default(),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            workdir: ".".into(),
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            metrics: "metrics".into(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::desk();
        DataSection {
            clips: 200,
            seed: 0,
            sample_rate: d.sample_rate,
            duration: d.duration,
            snr_db: [d.snr_db.0, d.snr_db.1],
            clean_kinds: vec![CleanName::MultiTone, CleanName::ToneSweep],
            noise_kinds: vec![NoiseName::White, NoiseName::Pink],
        }
    }
}

impl Default for FullScale {
    fn default() -> Self {
        FullScale {
            teacher: ModelConfig::full_teacher().into(),
            student: ModelConfig::full_student().into(),
            dccrn: ModelConfig::dccrn().into(),
        }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            lambda: d.lambda,
            alpha: d.alpha,
            beta: d.beta,
            gamma: d.gamma,
            eta: d.eta,
            kl_direction: match d.kl_direction {
                KlDirection::StudentToTeacher => Direction::StudentToTeacher,
                KlDirection::TeacherToStudent => Direction::TeacherToStudent,
            },
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimSection {
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            steps: t.steps,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
        }
    }
}

impl From<ModelConfig> for ModelSection {
    fn from(c: ModelConfig) -> Self {
        ModelSection {
            sample_rate: c.stft.sample_rate,
            win_len: c.stft.win_len,
            hop_len: c.stft.hop_len,
            fft_size: c.stft.fft_size,
            enc_channels: c.enc_channels,
            lstm_hidden: c.lstm_hidden,
            lstm_layers: c.lstm_layers,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> atkl::Result<ModelConfig> {
        let cfg = ModelConfig {
            stft: StftConfig {
                sample_rate: self.sample_rate,
                win_len: self.win_len,
                hop_len: self.hop_len,
                fft_size: self.fft_size,
            },
            enc_channels: self.enc_channels.clone(),
            lstm_hidden: self.lstm_hidden,
            lstm_layers: self.lstm_layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> atkl::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> atkl::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> atkl::Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.optim.steps == 0 || self.optim.batch_size == 0 {
            return Err(Error::Config("optim.steps and optim.batch_size must be positive".into()));
        }
        if self.optim.eval_every == Some(0) {
            return Err(Error::Config("optim.eval_every must be positive".into()));
        }
        self.teacher.to_model_config()?;
        self.student.to_model_config()?;
        self.distill_config().validate()?;
        let spec = self.dataset_spec();
        for m in [&self.teacher, &self.student] {
            if m.sample_rate != spec.sample_rate {
                return Err(Error::Config(format!(
                    "model sample rate {} differs from data sample rate {}",
                    m.sample_rate, spec.sample_rate
                )));
            }
            if ((spec.duration * spec.sample_rate as f64).round() as usize) < m.win_len {
                return Err(Error::Config("clips are shorter than a model's analysis window".into()));
            }
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.data;
        DatasetSpec {
            sample_rate: d.sample_rate,
            duration: d.duration,
            snr_db: (d.snr_db[0], d.snr_db[1]),
            clean_kinds: d
                .clean_kinds
                .iter()
                .map(|k| match k {
                    CleanName::MultiTone => CleanKind::MultiTone,
                    CleanName::ToneSweep => CleanKind::ToneSweep,
                })
                .collect(),
            noise_kinds: d
                .noise_kinds
                .iter()
                .map(|k| match k {
                    NoiseName::White => NoiseKind::White,
                    NoiseName::Pink => NoiseKind::Pink,
                })
                .collect(),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            lambda: d.lambda,
            alpha: d.alpha,
            beta: d.beta,
            gamma: d.gamma,
            eta: d.eta,
            kl_direction: match d.kl_direction {
                Direction::StudentToTeacher => KlDirection::StudentToTeacher,
                Direction::TeacherToStudent => KlDirection::TeacherToStudent,
            },
        }
    }

    /// Training schedule for one run; `seed` drives the batch order.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let o = &self.optim;
        TrainConfig {
            adam: AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps },
            steps: o.steps,
            batch_size: o.batch_size,
            seed,
            eval_every: o.eval_every,
        }
    }
}
