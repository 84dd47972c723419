//! Attention-transfer + KL feature distillation.
//!
//! Teacher and student taps are compressed over time (and, where the channel
//! counts differ, over channels too) into unit-norm maps. The student is then
//! pulled toward the teacher's maps by a Euclidean term and a KL term on their
//! frequency softmaxes, on top of an SI-SNR output loss that mixes clean and
//! teacher targets.

mod attention;
mod objective;
mod optim;
mod train;

pub use attention::{
    at_loss, atkl_loss, channel_at, compress_tap, time_at, CompressedMap, KlDirection, LayerPairing, NORM_FLOOR,
};
pub use objective::{kd_loss, si_snr, si_snr_mix_loss, SISNR_CLAMP_DB};
pub use optim::{Adam, AdamConfig, LrHalving};
pub use train::{
    batch_loss, build_pairing, evaluate, run_distillation, train_direct, train_teacher, write_metrics, DistillConfig,
    MetricsRow, Mode, Pair, Pairing, TrainConfig, TrainData, TrainReport, METRICS_HEADER,
};
