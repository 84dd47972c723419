use super::*;
use crate::tensor::Tensor;

type T = Tensor<f64>;

fn tone(len: usize, seed: u64) -> T {
    let w = 0.01 + 0.003 * seed as f64;
    T::from_f64(&(0..len).map(|i| 0.5 * (w * i as f64).sin() + 0.1 * (0.37 * i as f64).cos()).collect::<Vec<_>>(), &[len])
        .unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig {
        stft: StftConfig { sample_rate: 8000, win_len: 32, hop_len: 16, fft_size: 32 },
        enc_channels: vec![4, 4],
        lstm_hidden: 4,
        lstm_layers: 1,
    }
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    let a = build_model::<f32>(&ModelConfig::desk_student(), 11).unwrap();
    let b = build_model::<f32>(&ModelConfig::desk_student(), 11).unwrap();
    let c = build_model::<f32>(&ModelConfig::desk_student(), 12).unwrap();
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    assert_ne!(a.to_checkpoint(), c.to_checkpoint());
}

#[test]
fn one_layer_config_forwards() {
    let cfg = ModelConfig { enc_channels: vec![4], lstm_hidden: 0, lstm_layers: 0, ..tiny() };
    let m = build_model::<f64>(&cfg, 0).unwrap();
    let out = m.forward_tapped(&tone(100, 1)).unwrap();
    assert_eq!(out.enhanced_wave.shape(), &[100]);
    assert_eq!(out.enc_taps.len(), 1);
    assert_eq!(out.dec_taps.len(), 1);
    assert_eq!(m.num_params(), count_params(&cfg));
}

#[test]
fn desk_student_tap_shapes_follow_the_conv_rule() {
    let cfg = ModelConfig::desk_student();
    let m = build_model::<f32>(&cfg, 3).unwrap();
    let wave = Tensor::<f32>::from_f64(&tone(8000, 2).to_f64_vec(), &[8000]).unwrap();
    let out = m.forward_tapped(&wave).unwrap();
    assert_eq!(out.enhanced_wave.shape(), &[8000]);
    let frames = 1 + (8000 - 256) / 80;
    let mut f = 129;
    for (k, tap) in out.enc_taps.iter().enumerate() {
        f = (f + 2 * 2 - 5) / 2 + 1;
        assert_eq!(tap.shape(), &[cfg.enc_channels[k], f, frames], "encoder {k}");
    }
    let dec_freq = [17, 33, 65, 129];
    let dec_ch = [16, 16, 8, 8];
    for (j, tap) in out.dec_taps.iter().enumerate() {
        assert_eq!(tap.shape(), &[dec_ch[j], dec_freq[j], frames], "decoder {j}");
    }
    assert_eq!(cfg.dec_channels(), dec_ch);
}

#[test]
fn teacher_and_student_frames_differ_by_the_hop_ratio() {
    let wave = Tensor::<f32>::from_f64(&tone(8000, 4).to_f64_vec(), &[8000]).unwrap();
    let t = build_model::<f32>(&ModelConfig::desk_teacher(), 0).unwrap().forward_tapped(&wave).unwrap();
    let s = build_model::<f32>(&ModelConfig::desk_student(), 0).unwrap().forward_tapped(&wave).unwrap();
    assert_eq!(t.enc_taps[1].shape()[2], 61);
    assert_eq!(s.enc_taps[1].shape()[2], 97);
    for k in 0..4 {
        assert_eq!(t.enc_taps[k].shape()[1], s.enc_taps[k].shape()[1]);
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let m = build_model::<f64>(&tiny(), 5).unwrap();
    let out = m.forward(&T::zeros(&[200])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_causal() {
    let m = build_model::<f64>(&tiny(), 6).unwrap();
    let long = tone(400, 3);
    let short = long.slice(0, 0..250).unwrap();
    let (a, b) = (m.forward(&short).unwrap(), m.forward(&long).unwrap());
    // Samples before the first frame missing from the short input.
    let frames = tiny().stft.num_frames(250).unwrap();
    let safe = frames * tiny().stft.hop_len;
    for i in 0..safe {
        assert!((a.data()[i] - b.data()[i]).abs() < 1e-6, "sample {i}");
    }
    assert!(a.data()[..safe].iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn counts_match_instantiated_models() {
    for cfg in [tiny(), ModelConfig::desk_teacher(), ModelConfig::desk_student()] {
        assert_eq!(build_model::<f32>(&cfg, 0).unwrap().num_params(), count_params(&cfg));
    }
    let empty = ModelConfig { enc_channels: vec![], lstm_hidden: 0, lstm_layers: 0, ..tiny() };
    assert_eq!(count_params(&empty), 0);
}

#[test]
fn full_scale_counts_land_in_the_published_bands() {
    let student = count_params(&ModelConfig::full_student());
    let dccrn = count_params(&ModelConfig::dccrn());
    assert!((880_000..=1_320_000).contains(&student), "{student}");
    assert!((2_990_000..=4_490_000).contains(&dccrn), "{dccrn}");
    assert!((student as f64) / (dccrn as f64) < 0.40);
}

#[test]
fn channel_mismatch_layers_of_the_default_configs() {
    let mismatched = |t: &ModelConfig, s: &ModelConfig| -> Vec<usize> {
        (0..t.num_layers()).filter(|&k| t.enc_channels[k] != s.enc_channels[k]).collect()
    };
    assert_eq!(mismatched(&ModelConfig::full_teacher(), &ModelConfig::full_student()), [3, 4]);
    assert_eq!(mismatched(&ModelConfig::desk_teacher(), &ModelConfig::desk_student()), [2, 3]);
    let t = ModelConfig::full_teacher();
    let s = ModelConfig::full_student();
    assert_eq!(t.freq_extents(), s.freq_extents());
}

#[test]
fn invalid_configs_are_rejected() {
    let deep = ModelConfig { enc_channels: vec![2; 9], ..ModelConfig::desk_student() };
    assert!(matches!(build_model::<f32>(&deep, 0), Err(Error::Config(_))));
    let odd = ModelConfig { enc_channels: vec![3], ..tiny() };
    assert!(matches!(build_model::<f32>(&odd, 0), Err(Error::Config(_))));
    let lstm = ModelConfig { lstm_hidden: 4, lstm_layers: 0, ..tiny() };
    assert!(matches!(build_model::<f32>(&lstm, 0), Err(Error::Config(_))));
}

#[test]
fn checkpoint_restores_parameters_bit_exactly() {
    let src = build_model::<f32>(&ModelConfig::desk_student(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    src.to_checkpoint().save(&path).unwrap();
    let mut dst = build_model::<f32>(&ModelConfig::desk_student(), 2).unwrap();
    dst.load_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    for ((n, a), (_, b)) in src.params().iter().zip(dst.params()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{n}");
    }
    let mut teacher = build_model::<f32>(&ModelConfig::desk_teacher(), 0).unwrap();
    assert!(matches!(teacher.load_checkpoint(&src.to_checkpoint()), Err(Error::Checkpoint(_))));
}

#[test]
fn frozen_model_records_no_graph() {
    let mut m = build_model::<f64>(&tiny(), 0).unwrap();
    assert!(!m.is_frozen());
    m.freeze();
    assert!(m.is_frozen());
    assert!(!m.forward(&tone(120, 0)).unwrap().requires_grad());
    m.unfreeze();
    assert!(m.forward(&tone(120, 0)).unwrap().requires_grad());
}

#[test]
fn every_parameter_gets_a_gradient() {
    let m = build_model::<f64>(&tiny(), 9).unwrap();
    let out = m.forward_tapped(&tone(160, 5)).unwrap();
    out.enhanced_wave.square().unwrap().sum().unwrap().backward().unwrap();
    for (n, p) in m.params() {
        let g = p.grad().unwrap_or_default();
        assert!(g.iter().any(|v| v.abs() > 1e-9), "{n} has no gradient");
    }
}
