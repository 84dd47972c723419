//! Finite-difference checks of every differentiable operation, from the
//! elementwise primitives up to the complete distillation objective on a tiny
//! two-layer teacher/student pair. Shared by the test suite and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{
    at_loss, atkl_loss, batch_loss, compress_tap, kd_loss, si_snr, si_snr_mix_loss, DistillConfig, KlDirection,
    LayerPairing, Mode, Pair,
};
use crate::error::Result;
use crate::models::{build_model, ModelConfig};
use crate::nn::{apply_mask, complex_concat, cumulative_norm, cumulative_norm_prelu, BlockSpec, ComplexConvBlock, ConvKind, Linear, LstmStack};
use crate::signal::{Spectrogram, Stft, StftConfig};
use crate::tensor::{grad_check, ConvGeometry, Tensor};

/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_TOL: f64 = 1e-3;

type T = Tensor<f64>;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    /// Worst relative error over all inputs.
    pub max_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error < GRAD_TOL
    }
}

struct Suite {
    rng: ChaCha8Rng,
    cases: Vec<GradCase>,
}

impl Suite {
    /// Values in `±[0.2, 1.0]`, away from the kinks of abs / prelu / clamp.
    fn signed(&mut self, shape: &[usize]) -> T {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let m = self.rng.random_range(0.2..1.0);
                if self.rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        T::from_f64(&v, shape).expect("shape")
    }

    fn positive(&mut self, shape: &[usize]) -> T {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.rng.random_range(0.3..1.5)).collect();
        T::from_f64(&v, shape).expect("shape")
    }

    /// Checks `f`; a random cotangent `r` is appended so every output element
    /// gets a distinct weight: the checked scalar is `sum(f(x) * r)`.
    fn check(&mut self, name: &str, out_shape: &[usize], f: impl Fn(&[T]) -> Result<T>, mut inputs: Vec<T>) {
        let r = self.signed(out_shape);
        let k = inputs.len();
        inputs.push(r);
        let report = grad_check(|v| f(&v[..k])?.mul(&v[k])?.sum(), &inputs, GRAD_EPS);
        let max_error = report.per_input[..k].iter().copied().fold(0.0, f64::max);
        self.cases.push(GradCase { name: name.to_string(), max_error });
    }

    /// Checks a function that already returns a scalar.
    fn check_scalar(&mut self, name: &str, f: impl Fn(&[T]) -> Result<T>, inputs: Vec<T>) {
        let max_error = grad_check(f, &inputs, GRAD_EPS).max_error();
        self.cases.push(GradCase { name: name.to_string(), max_error });
    }
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

fn dec_spec(cin: usize, cout: usize, norm_act: bool) -> BlockSpec {
    BlockSpec {
        geometry: ConvGeometry { stride: (2, 1), pad: (2, 2, 0, 1) },
        kind: ConvKind::Transposed,
        ..enc_spec(cin, cout, norm_act)
    }
}

/// Runs the whole suite in 64-bit precision; deterministic for a given seed.
pub fn run_grad_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut s = Suite { rng: ChaCha8Rng::seed_from_u64(seed), cases: Vec::new() };

    // Elementwise binary ops, with and without broadcasting.
    let (a, b, row) = (s.signed(&[3, 4]), s.signed(&[3, 4]), s.signed(&[4]));
    s.check("add", &[3, 4], |v| v[0].add(&v[1]), vec![a.clone(), row.clone()]);
    s.check("sub", &[3, 4], |v| v[0].sub(&v[1]), vec![a.clone(), b.clone()]);
    s.check("mul", &[3, 4], |v| v[0].mul(&v[1]), vec![a.clone(), row.clone()]);
    let den = s.positive(&[3, 1]);
    s.check("div", &[3, 4], |v| v[0].div(&v[1]), vec![a.clone(), den]);
    let slope = s.positive(&[3, 1]);
    s.check("prelu", &[3, 4], |v| v[0].prelu(&v[1]), vec![a.clone(), slope]);

    // Elementwise unary ops.
    let p = s.positive(&[3, 4]);
    s.check("neg", &[3, 4], |v| v[0].neg(), vec![a.clone()]);
    s.check("scale", &[3, 4], |v| v[0].scale(-1.7), vec![a.clone()]);
    s.check("add_scalar", &[3, 4], |v| v[0].add_scalar(0.3), vec![a.clone()]);
    s.check("abs", &[3, 4], |v| v[0].abs(), vec![a.clone()]);
    s.check("square", &[3, 4], |v| v[0].square(), vec![a.clone()]);
    s.check("pow", &[3, 4], |v| v[0].pow(1.7), vec![p.clone()]);
    s.check("sqrt", &[3, 4], |v| v[0].sqrt(), vec![p.clone()]);
    s.check("log", &[3, 4], |v| v[0].log(), vec![p.clone()]);
    s.check("exp", &[3, 4], |v| v[0].exp(), vec![a.clone()]);
    s.check("sigmoid", &[3, 4], |v| v[0].sigmoid(), vec![a.clone()]);
    s.check("tanh", &[3, 4], |v| v[0].tanh(), vec![a.clone()]);
    s.check("clamp_min", &[3, 4], |v| v[0].clamp_min(0.1), vec![a.clone()]);
    s.check("clamp", &[3, 4], |v| v[0].clamp(-0.5, 0.5), vec![a.clone()]);

    // Reductions and scans.
    s.check_scalar("sum", |v| v[0].sum(), vec![a.clone()]);
    s.check_scalar("mean", |v| v[0].mean(), vec![a.clone()]);
    s.check("sum_axis", &[4], |v| v[0].sum_axis(0), vec![a.clone()]);
    s.check("mean_axis", &[3], |v| v[0].mean_axis(1), vec![a.clone()]);
    s.check_scalar("l2_norm", |v| v[0].l2_norm(), vec![a.clone()]);
    s.check("l2_norm_axis", &[3], |v| v[0].l2_norm_axis(1), vec![a.clone()]);
    s.check("softmax", &[3, 4], |v| v[0].softmax(1), vec![a.clone()]);
    s.check("cumsum", &[3, 4], |v| v[0].cumsum(1), vec![a.clone()]);

    // Structural ops.
    let c3 = s.signed(&[2, 3, 4]);
    s.check("concat", &[3, 8], |v| T::concat(&[v[0].clone(), v[1].clone()], 1), vec![a.clone(), b.clone()]);
    s.check("slice", &[3, 2], |v| v[0].slice(1, 1..3), vec![a.clone()]);
    s.check("reshape", &[2, 6], |v| v[0].reshape(&[2, 6]), vec![a.clone()]);
    s.check("transpose", &[4, 3], |v| v[0].transpose(), vec![a.clone()]);
    s.check("permute", &[4, 2, 3], |v| v[0].permute(&[2, 0, 1]), vec![c3]);

    // Linear algebra and convolutions.
    let m = s.signed(&[4, 5]);
    s.check("matmul", &[3, 5], |v| v[0].matmul(&v[1]), vec![a.clone(), m]);
    let (img, w) = (s.signed(&[2, 7, 5]), s.signed(&[3, 2, 5, 2]));
    let g = ConvGeometry { stride: (2, 1), pad: (2, 2, 1, 0) };
    s.check("conv2d", &[3, 4, 5], move |v| v[0].conv2d_with(&v[1], &g), vec![img, w]);
    let (img, w) = (s.signed(&[2, 4, 5]), s.signed(&[2, 3, 5, 2]));
    let g = ConvGeometry { stride: (2, 1), pad: (2, 2, 0, 1) };
    s.check("conv_transpose2d", &[3, 7, 5], move |v| v[0].conv_transpose2d_with(&v[1], &g), vec![img, w]);

    // Network layers.
    let (x, gain, shift, slope) = (s.signed(&[3, 5, 6]), s.signed(&[3, 1, 1]), s.signed(&[3, 1, 1]), s.positive(&[3, 1, 1]));
    s.check("cumulative_norm", &[3, 5, 6], |v| cumulative_norm(&v[0], &v[1], &v[2]), vec![x.clone(), gain.clone(), shift.clone()]);
    s.check(
        "cumulative_norm_prelu",
        &[3, 5, 6],
        |v| cumulative_norm_prelu(&v[0], &v[1], &v[2], &v[3]),
        vec![x, gain, shift, slope],
    );
    let (xa, xb) = (s.signed(&[4, 3, 2]), s.signed(&[2, 3, 2]));
    s.check("complex_concat", &[6, 3, 2], |v| complex_concat(&v[0], &v[1]), vec![xa, xb]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, spec, in_shape, out_shape) in [
        ("complex_conv_block", enc_spec(2, 2, true), [4, 7, 4], [4, 4, 4]),
        ("complex_conv_block_plain", enc_spec(2, 1, false), [4, 7, 4], [2, 4, 4]),
        ("complex_deconv_block", dec_spec(2, 2, true), [4, 4, 4], [4, 7, 4]),
    ] {
        let block = ComplexConvBlock::<f64>::new(spec, &mut rng)?;
        let mut inputs = vec![s.signed(&in_shape)];
        inputs.extend(block.params().into_iter().map(|(_, t)| t.detach()));
        s.check(
            name,
            &out_shape,
            |v| {
                let mut b = block.clone();
                for ((_, slot), val) in b.params_mut().into_iter().zip(&v[1..]) {
                    *slot = val.clone();
                }
                b.forward_stacked(&v[0])
            },
            inputs,
        );
    }

    let lstm = LstmStack::<f64>::new(3, 4, 2, &mut rng)?;
    let mut inputs = vec![s.signed(&[5, 3])];
    inputs.extend(lstm.params().into_iter().map(|(_, t)| t.detach()));
    s.check(
        "lstm",
        &[5, 4],
        |v| {
            let mut l = lstm.clone();
            for ((_, slot), val) in l.params_mut().into_iter().zip(&v[1..]) {
                *slot = val.clone();
            }
            l.forward(&v[0])
        },
        inputs,
    );

    let lin = Linear::<f64>::new(3, 2, &mut rng)?;
    let inputs = vec![s.signed(&[4, 3]), lin.weight.detach(), lin.bias.detach()];
    s.check("linear", &[4, 2], |v| Linear { weight: v[1].clone(), bias: v[2].clone() }.forward(&v[0]), inputs);

    // Signal path.
    let cfg = StftConfig { sample_rate: 8000, win_len: 16, hop_len: 4, fft_size: 16 };
    let stft = Stft::<f64>::new(cfg)?;
    let wave = s.signed(&[40]);
    let frames = cfg.num_frames(40).unwrap_or(0);
    s.check(
        "stft",
        &[9, frames],
        |v| {
            let sp = stft.forward(&v[0])?;
            sp.real.add(&sp.imag.scale(0.7)?)
        },
        vec![wave.clone()],
    );
    let (re, im) = (s.signed(&[9, frames]), s.signed(&[9, frames]));
    s.check(
        "istft",
        &[40],
        |v| stft.inverse(&Spectrogram { real: v[0].clone(), imag: v[1].clone(), config: cfg }, 40),
        vec![re, im],
    );
    let (nr, ni, mr, mi) = (s.signed(&[3, 4]), s.signed(&[3, 4]), s.signed(&[3, 4]), s.signed(&[3, 4]));
    s.check(
        "apply_mask",
        &[3, 4],
        move |v| {
            let noisy = Spectrogram { real: v[0].clone(), imag: v[1].clone(), config: cfg };
            let out = apply_mask(&noisy, &v[2], &v[3])?;
            out.real.add(&out.imag.scale(-1.3)?)
        },
        vec![nr, ni, mr, mi],
    );

    // Distillation losses.
    let (tap_s, tap_t) = (s.signed(&[3, 5, 6]), s.signed(&[5, 5, 9]).detach());
    for (lambda, label) in [(2.0, "time_at"), (1.5, "time_at_lambda_1.5")] {
        s.check(label, &[3, 5], move |v| crate::distill::time_at(&v[0], lambda), vec![tap_s.clone()]);
    }
    let nf = s.signed(&[3, 5]);
    s.check("channel_at", &[5], |v| crate::distill::channel_at(&v[0], 2.0), vec![nf]);
    let pairing = [
        LayerPairing { teacher_tap: 0, student_tap: 0, channel_mismatch: true },
        LayerPairing { teacher_tap: 1, student_tap: 1, channel_mismatch: false },
    ];
    let tap_t2 = s.signed(&[3, 5, 4]).detach();
    let tap_s2 = s.signed(&[3, 5, 6]);
    let teacher_maps = vec![compress_tap(&tap_t, true, 2.0)?.detach(), compress_tap(&tap_t2, false, 2.0)?.detach()];
    let student_maps = |v: &[T]| -> Result<Vec<_>> { Ok(vec![compress_tap(&v[0], true, 2.0)?, compress_tap(&v[1], false, 2.0)?]) };
    s.check_scalar("at_loss", |v| at_loss(&teacher_maps, &student_maps(v)?, &pairing), vec![tap_s.clone(), tap_s2.clone()]);
    for dir in [KlDirection::StudentToTeacher, KlDirection::TeacherToStudent] {
        s.check_scalar(
            &format!("atkl_loss_{dir:?}"),
            |v| atkl_loss(&teacher_maps, &student_maps(v)?, &pairing, dir),
            vec![tap_s.clone(), tap_s2.clone()],
        );
    }
    let (est, reference, soft) = (s.signed(&[32]), s.signed(&[32]), s.signed(&[32]));
    s.check_scalar("si_snr", |v| si_snr(&v[0], &v[1]), vec![est.clone(), reference.clone()]);
    // The soft label is a constant by contract, so only the estimate and the clean reference are checked.
    s.check_scalar("si_snr_mix_loss", |v| si_snr_mix_loss(&v[0], &v[1], &soft, 0.4), vec![est, reference]);
    let terms = [s.signed(&[]), s.signed(&[]), s.signed(&[])];
    s.check_scalar("kd_loss", |v| kd_loss(&v[0], &v[1], &v[2], 1.0, 0.5, 60.0), terms.to_vec());

    // The composed objective, differentiated w.r.t. every student parameter.
    let teacher = build_model::<f64>(&ModelConfig::tiny_teacher(), seed.wrapping_add(1))?;
    let student = build_model::<f64>(&ModelConfig::tiny_student(), seed.wrapping_add(2))?;
    let len = 72;
    let clean: Vec<f64> = (0..len).map(|n| 0.5 * (0.3 * n as f64).sin()).collect();
    let noisy: Vec<f64> = clean.iter().map(|c| c + rng.random_range(-0.2..0.2)).collect();
    let batch = [Pair { clean: T::from_f64(&clean, &[len])?, noisy: T::from_f64(&noisy, &[len])? }];
    let inputs: Vec<T> = student.params().into_iter().map(|(_, p)| p.detach()).collect();
    let dcfg = DistillConfig::default();
    for mode in [Mode::Direct, Mode::OutputOnly, Mode::AtKl] {
        s.check_scalar(
            &format!("model_loss_{}", mode.name()),
            |v| {
                let mut st = student.clone();
                for ((_, slot), val) in st.params_mut().into_iter().zip(v) {
                    *slot = val.clone();
                }
                batch_loss(Some(&teacher), &st, &batch, &dcfg, mode)
            },
            inputs.clone(),
        );
    }
    Ok(s.cases)
}
