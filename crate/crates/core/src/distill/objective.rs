//! SI-SNR and the output / combined distillation objectives.

use std::f64::consts::LN_10;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SI-SNR saturates at this magnitude in dB.
pub const SISNR_CLAMP_DB: f64 = 60.0;
/// Floor on the residual energy.
const RESIDUAL_FLOOR: f64 = 1e-12;
/// A mean-removed reference with less energy than this is treated as silent.
const SILENT_REF: f64 = 1e-20;

/// Scale-invariant SNR in dB of `est` against `reference`, differentiable in
/// both. Signals are made zero-mean first and the result is clamped to +-60 dB.
pub fn si_snr<S: Scalar>(est: &Tensor<S>, reference: &Tensor<S>) -> Result<Tensor<S>> {
    if est.rank() != 1 || est.shape() != reference.shape() {
        return shape_err("si_snr", format!("estimate {:?} vs reference {:?}", est.shape(), reference.shape()));
    }
    let e = est.sub(&est.mean()?)?;
    let r = reference.sub(&reference.mean()?)?;
    let energy = r.square()?.sum()?;
    if !(energy.item()?.to_f64_lossy() > SILENT_REF) {
        return Err(Error::DegenerateReference);
    }
    let target = r.mul(&e.mul(&r)?.sum()?.div(&energy)?)?;
    let residual = e.sub(&target)?;
    let ratio = target.square()?.sum()?.div(&residual.square()?.sum()?.clamp_min(S::lit(RESIDUAL_FLOOR))?)?;
    let clamp = S::lit(SISNR_CLAMP_DB);
    ratio.log()?.scale(S::lit(10.0 / LN_10))?.clamp(-clamp, clamp)
}

/// `alpha * -si_snr(student, clean) + (1 - alpha) * -si_snr(student, teacher)`.
/// The teacher output is used as a constant soft label.
pub fn si_snr_mix_loss<S: Scalar>(
    student_out: &Tensor<S>,
    clean: &Tensor<S>,
    teacher_out: &Tensor<S>,
    alpha: S,
) -> Result<Tensor<S>> {
    let mut loss = Tensor::scalar(S::zero());
    // Skip a term whose weight is zero so it cannot raise a degenerate-label error.
    if alpha != S::zero() {
        loss = loss.sub(&si_snr(student_out, clean)?.scale(alpha)?)?;
    }
    if alpha != S::one() {
        loss = loss.sub(&si_snr(student_out, &teacher_out.detach())?.scale(S::one() - alpha)?)?;
    }
    Ok(loss)
}

/// `beta * mix + gamma * at + eta * atkl`.
pub fn kd_loss<S: Scalar>(mix: &Tensor<S>, at: &Tensor<S>, atkl: &Tensor<S>, beta: S, gamma: S, eta: S) -> Result<Tensor<S>> {
    mix.scale(beta)?.add(&at.scale(gamma)?)?.add(&atkl.scale(eta)?)
}
