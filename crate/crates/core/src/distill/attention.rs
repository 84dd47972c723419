//! Attention-transfer compression of activation maps and the two feature
//! losses built on it.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard on the l2 normalization so an all-zero map stays zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// `|x|^lambda`, skipping the absolute value when the exponent is 2.
fn abs_pow<S: Scalar>(x: &Tensor<S>, lambda: S) -> Result<Tensor<S>> {
    if lambda == S::lit(2.0) {
        x.square()
    } else {
        x.abs()?.pow(lambda)
    }
}

fn l2_normalize<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    x.div(&x.l2_norm()?.clamp_min(S::lit(NORM_FLOOR))?)
}

/// Sums `|X|^lambda` over time (`N x F x T -> N x F`) and l2-normalizes the result.
pub fn time_at<S: Scalar>(x: &Tensor<S>, lambda: S) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return shape_err("time_at", format!("expected N x F x T, got {:?}", x.shape()));
    }
    l2_normalize(&abs_pow(x, lambda)?.sum_axis(2)?)
}

/// Sums `|Y|^lambda` over channels (`N x F -> F`) and l2-normalizes the result.
pub fn channel_at<S: Scalar>(y: &Tensor<S>, lambda: S) -> Result<Tensor<S>> {
    if y.rank() != 2 {
        return shape_err("channel_at", format!("expected N x F, got {:?}", y.shape()));
    }
    l2_normalize(&abs_pow(y, lambda)?.sum_axis(0)?)
}

/// A tap after attention transfer.
#[derive(Debug, Clone)]
pub struct CompressedMap<S: Scalar> {
    /// `N x F`, unit l2 norm.
    pub time: Tensor<S>,
    /// `F`, unit l2 norm; present only when the paired layer's channel counts differ.
    pub channel: Option<Tensor<S>>,
}

impl<S: Scalar> CompressedMap<S> {
    pub fn detach(&self) -> Self {
        CompressedMap { time: self.time.detach(), channel: self.channel.as_ref().map(Tensor::detach) }
    }
}

/// Time compression always; channel compression on top when `mismatch` is set.
pub fn compress_tap<S: Scalar>(tap: &Tensor<S>, mismatch: bool, lambda: S) -> Result<CompressedMap<S>> {
    let time = time_at(tap, lambda)?;
    let channel = if mismatch { Some(channel_at(&time, lambda)?) } else { None };
    Ok(CompressedMap { time, channel })
}

/// One teacher/student layer correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPairing {
    pub teacher_tap: usize,
    pub student_tap: usize,
    /// The two taps have different channel extents, so they are compared after
    /// channel compression.
    pub channel_mismatch: bool,
}

/// Which side of a pairing supplies the maps compared by the losses.
fn pair_maps<'a, S: Scalar>(
    op: &'static str,
    teacher: &'a [CompressedMap<S>],
    student: &'a [CompressedMap<S>],
    p: &LayerPairing,
) -> Result<(Tensor<S>, &'a Tensor<S>)> {
    let (Some(t), Some(s)) = (teacher.get(p.teacher_tap), student.get(p.student_tap)) else {
        return shape_err(op, format!("pairing {p:?} out of range ({} / {} maps)", teacher.len(), student.len()));
    };
    let (tm, sm) = if p.channel_mismatch {
        match (&t.channel, &s.channel) {
            (Some(a), Some(b)) => (a, b),
            _ => return shape_err(op, format!("pairing {p:?} needs channel-compressed maps")),
        }
    } else {
        (&t.time, &s.time)
    };
    if tm.shape() != sm.shape() {
        return shape_err(op, format!("pairing {p:?}: teacher {:?} vs student {:?}", tm.shape(), sm.shape()));
    }
    Ok((tm.detach(), sm))
}

/// Sum over pairings of the (unsquared) Euclidean distance between the
/// compared maps. Teacher maps never receive gradient.
pub fn at_loss<S: Scalar>(
    teacher: &[CompressedMap<S>],
    student: &[CompressedMap<S>],
    pairing: &[LayerPairing],
) -> Result<Tensor<S>> {
    let mut total = Tensor::scalar(S::zero());
    for p in pairing {
        let (t, s) = pair_maps("at_loss", teacher, student, p)?;
        total = total.add(&s.sub(&t)?.l2_norm()?)?;
    }
    Ok(total)
}

/// Argument order of the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(student || teacher)`: the student distribution weights the log ratio.
    #[default]
    StudentToTeacher,
    /// `KL(teacher || student)`, the more common choice in the distillation literature.
    TeacherToStudent,
}

/// `sum p (ln p - ln q)` over the last axis, averaged over any leading axis.
fn kl_last_axis<S: Scalar>(p: &Tensor<S>, q: &Tensor<S>) -> Result<Tensor<S>> {
    let axis = p.rank() - 1;
    let terms = p.mul(&p.log()?.sub(&q.log()?)?)?.sum_axis(axis)?;
    if terms.rank() == 0 {
        Ok(terms)
    } else {
        terms.mean()
    }
}

/// KL divergence between frequency softmaxes of the compared maps, summed over
/// pairings. Matched-channel pairs are compared per channel and averaged.
pub fn atkl_loss<S: Scalar>(
    teacher: &[CompressedMap<S>],
    student: &[CompressedMap<S>],
    pairing: &[LayerPairing],
    direction: KlDirection,
) -> Result<Tensor<S>> {
    let mut total = Tensor::scalar(S::zero());
    for p in pairing {
        let (t, s) = pair_maps("atkl_loss", teacher, student, p)?;
        let axis = s.rank() - 1;
        let (ps, pt) = (s.softmax(axis)?, t.softmax(axis)?);
        let kl = match direction {
            KlDirection::StudentToTeacher => kl_last_axis(&ps, &pt)?,
            KlDirection::TeacherToStudent => kl_last_axis(&pt, &ps)?,
        };
        total = total.add(&kl)?;
    }
    Ok(total)
}
