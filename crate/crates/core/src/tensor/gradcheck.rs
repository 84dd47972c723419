//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Per-input worst relative error between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)` for each input; infinite
    /// when any entry (or the function itself) was non-finite.
    pub per_input: Vec<f64>,
    /// Location of the worst entry per input, for diagnostics.
    pub worst_index: Vec<usize>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.per_input.iter().all(|e| e.is_finite() && *e < tol)
    }

    fn failed(n: usize) -> Self {
        GradCheckReport { per_input: vec![f64::INFINITY; n], worst_index: vec![0; n] }
    }
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    if !a.is_finite() || !n.is_finite() {
        return f64::INFINITY;
    }
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// `f` receives fresh copies of `inputs`: gradient-tracking leaves for the
/// analytic pass and constants for the numeric probes.
pub fn grad_check<S, F>(f: F, inputs: &[Tensor<S>], eps: f64) -> GradCheckReport
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
{
    let leaves: Vec<Tensor<S>> = inputs.iter().map(|t| t.detach().tracked()).collect();
    let analytic: Vec<Vec<S>> = match f(&leaves).and_then(|loss| loss.backward().map(|_| ())) {
        Ok(()) => leaves
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![S::zero(); t.numel()]))
            .collect(),
        Err(_) => return GradCheckReport::failed(inputs.len()),
    };

    let consts: Vec<Tensor<S>> = inputs.iter().map(|t| t.detach()).collect();
    let eval = |which: usize, at: usize, delta: f64| -> f64 {
        let mut probe = consts.clone();
        let mut data = probe[which].to_vec();
        data[at] = S::lit(data[at].to_f64_lossy() + delta);
        probe[which] = Tensor::new(data, probe[which].shape()).expect("same shape");
        match f(&probe).and_then(|l| l.item()) {
            Ok(v) => v.to_f64_lossy(),
            Err(_) => f64::NAN,
        }
    };

    let mut report = GradCheckReport { per_input: Vec::new(), worst_index: Vec::new() };
    for (k, t) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut worst_at = 0;
        for i in 0..t.numel() {
            let numeric = (eval(k, i, eps) - eval(k, i, -eps)) / (2.0 * eps);
            let err = relative_error(analytic[k][i].to_f64_lossy(), numeric);
            if !(err <= worst) {
                worst = err;
                worst_at = i;
            }
        }
        report.per_input.push(worst);
        report.worst_index.push(worst_at);
    }
    report
}
