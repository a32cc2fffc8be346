//! Central finite-difference gradient checks.

use super::tape::{GradientReport, Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, Result};

/// Default central-difference step for `f64`.
pub const FD_EPS: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a tape with one differentiable leaf per entry of `params`
/// and must return a one-element output. Perturbations are applied by
/// overwriting leaves and replaying the tape, so any constant the closure
/// derives from parameter values (a kernel bandwidth, say) stays frozen at its
/// unperturbed value.
pub fn fd_report<F>(build: F, params: &[Tensor], eps: f64) -> Result<GradientReport>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(contract_err!("finite-difference step must be positive, got {eps}"));
    }
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let mut report = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    for (&leaf, base) in leaves.iter().zip(params) {
        let analytic = report.wrt(leaf).clone();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe.data_mut()[i] = base.data()[i] + eps;
            tape.set_leaf(leaf, probe.clone())?;
            tape.replay()?;
            let up = tape.value(out).item()?;
            probe.data_mut()[i] = base.data()[i] - eps;
            tape.set_leaf(leaf, probe)?;
            tape.replay()?;
            let down = tape.value(out).item()?;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        tape.set_leaf(leaf, base.clone())?;
    }
    tape.replay()?;
    report.max_rel_error = Some(worst);
    Ok(report)
}

/// Maximum relative error over every coordinate of every parameter.
pub fn fd_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(fd_report(build, params, eps)?.max_rel_error.unwrap_or(0.0))
}
