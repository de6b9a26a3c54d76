//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// One-sided slopes that disagree by more than this fraction mark a
/// non-differentiable point inside the stencil (e.g. a relu kink).
pub const KINK_RATIO: f64 = 1e-2;

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(leaf, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub excluded: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, leaves: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::dim("grad_check", tape.shape(out), &[1]));
    }
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences of step `step` for every element of every leaf.
///
/// The relative error of an element is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
/// Elements whose forward and backward one-sided slopes disagree (a kink
/// inside the stencil) are excluded and counted. So are elements whose
/// slopes disagree by more than `tol` while the analytic value matches one
/// of them within `tol`.
pub fn grad_check<F>(f: F, leaves: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("grad_check: f(x) = {f0} at the base point")));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
        tol,
        passed: true,
    };
    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaves[li].numel()]);
        for e in 0..leaves[li].numel() {
            let a = analytic[e];
            let x0 = leaves[li].data()[e];
            probe[li].data_mut()[e] = x0 + step;
            let fp = eval(&f, &probe)?;
            probe[li].data_mut()[e] = x0 - step;
            let fm = eval(&f, &probe)?;
            probe[li].data_mut()[e] = x0;
            if !(fp.is_finite() && fm.is_finite() && a.is_finite()) {
                return Err(Error::Numerical(format!(
                    "grad_check: non-finite value at leaf {li} element {e} (x = {x0}): f(x+h) = {fp}, f(x-h) = {fm}, analytic = {a}"
                )));
            }
            let fwd = (fp - f0) / step;
            let bwd = (f0 - fm) / step;
            if (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(REL_FLOOR) {
                report.excluded += 1;
                continue;
            }
            let n = (fp - fm) / (2.0 * step);
            let rel_to = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            let rel = rel_to(n);
            // A milder kink inside the stencil still skews the central
            // difference; the analytic value then equals one one-sided slope.
            if rel > tol && (fwd - bwd).abs() > tol * fwd.abs().max(bwd.abs()).max(REL_FLOOR) && rel_to(fwd).min(rel_to(bwd)) <= tol {
                report.excluded += 1;
                continue;
            }
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((li, e, a, n));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
