//! The three loss terms and their Lagrangian combination:
//! masked L1 reconstruction, the per-stage alignment constraint, and the
//! normalized gradient-distance constraint.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fusion::FusionTrace;
use crate::image::{grad_mag_var, GradOp, NormCtx};
use crate::real::Real;
use crate::tensor::{NdArray, Tape, Var};

/// Scalar snapshot of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_rec: f64,
    pub l_cf: f64,
    pub l_gr: f64,
    pub lagrangian: f64,
    pub n_valid: usize,
}

/// Tape handles for the loss terms of one forward pass.
pub struct LossVars {
    pub rec: Var,
    pub cf: Option<Var>,
    pub gr: Option<Var>,
    pub total: Var,
}

/// Mean L1 over pixels with positive ground truth. Masked pixels contribute
/// exactly zero gradient.
pub fn loss_rec<R: Real>(tape: &mut Tape<R>, y: Var, z: &NdArray<R>) -> Result<(Var, usize)> {
    if tape.shape(y) != z.shape.as_slice() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "loss_rec shapes {:?} vs {:?}",
            tape.shape(y),
            z.shape
        )));
    }
    let mask: Vec<R> = z
        .data
        .iter()
        .map(|&v| if v > R::ZERO { R::ONE } else { R::ZERO })
        .collect();
    let n_valid = mask.iter().filter(|&&m| m == R::ONE).count();
    if n_valid == 0 {
        return Err(CoreError::InvalidArgument(alloc::string::String::from(
            "loss_rec: zero valid pixels",
        )));
    }
    let zv = tape.leaf(z);
    let mv = tape.leaf(&NdArray::new(z.shape.clone(), mask));
    let diff = tape.sub(y, zv)?;
    let a = tape.abs(diff);
    let masked = tape.mul(a, mv)?;
    let s = tape.sum_all(masked)?;
    Ok((tape.mul_scalar(s, R::ONE / R::from_usize(n_valid)), n_valid))
}

/// Mean over the four stages of (1/n) * ||h_d - h_f||_2^2, using each
/// stage's final-iteration projections.
pub fn loss_cf<R: Real>(tape: &mut Tape<R>, traces: &[FusionTrace]) -> Result<Var> {
    if traces.is_empty() {
        return Err(CoreError::InvalidArgument(alloc::string::String::from(
            "loss_cf: no fusion traces",
        )));
    }
    let mut acc: Option<Var> = None;
    for t in traces {
        let d = tape.sub(t.h_d, t.h_f)?;
        let sq = tape.square(d);
        let m = tape.mean_all(sq)?;
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(a, m)?,
        });
    }
    Ok(tape.mul_scalar(acc.unwrap(), R::ONE / R::from_usize(traces.len())))
}

/// (1/n) * ||G(N(Y)) - G(N(Y'))||_1 over all pixels.
pub fn loss_gr<R: Real>(
    tape: &mut Tape<R>,
    y: Var,
    yprime: &NdArray<R>,
    norm: &mut NormCtx<R>,
    op: GradOp,
) -> Result<Var> {
    if tape.shape(y) != yprime.shape.as_slice() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "loss_gr shapes {:?} vs {:?}",
            tape.shape(y),
            yprime.shape
        )));
    }
    let ypv = tape.leaf(yprime);
    let ny = norm.minmax(tape, y);
    let nyp = norm.minmax(tape, ypv);
    let gy = grad_mag_var(tape, ny, op)?;
    let gyp = grad_mag_var(tape, nyp, op)?;
    let d = tape.sub(gy, gyp)?;
    let a = tape.abs(d);
    tape.mean_all(a)
}

/// l_rec + lambda * l_cf + mu * l_gr; gradients flow through all terms.
pub fn lagrangian_total<R: Real>(
    tape: &mut Tape<R>,
    l_rec: Var,
    l_cf: Option<Var>,
    l_gr: Option<Var>,
    lambda: R,
    mu: R,
) -> Result<Var> {
    if lambda < R::ZERO || mu < R::ZERO {
        return Err(CoreError::InvalidArgument(alloc::string::String::from(
            "lagrangian multipliers must be nonnegative",
        )));
    }
    let mut total = l_rec;
    if let Some(cf) = l_cf {
        let t = tape.mul_scalar(cf, lambda);
        total = tape.add(total, t)?;
    }
    if let Some(gr) = l_gr {
        let t = tape.mul_scalar(gr, mu);
        total = tape.add(total, t)?;
    }
    Ok(total)
}

pub fn bundle_from<R: Real>(
    tape: &Tape<R>,
    vars: &LossVars,
    n_valid: usize,
) -> LossBundle {
    LossBundle {
        l_rec: tape.values(vars.rec)[0].to_f64(),
        l_cf: vars.cf.map_or(0.0, |v| tape.values(v)[0].to_f64()),
        l_gr: vars.gr.map_or(0.0, |v| tape.values(v)[0].to_f64()),
        lagrangian: tape.values(vars.total)[0].to_f64(),
        n_valid,
    }
}
