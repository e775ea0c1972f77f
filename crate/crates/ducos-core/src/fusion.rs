//! Correlative fusion: per-channel Pearson correlation between prompt and
//! depth features, sigmoid gating, and iterative fused refinement.
//!
//! One stage resizes the prompt feature once (1x1 projection, stride-2
//! transposed conv, bilinear resize to the depth resolution), then runs
//! `iterations` rounds of: residual-group refinement of the depth path,
//! per-channel correlation, gating, convex combination. The fused feature is
//! finally mapped through a 3x3 conv to feed the next stage. The single
//! channel projections used by the alignment loss come from the last
//! iteration.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::image::NormCtx;
use crate::real::Real;
use crate::tensor::{NdArray, RedKind, Tape, Var};

/// Channel std below this is treated as zero variance; the correlation for
/// that channel is defined as 0 and the gate falls back to 0.5/0.5.
pub const PCC_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionMode<R> {
    /// Gated convex combination with alpha = sigmoid(pcc).
    Pcc,
    /// Test hook: fixed alpha for every channel.
    ForceAlpha(R),
    /// Ablation baseline: plain elementwise addition.
    Addition,
    /// Ablation baseline: channel concat reduced by a learned 1x1 conv.
    Concat,
}

/// Tape handles for one stage's parameters, bound for the current forward
/// pass.
pub struct StageVars {
    pub prompt_proj_w: Var,
    pub prompt_proj_b: Var,
    pub deconv_w: Var,
    /// Residual blocks: (conv1 w, conv1 b, conv2 w, conv2 b) each.
    pub blocks: Vec<(Var, Var, Var, Var)>,
    pub tau2_w: Var,
    pub tau2_b: Var,
    pub h_d_w: Var,
    pub h_d_b: Var,
    pub h_f_w: Var,
    pub h_f_b: Var,
    /// Weight halves of the concat-ablation 1x1 reduction (a 1x1 conv over a
    /// channel concat splits exactly into one conv per half).
    pub concat_w_f: Var,
    pub concat_w_d: Var,
    pub concat_b: Var,
}

/// Per-stage fusion internals exposed for the alignment loss and for tests.
pub struct FusionTrace {
    /// Per-iteration correlation vector, each in [-1, 1].
    pub rs: Vec<Var>,
    /// Per-iteration gate vector.
    pub alphas: Vec<Var>,
    pub fhat: Var,
    /// Depth-path feature of the last iteration.
    pub dhat_last: Var,
    /// Fused feature of the last iteration.
    pub dtilde: Var,
    /// Normalized single-channel projection of the fused feature.
    pub h_d: Var,
    /// Normalized single-channel projection of the prompt feature.
    pub h_f: Var,
}

/// Per-channel Pearson correlation over spatial positions. Returns a `[C]`
/// vector in [-1, 1]; zero-variance channels yield 0.
pub fn pcc_per_channel<R: Real>(tape: &mut Tape<R>, f: Var, d: Var) -> Result<Var> {
    let sf = tape.shape(f).to_vec();
    if sf != tape.shape(d) {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "pcc operands {:?} vs {:?}",
            sf,
            tape.shape(d)
        )));
    }
    if sf.len() != 3 || sf[1] * sf[2] < 2 {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "pcc expects [C,H,W] with H*W >= 2, got {sf:?}"
        )));
    }
    let n_spatial = sf[1] * sf[2];
    let fm = tape.reduce(RedKind::Mean, f, &[1, 2])?;
    let dm = tape.reduce(RedKind::Mean, d, &[1, 2])?;
    let fc = tape.sub(f, fm)?;
    let dc = tape.sub(d, dm)?;
    let prod = tape.mul(fc, dc)?;
    let num = tape.reduce(RedKind::Sum, prod, &[1, 2])?;
    let fc2 = tape.square(fc);
    let dc2 = tape.square(dc);
    let sf2 = tape.reduce(RedKind::Sum, fc2, &[1, 2])?;
    let sd2 = tape.reduce(RedKind::Sum, dc2, &[1, 2])?;
    // zero-variance convention, decided from detached statistics
    let floor = R::from_f64(PCC_STD_FLOOR * PCC_STD_FLOOR) * R::from_usize(n_spatial);
    let mask: Vec<R> = tape
        .values(sf2)
        .iter()
        .zip(tape.values(sd2).iter())
        .map(|(&a, &b)| {
            if a < floor || b < floor {
                R::ZERO
            } else {
                R::ONE
            }
        })
        .collect();
    let c = sf[0];
    let inv_mask: Vec<R> = mask.iter().map(|&m| R::ONE - m).collect();
    let mask_v = tape.leaf(&NdArray::new(alloc::vec![c], mask));
    let inv_mask_v = tape.leaf(&NdArray::new(alloc::vec![c], inv_mask));
    let tiny = R::from_f64(1e-24);
    let stdf = tape.sqrt_eps(sf2, tiny);
    let stdd = tape.sqrt_eps(sd2, tiny);
    let den = tape.mul(stdf, stdd)?;
    // masked form: r = (num*m) / (den*m + (1-m)); invalid channels give 0/1
    let num_m = tape.mul(num, mask_v)?;
    let den_m = tape.mul(den, mask_v)?;
    let den_safe = tape.add(den_m, inv_mask_v)?;
    let r = tape.div(num_m, den_safe)?;
    Ok(tape.clamp(r, -R::ONE, R::ONE))
}

/// alpha = sigmoid(r), beta = 1 - alpha.
pub fn gate<R: Real>(tape: &mut Tape<R>, r: Var) -> (Var, Var) {
    let alpha = tape.sigmoid(r);
    let neg = tape.neg(alpha);
    let beta = tape.add_scalar(neg, R::ONE);
    (alpha, beta)
}

pub struct CfSettings<R> {
    pub iterations: usize,
    pub mode: FusionMode<R>,
    pub h_shared: bool,
}

/// One residual group: `blocks` x (3x3 conv, relu, 3x3 conv, skip).
fn resgroup<R: Real>(
    tape: &mut Tape<R>,
    blocks: &[(Var, Var, Var, Var)],
    input: Var,
) -> Result<Var> {
    let mut cur = input;
    for &(w1, b1, w2, b2) in blocks {
        let t = tape.conv2d(cur, w1, Some(b1))?;
        let t = tape.relu(t);
        let t = tape.conv2d(t, w2, Some(b2))?;
        cur = tape.add(cur, t)?;
    }
    Ok(cur)
}

/// One correlative-fusion stage: `(F_i, D_i) -> (D_{i+1}, trace)`.
///
/// The prompt feature is projected and upsampled once per stage; only the
/// depth path is refreshed across iterations.
pub fn cf_forward<R: Real>(
    tape: &mut Tape<R>,
    stage: &StageVars,
    settings: &CfSettings<R>,
    f_i: Var,
    d_i: Var,
    norm: &mut NormCtx<R>,
) -> Result<(Var, FusionTrace)> {
    if settings.iterations == 0 {
        return Err(CoreError::InvalidArgument(alloc::string::String::from(
            "cf iterations must be >= 1",
        )));
    }
    let sd = tape.shape(d_i).to_vec();
    let (h, w) = (sd[1], sd[2]);

    // F_hat: project prompt channels to C, upsample, resize to depth size
    let p = tape.conv2d(f_i, stage.prompt_proj_w, Some(stage.prompt_proj_b))?;
    let up = tape.deconv2d(p, stage.deconv_w, 2)?;
    let fhat = tape.resize_bilinear(up, h, w)?;

    let mut rs = Vec::new();
    let mut alphas = Vec::new();
    let mut cur = d_i;
    let mut dtilde = d_i;
    let mut dhat_last = d_i;
    for _ in 0..settings.iterations {
        let dhat = resgroup(tape, &stage.blocks, cur)?;
        dhat_last = dhat;
        dtilde = match settings.mode {
            FusionMode::Pcc => {
                let r = pcc_per_channel(tape, fhat, dhat)?;
                let (alpha, beta) = gate(tape, r);
                rs.push(r);
                alphas.push(alpha);
                let fa = tape.mul(fhat, alpha)?;
                let db = tape.mul(dhat, beta)?;
                tape.add(fa, db)?
            }
            FusionMode::ForceAlpha(a) => {
                let c = tape.shape(dhat)[0];
                let alpha = tape.leaf(&NdArray::full(alloc::vec![c], a));
                let (_, beta) = {
                    let neg = tape.neg(alpha);
                    (alpha, tape.add_scalar(neg, R::ONE))
                };
                alphas.push(alpha);
                let fa = tape.mul(fhat, alpha)?;
                let db = tape.mul(dhat, beta)?;
                tape.add(fa, db)?
            }
            FusionMode::Addition => tape.add(fhat, dhat)?,
            FusionMode::Concat => {
                let fpart = tape.conv2d(fhat, stage.concat_w_f, Some(stage.concat_b))?;
                let dpart = tape.conv2d(dhat, stage.concat_w_d, None)?;
                tape.add(fpart, dpart)?
            }
        };
        cur = dtilde;
    }

    let d_next = tape.conv2d(dtilde, stage.tau2_w, Some(stage.tau2_b))?;

    let hd_raw = tape.conv2d(dtilde, stage.h_d_w, Some(stage.h_d_b))?;
    let h_d = norm.minmax(tape, hd_raw);
    let (hfw, hfb) = if settings.h_shared {
        (stage.h_d_w, stage.h_d_b)
    } else {
        (stage.h_f_w, stage.h_f_b)
    };
    let hf_raw = tape.conv2d(fhat, hfw, Some(hfb))?;
    let h_f = norm.minmax(tape, hf_raw);

    Ok((
        d_next,
        FusionTrace {
            rs,
            alphas,
            fhat,
            dhat_last,
            dtilde,
            h_d,
            h_f,
        },
    ))
}
