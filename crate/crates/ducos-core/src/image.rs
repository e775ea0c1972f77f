//! Non-learned image/depth operators: bicubic resampling, min-max
//! normalization, Gaussian blur, and seeded noise injection.
//!
//! These run on plain [`NdArray`]s (input preparation, degradation). The
//! differentiable gradient-magnitude stencil lives on the tape
//! ([`Tape::grad_mag`]); min-max normalization has a tape-side helper here
//! because the losses need it with detached statistics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{NdArray, Tape, Var};

pub const MINMAX_EPS: f64 = 1e-8;
pub const GRAD_MAG_EPS: f64 = 1e-8;

/// 1-D filter taps with a radius; interpolation kernels sum to 1.
#[derive(Debug, Clone)]
pub struct Kernel1D<R> {
    pub taps: Vec<R>,
    pub support: usize,
}

impl<R: Real> Kernel1D<R> {
    /// Normalized Gaussian with radius ceil(3*sigma).
    pub fn gaussian(sigma: R) -> Result<Self> {
        if !(sigma > R::ZERO) {
            return Err(CoreError::InvalidArgument(alloc::format!(
                "gaussian sigma must be positive, got {:?}",
                sigma
            )));
        }
        let s = sigma.to_f64();
        let radius = libm::ceil(3.0 * s) as usize;
        let mut taps = Vec::with_capacity(2 * radius + 1);
        let mut sum = 0.0;
        for i in 0..=2 * radius {
            let d = i as f64 - radius as f64;
            let v = libm::exp(-0.5 * (d / s) * (d / s));
            taps.push(v);
            sum += v;
        }
        Ok(Kernel1D {
            taps: taps.into_iter().map(|v| R::from_f64(v / sum)).collect(),
            support: radius,
        })
    }
}

/// Catmull-Rom-family cubic weight, a = -0.5.
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = libm::fabs(t);
    if t < 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1])),
        3 => Ok((shape[0], shape[1], shape[2])),
        _ => Err(CoreError::ShapeMismatch(alloc::format!(
            "expected [H,W] or [C,H,W], got {shape:?}"
        ))),
    }
}

fn clamp_idx(i: isize, n: usize) -> usize {
    if i < 0 {
        0
    } else if i as usize >= n {
        n - 1
    } else {
        i as usize
    }
}

/// Separable bicubic resampling at the output grid (no prefilter), replicate
/// border. `scale = 1` is the identity on matching grids.
pub fn bicubic_resize<R: Real>(x: &NdArray<R>, out_h: usize, out_w: usize) -> Result<NdArray<R>> {
    let (c, h, w) = dims(&x.shape)?;
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::InvalidArgument(alloc::string::String::from(
            "bicubic output size must be >= 1",
        )));
    }
    // horizontal pass, then vertical
    let mut mid = vec![R::ZERO; c * h * out_w];
    resample_axis(&x.data, &mut mid, c * h, w, out_w);
    let mut mid_t = vec![R::ZERO; c * out_w * h];
    transpose_planes(&mid, &mut mid_t, c, h, out_w);
    let mut out_t = vec![R::ZERO; c * out_w * out_h];
    resample_axis(&mid_t, &mut out_t, c * out_w, h, out_h);
    let mut out = vec![R::ZERO; c * out_h * out_w];
    transpose_planes(&out_t, &mut out, c, out_w, out_h);
    let shape = if x.shape.len() == 2 {
        vec![out_h, out_w]
    } else {
        vec![c, out_h, out_w]
    };
    Ok(NdArray::new(shape, out))
}

/// Convenience wrapper taking a positive scale factor.
pub fn bicubic_scale<R: Real>(x: &NdArray<R>, scale: f64) -> Result<NdArray<R>> {
    if !(scale > 0.0) {
        return Err(CoreError::InvalidArgument(alloc::string::String::from(
            "bicubic scale must be positive",
        )));
    }
    let (_, h, w) = dims(&x.shape)?;
    let oh = libm::round(h as f64 * scale).max(1.0) as usize;
    let ow = libm::round(w as f64 * scale).max(1.0) as usize;
    bicubic_resize(x, oh, ow)
}

fn resample_axis<R: Real>(src: &[R], dst: &mut [R], rows: usize, in_n: usize, out_n: usize) {
    let scale = in_n as f64 / out_n as f64;
    // per-output-column taps are shared across rows
    let mut taps: Vec<(isize, [f64; 4])> = Vec::with_capacity(out_n);
    for o in 0..out_n {
        let s = (o as f64 + 0.5) * scale - 0.5;
        let base = libm::floor(s) as isize;
        let frac = s - base as f64;
        let w = [
            cubic_weight(frac + 1.0),
            cubic_weight(frac),
            cubic_weight(frac - 1.0),
            cubic_weight(frac - 2.0),
        ];
        taps.push((base - 1, w));
    }
    for r in 0..rows {
        let row = &src[r * in_n..(r + 1) * in_n];
        let out_row = &mut dst[r * out_n..(r + 1) * out_n];
        for (o, &(start, w)) in taps.iter().enumerate() {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                acc += wt * row[clamp_idx(start + t as isize, in_n)].to_f64();
            }
            out_row[o] = R::from_f64(acc);
        }
    }
}

fn transpose_planes<R: Real>(src: &[R], dst: &mut [R], c: usize, h: usize, w: usize) {
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let d = &mut dst[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                d[x * h + y] = s[y * w + x];
            }
        }
    }
}

/// (x - min) / (max - min + eps); constant inputs map to ~0.
pub fn minmax_normalize<R: Real>(x: &NdArray<R>) -> NdArray<R> {
    let (lo, hi) = minmax_of(&x.data);
    let inv = R::ONE / (hi - lo + R::from_f64(MINMAX_EPS));
    NdArray {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| (v - lo) * inv).collect(),
    }
}

pub fn minmax_of<R: Real>(data: &[R]) -> (R, R) {
    let mut lo = data[0];
    let mut hi = data[0];
    for &v in data {
        lo = lo.min2(v);
        hi = hi.max2(v);
    }
    (lo, hi)
}

/// Tracks min/max statistics used by tape-side normalization.
///
/// The statistics are detached from the gradient by design; `Replay` lets a
/// finite-difference oracle evaluate the forward pass with the statistics
/// frozen at the base point, which is the function backward() actually
/// differentiates.
pub enum NormCtx<R> {
    Record(Vec<(R, R)>),
    Replay(Vec<(R, R)>, usize),
}

impl<R: Real> NormCtx<R> {
    pub fn live() -> Self {
        NormCtx::Record(Vec::new())
    }

    pub fn frozen(stats: Vec<(R, R)>) -> Self {
        NormCtx::Replay(stats, 0)
    }

    pub fn into_stats(self) -> Vec<(R, R)> {
        match self {
            NormCtx::Record(s) => s,
            NormCtx::Replay(s, _) => s,
        }
    }

    /// Tape-side min-max normalization with detached statistics.
    pub fn minmax(&mut self, tape: &mut Tape<R>, x: Var) -> Var {
        let (lo, hi) = match self {
            NormCtx::Record(stats) => {
                let s = minmax_of(tape.values(x));
                stats.push(s);
                s
            }
            NormCtx::Replay(stats, cur) => {
                let s = stats[*cur];
                *cur += 1;
                s
            }
        };
        let shifted = tape.sub_scalar(x, lo);
        tape.mul_scalar(shifted, R::ONE / (hi - lo + R::from_f64(MINMAX_EPS)))
    }
}

/// One-off tape-side normalization with live statistics.
pub fn minmax_normalize_var<R: Real>(tape: &mut Tape<R>, x: Var) -> Var {
    let mut ctx = NormCtx::live();
    ctx.minmax(tape, x)
}

/// Which first-derivative operator feeds the gradient-magnitude map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradOp {
    /// Central differences interior, one-sided at borders.
    #[default]
    Central,
    /// 3x3 Sobel / 8, replicate-padded.
    Sobel,
}

/// Tape-side gradient magnitude under the configured operator.
pub fn grad_mag_var<R: Real>(tape: &mut Tape<R>, x: Var, op: GradOp) -> Result<Var> {
    match op {
        GradOp::Central => tape.grad_mag(x, R::from_f64(GRAD_MAG_EPS)),
        GradOp::Sobel => {
            let c = tape.shape(x)[0];
            if c != 1 {
                return Err(CoreError::ShapeMismatch(alloc::string::String::from(
                    "sobel gradient expects a single channel",
                )));
            }
            let s = 1.0 / 8.0;
            let kx: Vec<R> = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]
                .iter()
                .map(|&v| R::from_f64(v * s))
                .collect();
            let ky: Vec<R> = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]
                .iter()
                .map(|&v| R::from_f64(v * s))
                .collect();
            let wx = tape.leaf(&NdArray::new(vec![1, 1, 3, 3], kx));
            let wy = tape.leaf(&NdArray::new(vec![1, 1, 3, 3], ky));
            let gx = tape.conv2d(x, wx, None)?;
            let gy = tape.conv2d(x, wy, None)?;
            let gx2 = tape.square(gx);
            let gy2 = tape.square(gy);
            let sum = tape.add(gx2, gy2)?;
            let eps = R::from_f64(GRAD_MAG_EPS);
            Ok(tape.sqrt_eps(sum, eps * eps))
        }
    }
}

/// Plain (non-tape) gradient magnitude, same stencils as [`Tape::grad_mag`].
pub fn gradient_magnitude<R: Real>(x: &NdArray<R>) -> Result<NdArray<R>> {
    let mut tape: Tape<R> = Tape::new();
    let shape3 = match x.shape.len() {
        2 => vec![1, x.shape[0], x.shape[1]],
        _ => x.shape.clone(),
    };
    let v = tape.leaf(&NdArray::new(shape3, x.data.clone()));
    let g = tape.grad_mag(v, R::from_f64(GRAD_MAG_EPS))?;
    Ok(NdArray::new(x.shape.clone(), tape.values(g).to_vec()))
}

/// Separable Gaussian blur, replicate padding.
pub fn gaussian_blur<R: Real>(x: &NdArray<R>, sigma: R) -> Result<NdArray<R>> {
    let (c, h, w) = dims(&x.shape)?;
    let k = Kernel1D::gaussian(sigma)?;
    let r = k.support as isize;
    let mut mid = vec![R::ZERO; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xo in 0..w {
                let mut acc = R::ZERO;
                for (t, &wt) in k.taps.iter().enumerate() {
                    let xi = clamp_idx(xo as isize + t as isize - r, w);
                    acc += wt * x.data[(ch * h + y) * w + xi];
                }
                mid[(ch * h + y) * w + xo] = acc;
            }
        }
    }
    let mut out = vec![R::ZERO; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xo in 0..w {
                let mut acc = R::ZERO;
                for (t, &wt) in k.taps.iter().enumerate() {
                    let yi = clamp_idx(y as isize + t as isize - r, h);
                    acc += wt * mid[(ch * h + yi) * w + xo];
                }
                out[(ch * h + y) * w + xo] = acc;
            }
        }
    }
    Ok(NdArray::new(x.shape.clone(), out))
}

/// Additive Gaussian noise, seeded and reproducible. `std = 0` is the
/// identity.
pub fn add_gaussian_noise<R: Real>(x: &NdArray<R>, mean: R, std: R, seed: u64) -> Result<NdArray<R>> {
    if std < R::ZERO {
        return Err(CoreError::InvalidArgument(alloc::string::String::from(
            "noise std must be >= 0",
        )));
    }
    if std == R::ZERO && mean == R::ZERO {
        return Ok(x.clone());
    }
    let mut rng = Rng::seed_from_u64(seed);
    Ok(NdArray {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v + rng.normal(mean, std)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> NdArray<f64> {
        NdArray::new(
            vec![h, w],
            (0..h * w).map(|i| (i % w) as f64).collect(),
        )
    }

    #[test]
    fn bicubic_identity_at_scale_one() {
        let x = ramp(6, 6);
        let y = bicubic_scale(&x, 1.0).unwrap();
        for (a, b) in x.data.iter().zip(y.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_preserves_constants() {
        let x = NdArray::full(vec![8, 8], 3.25f64);
        for &(oh, ow) in &[(3, 5), (16, 16), (11, 7)] {
            let y = bicubic_resize(&x, oh, ow).unwrap();
            for &v in &y.data {
                assert!((v - 3.25).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bicubic_reproduces_linear_ramp_interior() {
        // degree <= 1 polynomial reproduction on interior samples
        let x = ramp(4, 8);
        let y = bicubic_resize(&x, 4, 16).unwrap();
        for oy in 0..4 {
            for ox in 4..12 {
                let expect = (ox as f64 + 0.5) * 0.5 - 0.5;
                assert!(
                    (y.data[oy * 16 + ox] - expect).abs() < 1e-6,
                    "at ({oy},{ox}): {} vs {expect}",
                    y.data[oy * 16 + ox]
                );
            }
        }
    }

    #[test]
    fn bicubic_zero_output_rejected() {
        let x = ramp(4, 4);
        assert!(bicubic_resize(&x, 0, 4).is_err());
    }

    #[test]
    fn minmax_basic_and_constant() {
        let x = NdArray::new(vec![3], vec![2.0f64, 4.0, 6.0]);
        let y = minmax_normalize(&x);
        assert!((y.data[0] - 0.0).abs() < 1e-7);
        assert!((y.data[1] - 0.5).abs() < 1e-7);
        assert!((y.data[2] - 1.0).abs() < 1e-7);
        let c = NdArray::full(vec![5], 9.0f64);
        let yc = minmax_normalize(&c);
        for &v in &yc.data {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn minmax_affine_invariance() {
        let x = NdArray::new(vec![4], vec![1.0f64, 3.0, -2.0, 0.5]);
        let ax = NdArray::new(vec![4], x.data.iter().map(|v| 3.0 * v + 7.0).collect());
        let a = minmax_normalize(&x);
        let b = minmax_normalize(&ax);
        for (p, q) in a.data.iter().zip(b.data.iter()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_magnitude_constant_and_ramp() {
        let c = NdArray::full(vec![5, 5], 2.0f64);
        let g = gradient_magnitude(&c).unwrap();
        for &v in &g.data {
            assert!(v < 1e-6);
        }
        let x = ramp(5, 5);
        let g = gradient_magnitude(&x).unwrap();
        for y in 1..4 {
            for xx in 1..4 {
                assert!((g.data[y * 5 + xx] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_preserves_constant() {
        let c = NdArray::full(vec![6, 6], 4.5f64);
        let b = gaussian_blur(&c, 1.5).unwrap();
        for &v in &b.data {
            assert!((v - 4.5).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_zero_std_is_identity_and_seeded() {
        let x = ramp(4, 4);
        let y = add_gaussian_noise(&x, 0.0, 0.0, 7).unwrap();
        assert_eq!(x.data, y.data);
        let a = add_gaussian_noise(&x, 0.0, 0.1, 42).unwrap();
        let b = add_gaussian_noise(&x, 0.0, 0.1, 42).unwrap();
        assert_eq!(a.data, b.data);
        let c = add_gaussian_noise(&x, 0.0, 0.1, 43).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        let k: Kernel1D<f64> = Kernel1D::gaussian(3.6).unwrap();
        let s: f64 = k.taps.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(k.support, 11);
    }
}
