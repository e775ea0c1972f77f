//! Synthetic RGB-D scenes and the degradation pipeline that turns them into
//! training/eval pairs.
//!
//! A scene is a piecewise-smooth depth map (slanted ground plane plus
//! fronto-parallel rectangles and spheres), an albedo-shaded RGB rendering,
//! and an analytically derived discontinuity mask. Degradation follows the
//! synthetic-DSR convention: bicubic downsampling to LR, optional blur+noise
//! on the LR map in normalized depth units, and bicubic upsampling back to
//! the target grid.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::image::{add_gaussian_noise, bicubic_resize, gaussian_blur, minmax_of};
use crate::prompt::{synthetic_prompt_oracle, PromptFlow};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::NdArray;

pub const NOISE_BLUR_SIGMA: f64 = 3.6;
pub const NOISE_STD_NORMALIZED: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthUnit {
    Meters,
    Millimeters,
}

/// Single-channel depth with unit metadata; pixels with value 0 are invalid.
#[derive(Debug, Clone)]
pub struct DepthMap<R> {
    /// [1,H,W]
    pub data: NdArray<R>,
    pub unit: DepthUnit,
}

impl<R: Real> DepthMap<R> {
    pub fn meters(data: NdArray<R>) -> Self {
        DepthMap {
            data,
            unit: DepthUnit::Meters,
        }
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.data.data.iter().map(|&v| v > R::ZERO).collect()
    }
}

/// Fronto-parallel scene primitives, all in front of the ground plane.
#[derive(Debug, Clone, Copy)]
pub enum Primitive {
    Rect {
        y0: usize,
        x0: usize,
        y1: usize,
        x1: usize,
        depth_m: f64,
    },
    Sphere {
        cy: f64,
        cx: f64,
        radius_px: f64,
        center_depth_m: f64,
        bulge_m: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Scene<R> {
    /// [1,H,W], meters, > 0 everywhere except explicitly invalid pixels.
    pub gt_depth: NdArray<R>,
    /// [3,H,W] in [0,1].
    pub rgb: NdArray<R>,
    /// [H*W] booleans marking primitive silhouettes.
    pub discontinuity_mask: Vec<bool>,
    pub seed: u64,
}

impl<R: Real> Scene<R> {
    pub fn height(&self) -> usize {
        self.gt_depth.shape[1]
    }
    pub fn width(&self) -> usize {
        self.gt_depth.shape[2]
    }
}

/// Build a scene from an explicit primitive list. The ground plane slants
/// from `plane_near` (bottom row) to `plane_far` (top row).
pub fn gen_scene_from<R: Real>(
    primitives: &[Primitive],
    h: usize,
    w: usize,
    plane_near: f64,
    plane_far: f64,
    seed: u64,
) -> Scene<R> {
    let mut depth = vec![0f64; h * w];
    let mut owner = vec![0usize; h * w]; // 0 = plane, i+1 = primitive i
    for y in 0..h {
        let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        let zp = plane_far + (plane_near - plane_far) * t;
        for x in 0..w {
            depth[y * w + x] = zp;
        }
    }
    for (pi, prim) in primitives.iter().enumerate() {
        match *prim {
            Primitive::Rect {
                y0,
                x0,
                y1,
                x1,
                depth_m,
            } => {
                for y in y0..y1.min(h) {
                    for x in x0..x1.min(w) {
                        if depth_m < depth[y * w + x] {
                            depth[y * w + x] = depth_m;
                            owner[y * w + x] = pi + 1;
                        }
                    }
                }
            }
            Primitive::Sphere {
                cy,
                cx,
                radius_px,
                center_depth_m,
                bulge_m,
            } => {
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 - cy;
                        let dx = x as f64 - cx;
                        let d2 = (dy * dy + dx * dx) / (radius_px * radius_px);
                        if d2 <= 1.0 {
                            let z = center_depth_m - bulge_m * libm::sqrt(1.0 - d2);
                            if z < depth[y * w + x] {
                                depth[y * w + x] = z;
                                owner[y * w + x] = pi + 1;
                            }
                        }
                    }
                }
            }
        }
    }
    // silhouette pixels: owner differs from any 4-neighbor
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            let differs = (x + 1 < w && owner[y * w + x + 1] != o)
                || (x > 0 && owner[y * w + x - 1] != o)
                || (y + 1 < h && owner[(y + 1) * w + x] != o)
                || (y > 0 && owner[(y - 1) * w + x] != o);
            mask[y * w + x] = differs;
        }
    }
    // albedo per surface, shaded by inverse depth
    let mut rng = Rng::seed_from_u64(seed ^ 0xa1be_d0);
    let mut albedos: Vec<[f64; 3]> = Vec::with_capacity(primitives.len() + 1);
    for _ in 0..=primitives.len() {
        albedos.push([
            rng.uniform(0.2f64, 1.0),
            rng.uniform(0.2f64, 1.0),
            rng.uniform(0.2f64, 1.0),
        ]);
    }
    let mut rgb = vec![R::ZERO; 3 * h * w];
    for i in 0..h * w {
        let shade = (0.5 / depth[i]).clamp2(0.05, 1.0);
        let a = albedos[owner[i]];
        for c in 0..3 {
            rgb[c * h * w + i] = R::from_f64(a[c] * shade);
        }
    }
    Scene {
        gt_depth: NdArray::new(vec![1, h, w], depth.iter().map(|&v| R::from_f64(v)).collect()),
        rgb: NdArray::new(vec![3, h, w], rgb),
        discontinuity_mask: mask,
        seed,
    }
}

/// Random scene: slanted plane plus 2-6 primitives at depths in [0.5, 10] m.
pub fn gen_scene<R: Real>(seed: u64, h: usize, w: usize) -> Result<Scene<R>> {
    if h < 28 || w < 28 {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "scene dims must be >= 28, got {h}x{w}"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let plane_near = rng.uniform(4.0f64, 7.0);
    let plane_far = rng.uniform(7.0f64, 10.0);
    let n_prims = rng.uniform_usize(2, 6);
    let mut prims = Vec::with_capacity(n_prims);
    for _ in 0..n_prims {
        if rng.uniform_f64() < 0.6 {
            let rh = rng.uniform_usize(h / 8, h / 2);
            let rw = rng.uniform_usize(w / 8, w / 2);
            let y0 = rng.uniform_usize(0, h - rh - 1);
            let x0 = rng.uniform_usize(0, w - rw - 1);
            prims.push(Primitive::Rect {
                y0,
                x0,
                y1: y0 + rh,
                x1: x0 + rw,
                depth_m: rng.uniform(0.5f64, 3.5),
            });
        } else {
            prims.push(Primitive::Sphere {
                cy: rng.uniform(0.0f64, (h - 1) as f64),
                cx: rng.uniform(0.0f64, (w - 1) as f64),
                radius_px: rng.uniform(h.min(w) as f64 / 10.0, h.min(w) as f64 / 4.0),
                center_depth_m: rng.uniform(1.0f64, 4.0),
                bulge_m: rng.uniform(0.2f64, 0.8),
            });
        }
    }
    Ok(gen_scene_from(&prims, h, w, plane_near, plane_far, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Clean,
    Noisy,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Clean => "clean",
            Regime::Noisy => "noisy",
        }
    }
}

/// One network input pair: bicubic-upsampled LR depth, ground truth, prompts.
pub struct SamplePair<R> {
    /// [1,H,W], already upsampled back to the target grid.
    pub x: NdArray<R>,
    /// [1,H,W] ground truth.
    pub z: NdArray<R>,
    pub prompts: PromptFlow<R>,
    pub scale: f64,
    pub regime: Regime,
}

/// Bicubic LR generation at `1/scale`, optional blur+noise on the LR map
/// (sigma 3.6, std 0.07 in [0,1]-normalized depth units), bicubic upsample
/// back to the ground-truth grid, prompts from the synthetic oracle.
pub fn degrade<R: Real>(
    scene: &Scene<R>,
    scale: f64,
    regime: Regime,
    seed: u64,
) -> Result<SamplePair<R>> {
    if !(scale > 1.0) {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "degradation scale must be > 1, got {scale}"
        )));
    }
    let (h, w) = (scene.height(), scene.width());
    let lr_h = libm::round(h as f64 / scale).max(1.0) as usize;
    let lr_w = libm::round(w as f64 / scale).max(1.0) as usize;
    if lr_h < 2 || lr_w < 2 {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "LR dims {lr_h}x{lr_w} too small for scale {scale}"
        )));
    }
    let mut lr = bicubic_resize(&scene.gt_depth, lr_h, lr_w)?;
    if regime == Regime::Noisy {
        let (lo, hi) = minmax_of(&lr.data);
        let span = hi - lo + R::from_f64(1e-12);
        let norm = NdArray::new(
            lr.shape.clone(),
            lr.data.iter().map(|&v| (v - lo) / span).collect(),
        );
        let blurred = gaussian_blur(&norm, R::from_f64(NOISE_BLUR_SIGMA))?;
        let noisy = add_gaussian_noise(
            &blurred,
            R::ZERO,
            R::from_f64(NOISE_STD_NORMALIZED),
            seed ^ 0x4e01_5e,
        )?;
        lr = NdArray::new(
            lr.shape.clone(),
            noisy.data.iter().map(|&v| v * span + lo).collect(),
        );
    }
    let x = bicubic_resize(&lr, h, w)?;
    let prompts = synthetic_prompt_oracle(scene, seed ^ 0x9906_7a)?;
    Ok(SamplePair {
        x,
        z: scene.gt_depth.clone(),
        prompts,
        scale,
        regime,
    })
}
