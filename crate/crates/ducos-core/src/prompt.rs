//! Prompt flow: the four per-stage feature maps and the sharp-edged relative
//! depth that stand in for a depth foundation model.
//!
//! Real foundation-model inference is out-of-process by design; the `ducos`
//! crate loads precomputed prompt files. This module holds the in-memory
//! type plus a synthetic oracle that produces prompts from a scene: the
//! relative depth is a monotone power-law distortion of the ground truth
//! (wrong in absolute value, sharp at edges), and the features are
//! patch-pooled stacks of RGB, luminance gradient, and the relative depth,
//! passed through a fixed seeded random linear mixing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::image::{gradient_magnitude, minmax_normalize};
use crate::real::Real;
use crate::rng::Rng;
use crate::scene::Scene;
use crate::tensor::NdArray;

pub const PATCH_SIZE: usize = 14;
pub const ORACLE_CHANNELS: usize = 24;
pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSource {
    File,
    Oracle,
}

#[derive(Debug, Clone)]
pub struct PromptFlow<R> {
    /// Four maps, each [C_p, ceil(H/p), ceil(W/p)].
    pub features: Vec<NdArray<R>>,
    /// [1,H,W], values in [0,1].
    pub relative_depth: NdArray<R>,
    pub patch_size: usize,
    pub source: PromptSource,
}

impl<R: Real> PromptFlow<R> {
    /// Check the invariants: 4 stages sharing C_p and the ceil(H/p) grid,
    /// relative depth finite in [0,1] at the given resolution.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.features.len() != NUM_STAGES {
            return Err(CoreError::InvalidArgument(alloc::format!(
                "prompt flow must carry {NUM_STAGES} stages, got {}",
                self.features.len()
            )));
        }
        let fh = h.div_ceil(self.patch_size);
        let fw = w.div_ceil(self.patch_size);
        let cp = self.features[0].shape[0];
        for (i, f) in self.features.iter().enumerate() {
            if f.shape.len() != 3 || f.shape[0] != cp || f.shape[1] != fh || f.shape[2] != fw {
                return Err(CoreError::ShapeMismatch(alloc::format!(
                    "prompt stage {i} has shape {:?}, expected [{cp},{fh},{fw}]",
                    f.shape
                )));
            }
        }
        if self.relative_depth.shape != [1, h, w] {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "relative depth shape {:?} vs target [1,{h},{w}]",
                self.relative_depth.shape
            )));
        }
        for &v in &self.relative_depth.data {
            if !v.is_finite() || v < R::ZERO || v > R::ONE {
                return Err(CoreError::InvalidArgument(alloc::string::String::from(
                    "relative depth must be finite in [0,1]",
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.features[0].shape[0]
    }
}

/// Average-pool a [C,H,W] map onto the ceil(H/p) x ceil(W/p) patch grid.
fn patch_pool<R: Real>(x: &NdArray<R>, p: usize) -> NdArray<R> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let fh = h.div_ceil(p);
    let fw = w.div_ceil(p);
    let mut out = vec![R::ZERO; c * fh * fw];
    for ch in 0..c {
        for py in 0..fh {
            for px in 0..fw {
                let y1 = ((py + 1) * p).min(h);
                let x1 = ((px + 1) * p).min(w);
                let mut acc = R::ZERO;
                let mut cnt = 0usize;
                for y in py * p..y1 {
                    for xx in px * p..x1 {
                        acc += x.data[(ch * h + y) * w + xx];
                        cnt += 1;
                    }
                }
                out[(ch * fh + py) * fw + px] = acc / R::from_usize(cnt);
            }
        }
    }
    NdArray::new(vec![c, fh, fw], out)
}

/// Monotone distortion parameters the oracle sampled; exposed for tests.
#[derive(Debug, Clone, Copy)]
pub struct OracleDistortion {
    pub gain: f64,
    pub gamma: f64,
    pub offset: f64,
}

/// Relative depth from a monotone power-law distortion of the ground truth:
/// N(a * gt^gamma + b). Preserves pixel ordering and edge locations.
pub fn distort_depth<R: Real>(gt: &NdArray<R>, d: OracleDistortion) -> NdArray<R> {
    let warped = NdArray::new(
        gt.shape.clone(),
        gt.data
            .iter()
            .map(|&v| {
                R::from_f64(d.gain * libm::pow(v.to_f64().max(0.0), d.gamma) + d.offset)
            })
            .collect(),
    );
    minmax_normalize(&warped)
}

/// Deterministic prompt flow for a scene: same scene + seed gives identical
/// output.
pub fn synthetic_prompt_oracle<R: Real>(scene: &Scene<R>, seed: u64) -> Result<PromptFlow<R>> {
    let (h, w) = (scene.height(), scene.width());
    let mut rng = Rng::seed_from_u64(seed);
    let distortion = OracleDistortion {
        gain: rng.uniform(0.5f64, 2.0),
        gamma: rng.uniform(0.7f64, 1.3),
        offset: rng.uniform(-0.5f64, 0.5),
    };
    let yprime = distort_depth(&scene.gt_depth, distortion);

    // luminance gradient of the rendering
    let hw = h * w;
    let mut lum = vec![R::ZERO; hw];
    let third = R::from_f64(1.0 / 3.0);
    for i in 0..hw {
        lum[i] = (scene.rgb.data[i] + scene.rgb.data[hw + i] + scene.rgb.data[2 * hw + i]) * third;
    }
    let lum_grad = gradient_magnitude(&NdArray::new(vec![1, h, w], lum))?;

    // 5-channel base stack: RGB, luminance gradient, relative depth
    let mut stack = Vec::with_capacity(5 * hw);
    stack.extend_from_slice(&scene.rgb.data);
    stack.extend_from_slice(&lum_grad.data);
    stack.extend_from_slice(&yprime.data);
    let base = NdArray::new(vec![5, h, w], stack);
    let pooled = patch_pool(&base, PATCH_SIZE);
    let (fh, fw) = (pooled.shape[1], pooled.shape[2]);

    let mut features = Vec::with_capacity(NUM_STAGES);
    for _stage in 0..NUM_STAGES {
        let mut mix = vec![R::ZERO; ORACLE_CHANNELS * 5];
        for m in mix.iter_mut() {
            *m = rng.uniform(R::from_f64(-1.0), R::ONE);
        }
        let mut out = vec![R::ZERO; ORACLE_CHANNELS * fh * fw];
        for co in 0..ORACLE_CHANNELS {
            for ci in 0..5 {
                let wgt = mix[co * 5 + ci];
                for j in 0..fh * fw {
                    out[co * fh * fw + j] += wgt * pooled.data[ci * fh * fw + j];
                }
            }
        }
        features.push(NdArray::new(vec![ORACLE_CHANNELS, fh, fw], out));
    }

    Ok(PromptFlow {
        features,
        relative_depth: yprime,
        patch_size: PATCH_SIZE,
        source: PromptSource::Oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, gen_scene_from, Primitive};

    #[test]
    fn identity_distortion_preserves_edges() {
        let prim = Primitive::Rect {
            y0: 10,
            x0: 10,
            y1: 24,
            x1: 24,
            depth_m: 1.0,
        };
        let s: Scene<f64> = gen_scene_from(&[prim], 40, 40, 5.0, 5.0, 1);
        let d = OracleDistortion {
            gain: 1.0,
            gamma: 1.0,
            offset: 0.0,
        };
        let y = distort_depth(&s.gt_depth, d);
        let n = minmax_normalize(&s.gt_depth);
        for (a, b) in y.data.iter().zip(n.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn distortion_preserves_ordering() {
        let s: Scene<f64> = gen_scene(4, 40, 40).unwrap();
        let d = OracleDistortion {
            gain: 1.7,
            gamma: 0.8,
            offset: -0.3,
        };
        let y = distort_depth(&s.gt_depth, d);
        let mut idx: Vec<usize> = (0..y.data.len()).collect();
        idx.sort_by(|&a, &b| y.data[a].partial_cmp(&y.data[b]).unwrap());
        let mut idx_gt: Vec<usize> = (0..y.data.len()).collect();
        idx_gt.sort_by(|&a, &b| s.gt_depth.data[a].partial_cmp(&s.gt_depth.data[b]).unwrap());
        assert_eq!(idx, idx_gt);
    }

    #[test]
    fn oracle_deterministic_and_valid() {
        let s: Scene<f32> = gen_scene(9, 70, 98).unwrap();
        let a = synthetic_prompt_oracle(&s, 21).unwrap();
        let b = synthetic_prompt_oracle(&s, 21).unwrap();
        a.validate(70, 98).unwrap();
        assert_eq!(a.relative_depth.data, b.relative_depth.data);
        for (fa, fb) in a.features.iter().zip(b.features.iter()) {
            assert_eq!(fa.data, fb.data);
        }
        // ceil(70/14) = 5, ceil(98/14) = 7
        assert_eq!(a.features[0].shape, vec![ORACLE_CHANNELS, 5, 7]);
    }

    #[test]
    fn yprime_range_is_unit_interval() {
        let s: Scene<f64> = gen_scene(2, 56, 56).unwrap();
        let p = synthetic_prompt_oracle(&s, 5).unwrap();
        for &v in &p.relative_depth.data {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
