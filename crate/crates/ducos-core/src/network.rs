//! The full model: a 3x3 depth head, four correlative-fusion stages, and a
//! 3x3 tail producing the HR depth prediction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fusion::{cf_forward, CfSettings, FusionMode, FusionTrace, StageVars};
use crate::image::{GradOp, NormCtx};
use crate::prompt::PromptFlow;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{NdArray, Tape, Var};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Feature width C.
    pub channels: usize,
    /// Residual blocks per stage group.
    pub res_blocks: usize,
    /// Fusion refinement iterations per stage.
    pub iterations: usize,
    /// Transposed-conv kernel (2 or 4).
    pub deconv_kernel: usize,
    /// Prompt channel count C_p the model was built for.
    pub prompt_channels: usize,
    pub patch_size: usize,
    /// Share the 1x1 alignment projection between the depth and prompt
    /// branches.
    pub h_shared: bool,
    pub fusion: FusionMode<f64>,
    pub grad_op: GradOp,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            res_blocks: 2,
            iterations: 3,
            deconv_kernel: 4,
            prompt_channels: crate::prompt::ORACLE_CHANNELS,
            patch_size: crate::prompt::PATCH_SIZE,
            h_shared: false,
            fusion: FusionMode::Pcc,
            grad_op: GradOp::Central,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<R> {
    /// Unique dotted path, e.g. "stage2.block0.conv1.weight".
    pub name: String,
    pub array: NdArray<R>,
}

/// Flat list of named parameters; layers hold indices into it.
#[derive(Debug, Clone)]
pub struct ParamSet<R> {
    pub params: Vec<Param<R>>,
}

impl<R: Real> ParamSet<R> {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        debug_assert!(self.params.iter().all(|p| p.name != name));
        self.params.push(Param {
            name,
            array: NdArray::zeros(shape),
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.array.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct StageIdx {
    prompt_proj: ConvIdx,
    deconv_w: usize,
    blocks: Vec<(ConvIdx, ConvIdx)>,
    tau2: ConvIdx,
    h_d: ConvIdx,
    h_f: ConvIdx,
    concat_f_w: usize,
    concat_d_w: usize,
    concat_b: usize,
}

pub struct DuCosModel<R> {
    pub config: ModelConfig,
    pub params: ParamSet<R>,
    head: ConvIdx,
    stages: Vec<StageIdx>,
    tail: ConvIdx,
}

/// Tape handles for all parameters of one forward pass, aligned with
/// `params.params`.
pub struct Binding {
    pub vars: Vec<Var>,
}

pub struct ModelOut {
    pub y: Var,
    pub traces: Vec<FusionTrace>,
}

impl<R: Real> DuCosModel<R> {
    /// Build the parameter layout (all zeros; call [`Self::init_params`]).
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.channels == 0 || config.res_blocks == 0 || config.iterations == 0 {
            return Err(CoreError::InvalidArgument(String::from(
                "channels, res_blocks and iterations must be >= 1",
            )));
        }
        if !(config.deconv_kernel == 2 || config.deconv_kernel == 4) {
            return Err(CoreError::InvalidArgument(String::from(
                "deconv kernel must be 2 or 4",
            )));
        }
        let c = config.channels;
        let cp = config.prompt_channels;
        let k = config.deconv_kernel;
        let mut params = ParamSet { params: Vec::new() };
        let head = ConvIdx {
            w: params.add(String::from("head.weight"), vec![c, 1, 3, 3]),
            b: params.add(String::from("head.bias"), vec![c]),
        };
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let pfx = format!("stage{s}");
            let prompt_proj = ConvIdx {
                w: params.add(format!("{pfx}.prompt_proj.weight"), vec![c, cp, 1, 1]),
                b: params.add(format!("{pfx}.prompt_proj.bias"), vec![c]),
            };
            let deconv_w = params.add(format!("{pfx}.deconv.weight"), vec![c, c, k, k]);
            let mut blocks = Vec::with_capacity(config.res_blocks);
            for r in 0..config.res_blocks {
                let c1 = ConvIdx {
                    w: params.add(format!("{pfx}.block{r}.conv1.weight"), vec![c, c, 3, 3]),
                    b: params.add(format!("{pfx}.block{r}.conv1.bias"), vec![c]),
                };
                let c2 = ConvIdx {
                    w: params.add(format!("{pfx}.block{r}.conv2.weight"), vec![c, c, 3, 3]),
                    b: params.add(format!("{pfx}.block{r}.conv2.bias"), vec![c]),
                };
                blocks.push((c1, c2));
            }
            let tau2 = ConvIdx {
                w: params.add(format!("{pfx}.tau2.weight"), vec![c, c, 3, 3]),
                b: params.add(format!("{pfx}.tau2.bias"), vec![c]),
            };
            let h_d = ConvIdx {
                w: params.add(format!("{pfx}.h_proj_d.weight"), vec![1, c, 1, 1]),
                b: params.add(format!("{pfx}.h_proj_d.bias"), vec![1]),
            };
            let h_f = ConvIdx {
                w: params.add(format!("{pfx}.h_proj_f.weight"), vec![1, c, 1, 1]),
                b: params.add(format!("{pfx}.h_proj_f.bias"), vec![1]),
            };
            let concat_f_w = params.add(format!("{pfx}.concat.f_weight"), vec![c, c, 1, 1]);
            let concat_d_w = params.add(format!("{pfx}.concat.d_weight"), vec![c, c, 1, 1]);
            let concat_b = params.add(format!("{pfx}.concat.bias"), vec![c]);
            stages.push(StageIdx {
                prompt_proj,
                deconv_w,
                blocks,
                tau2,
                h_d,
                h_f,
                concat_f_w,
                concat_d_w,
                concat_b,
            });
        }
        let tail = ConvIdx {
            w: params.add(String::from("tail.weight"), vec![1, c, 3, 3]),
            b: params.add(String::from("tail.bias"), vec![1]),
        };
        Ok(DuCosModel {
            config,
            params,
            head,
            stages,
            tail,
        })
    }

    /// Kaiming-uniform fan-in init for weights, zero biases; seeded.
    pub fn init_params(&mut self, seed: u64) {
        let mut root = Rng::seed_from_u64(seed);
        for (i, p) in self.params.params.iter_mut().enumerate() {
            let mut rng = root.fork(i as u64);
            if p.name.ends_with(".bias") || p.array.shape.len() == 1 {
                for v in p.array.data.iter_mut() {
                    *v = R::ZERO;
                }
            } else {
                let fan_in = p.array.numel() / p.array.shape[0];
                let bound = libm::sqrt(6.0 / fan_in as f64);
                for v in p.array.data.iter_mut() {
                    *v = rng.uniform(R::from_f64(-bound), R::from_f64(bound));
                }
            }
        }
    }

    /// Kaiming-uniform bound used by [`Self::init_params`] for a weight of
    /// the given shape.
    pub fn kaiming_bound(shape: &[usize]) -> f64 {
        let numel: usize = shape.iter().product();
        let fan_in = numel / shape[0];
        libm::sqrt(6.0 / fan_in as f64)
    }

    /// Record every parameter as a grad-requiring leaf on the tape.
    pub fn bind(&self, tape: &mut Tape<R>) -> Binding {
        Binding {
            vars: self
                .params
                .params
                .iter()
                .map(|p| tape.leaf_grad(&p.array))
                .collect(),
        }
    }

    fn stage_vars(&self, b: &Binding, s: &StageIdx) -> StageVars {
        StageVars {
            prompt_proj_w: b.vars[s.prompt_proj.w],
            prompt_proj_b: b.vars[s.prompt_proj.b],
            deconv_w: b.vars[s.deconv_w],
            blocks: s
                .blocks
                .iter()
                .map(|(c1, c2)| (b.vars[c1.w], b.vars[c1.b], b.vars[c2.w], b.vars[c2.b]))
                .collect(),
            tau2_w: b.vars[s.tau2.w],
            tau2_b: b.vars[s.tau2.b],
            h_d_w: b.vars[s.h_d.w],
            h_d_b: b.vars[s.h_d.b],
            h_f_w: b.vars[s.h_f.w],
            h_f_b: b.vars[s.h_f.b],
            concat_w_f: b.vars[s.concat_f_w],
            concat_w_d: b.vars[s.concat_d_w],
            concat_b: b.vars[s.concat_b],
        }
    }

    fn fusion_mode(&self) -> FusionMode<R> {
        match self.config.fusion {
            FusionMode::Pcc => FusionMode::Pcc,
            FusionMode::ForceAlpha(a) => FusionMode::ForceAlpha(R::from_f64(a)),
            FusionMode::Addition => FusionMode::Addition,
            FusionMode::Concat => FusionMode::Concat,
        }
    }

    /// Forward pass for one sample. `x` is the bicubic-upsampled LR depth at
    /// the target resolution; the prompt flow must match it.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        binding: &Binding,
        x: &NdArray<R>,
        prompts: &PromptFlow<R>,
        norm: &mut NormCtx<R>,
    ) -> Result<ModelOut> {
        let xv = tape.leaf(x);
        self.forward_from_var(tape, binding, xv, prompts, norm)
    }

    /// Forward pass from an input already on the tape, so callers can track
    /// gradients with respect to the input itself.
    pub fn forward_from_var(
        &self,
        tape: &mut Tape<R>,
        binding: &Binding,
        xv: Var,
        prompts: &PromptFlow<R>,
        norm: &mut NormCtx<R>,
    ) -> Result<ModelOut> {
        let xs = tape.shape(xv).to_vec();
        if xs.len() != 3 || xs[0] != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "model input must be [1,H,W], got {:?}",
                xs
            )));
        }
        let (h, w) = (xs[1], xs[2]);
        prompts.validate(h, w)?;
        if prompts.channels() != self.config.prompt_channels {
            return Err(CoreError::ShapeMismatch(format!(
                "prompt channels {} vs model {}",
                prompts.channels(),
                self.config.prompt_channels
            )));
        }
        let settings = CfSettings {
            iterations: self.config.iterations,
            mode: self.fusion_mode(),
            h_shared: self.config.h_shared,
        };
        let mut d = tape.conv2d(xv, binding.vars[self.head.w], Some(binding.vars[self.head.b]))?;
        let mut traces = Vec::with_capacity(NUM_STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            let f = tape.leaf(&prompts.features[i]);
            let sv = self.stage_vars(binding, stage);
            let (d_next, trace) = cf_forward(tape, &sv, &settings, f, d, norm)?;
            traces.push(trace);
            d = d_next;
        }
        let y = tape.conv2d(d, binding.vars[self.tail.w], Some(binding.vars[self.tail.b]))?;
        Ok(ModelOut { y, traces })
    }

    /// Apply accumulated gradients with a plain step `w -= lr * g`.
    pub fn sgd_step(&mut self, grads: &[Vec<R>], lr: R) {
        for (p, g) in self.params.params.iter_mut().zip(grads.iter()) {
            for (w, &gv) in p.array.data.iter_mut().zip(g.iter()) {
                *w -= lr * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::synthetic_prompt_oracle;
    use crate::scene::gen_scene;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 4,
            res_blocks: 1,
            iterations: 2,
            deconv_kernel: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shape_matches_input() {
        for &(h, w) in &[(56usize, 56usize), (70, 98)] {
            let scene = gen_scene::<f32>(1, h, w).unwrap();
            let prompts = synthetic_prompt_oracle(&scene, 2).unwrap();
            let mut model: DuCosModel<f32> = DuCosModel::new(small_config()).unwrap();
            model.init_params(3);
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let mut norm = NormCtx::live();
            let out = model
                .forward(&mut tape, &b, &scene.gt_depth, &prompts, &mut norm)
                .unwrap();
            assert_eq!(tape.shape(out.y), &[1, h, w]);
            assert_eq!(out.traces.len(), 4);
        }
    }

    #[test]
    fn zero_weights_give_constant_tail_bias() {
        let scene = gen_scene::<f64>(1, 56, 56).unwrap();
        let prompts = synthetic_prompt_oracle(&scene, 2).unwrap();
        let model: DuCosModel<f64> = DuCosModel::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let mut norm = NormCtx::live();
        let out = model
            .forward(&mut tape, &b, &scene.gt_depth, &prompts, &mut norm)
            .unwrap();
        for &v in tape.values(out.y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn init_is_seeded() {
        let mut a: DuCosModel<f32> = DuCosModel::new(small_config()).unwrap();
        let mut b: DuCosModel<f32> = DuCosModel::new(small_config()).unwrap();
        a.init_params(5);
        b.init_params(5);
        for (pa, pb) in a.params.params.iter().zip(b.params.params.iter()) {
            assert_eq!(pa.array.data, pb.array.data);
        }
        let mut c: DuCosModel<f32> = DuCosModel::new(small_config()).unwrap();
        c.init_params(6);
        assert_ne!(a.params.params[0].array.data, c.params.params[0].array.data);
    }

    #[test]
    fn init_statistics_match_fan_in_formula() {
        let mut m: DuCosModel<f64> = DuCosModel::new(ModelConfig::default()).unwrap();
        m.init_params(11);
        for p in &m.params.params {
            if p.name.ends_with(".bias") {
                continue;
            }
            let bound = DuCosModel::<f64>::kaiming_bound(&p.array.shape);
            let expected_std = bound / libm::sqrt(3.0);
            let n = p.array.numel() as f64;
            let mean: f64 = p.array.data.iter().sum::<f64>() / n;
            let var: f64 = p.array.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = libm::sqrt(var);
            assert!(
                std > 0.5 * expected_std && std < 2.0 * expected_std,
                "{}: std {std} vs expected {expected_std}",
                p.name
            );
        }
    }

    #[test]
    fn prompt_stage_count_enforced() {
        let scene = gen_scene::<f32>(1, 56, 56).unwrap();
        let mut prompts = synthetic_prompt_oracle(&scene, 2).unwrap();
        prompts.features.pop();
        let mut model: DuCosModel<f32> = DuCosModel::new(small_config()).unwrap();
        model.init_params(3);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let mut norm = NormCtx::live();
        assert!(model
            .forward(&mut tape, &b, &scene.gt_depth, &prompts, &mut norm)
            .is_err());
    }
}
